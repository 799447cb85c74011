"""Flat ``key = value`` run configuration with typed validation.

Lines starting with ``#`` are comments. Every key must be known; values are
converted with the field's type. Command-line ``--set key=value`` overrides
are applied after the file, and :meth:`RunConfig.dumps` writes the resolved
snapshot back in the same format.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .features import ConvSpec, DenseSpec, LayerSpec, NetworkArchitecture, Variant
from .training import LOSS_KINDS, PAPER_GRID, TrainConfig

OUTPUT_ROOT_ENV = "CSKN_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(t) for t in s.split(",") if t.strip())


def _ints(s: str) -> tuple:
    return tuple(int(t) for t in s.split(",") if t.strip())


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else float(s)


def parse_layers(s: str) -> tuple[LayerSpec, ...]:
    """``conv:16:2x2,conv:16:3x3,dense:100`` -> layer specs."""
    out = []
    for tok in s.split(","):
        parts = tok.strip().split(":")
        if parts[0] == "conv" and len(parts) == 3:
            kh, kw = (int(k) for k in parts[2].lower().split("x"))
            out.append(ConvSpec(int(parts[1]), (kh, kw)))
        elif parts[0] == "dense" and len(parts) == 2:
            out.append(DenseSpec(int(parts[1])))
        else:
            raise ConfigError(f"bad layer spec {tok!r}")
    return tuple(out)


def format_layers(layers: Iterable[LayerSpec]) -> str:
    toks = []
    for s in layers:
        if isinstance(s, ConvSpec):
            toks.append(f"conv:{s.out_channels}:{s.filter_size[0]}x{s.filter_size[1]}")
        else:
            toks.append(f"dense:{s.width}")
    return ",".join(toks)


_PARSERS = {bool: _bool, int: int, float: float, str: str, "floats": _floats, "ints": _ints,
            "opt_float": _opt_float}


def _f(default, kind=None):
    return field(default=default, metadata={"kind": kind or type(default)})


@dataclass
class RunConfig:
    # data
    data_format: str = _f("idx")
    train_path: str = _f("")
    train_labels_path: str = _f("")
    test_path: str = _f("")
    test_labels_path: str = _f("")
    train_size: int = _f(0)
    stratified: bool = _f(True)
    # equal count per class instead of proportional shares
    balanced: bool = _f(True)
    normalization: str = _f("pixel")
    # architecture
    input_shape: tuple = _f((28, 28, 1), "ints")
    layers: str = _f("conv:16:2x2,conv:16:3x3,conv:16:3x3")
    variant: str = _f("CSKN")
    output_dim: int = _f(0)
    schedule: str = _f("explicit")
    sigmas: tuple = _f((1.0, 0.5, 0.5), "floats")
    margin: float = _f(0.5)
    # training
    lambda1: float = _f(1e-4)
    lambda2: float = _f(1e-6)
    learning_rate: float = _f(0.05)
    adam_learning_rate: object = _f(0.001, "opt_float")
    batch_size: int = _f(32)
    epochs: int = _f(30)
    seed: int = _f(0)
    loss_kind: str = _f("softmax_cross_entropy")
    freeze_features: bool = _f(False)
    dtype: str = _f("float64")
    eval_every: int = _f(1)
    repeats: int = _f(1)
    output_dir: str = _f("runs/default")
    # cross-validation
    cv_folds: int = _f(5)
    lambda1_grid: tuple = _f(PAPER_GRID, "floats")
    lambda2_grid: tuple = _f(PAPER_GRID, "floats")
    # diagnostics
    decay_depth: int = _f(5)
    decay_width: int = _f(2000)
    probes: int = _f(100)
    probe_dim: int = _f(10)
    hoeffding_D: int = _f(100)
    hoeffding_eta: float = _f(0.05)
    hoeffding_trials: int = _f(2000)
    hoeffding_sigma: float = _f(1.0)
    lipschitz: float = _f(1.0)
    # gradient checking
    gradcheck_batch: int = _f(4)
    gradcheck_epsilon: float = _f(1e-5)
    max_gradcheck_params: int = _f(10_000)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.data_format not in ("idx", "libsvm"):
            raise ConfigError("data_format must be idx or libsvm")
        if self.normalization not in ("unit_norm", "standardize", "pixel", "none"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        try:
            Variant(self.variant)
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        if self.schedule not in ("explicit", "thresholds"):
            raise ConfigError("schedule must be explicit or thresholds")
        layers = parse_layers(self.layers)
        if self.schedule == "explicit" and len(self.sigmas) != len(layers):
            raise ConfigError(f"{len(self.sigmas)} sigmas for {len(layers)} layers")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.repeats < 1 or self.cv_folds < 2:
            raise ConfigError("repeats must be >= 1 and cv_folds >= 2")
        if self.margin < 0:
            raise ConfigError("margin must be nonnegative")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- derived objects ---------------------------------------------------
    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, learning_rate=self.learning_rate,
            adam_learning_rate=self.adam_learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            seed=self.seed if seed is None else seed, loss_kind=self.loss_kind,
            freeze_features=self.freeze_features, dtype=self.dtype, eval_every=self.eval_every)

    def architecture(self, output_dim: int | None = None) -> NetworkArchitecture:
        k = output_dim or self.output_dim
        if k < 1:
            raise ConfigError("output_dim unknown: set output_dim or load a dataset")
        try:
            return NetworkArchitecture(tuple(self.input_shape), parse_layers(self.layers),
                                       Variant(self.variant), k)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def resolved_output_dir(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    # -- text format -------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif v is None:
                v = "none"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], base: "RunConfig | None" = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {} if base is None else {f.name: getattr(base, f.name) for f in fields(cls)}
        for key, raw in pairs:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kind = known[key].metadata["kind"]
            try:
                values[key] = _PARSERS[kind](raw.strip())
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from None
        return cls(**values)


def parse_text(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def parse_overrides(items: Iterable[str]) -> list[tuple[str, str]]:
    pairs = []
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path: str | None, overrides: Iterable[str] = ()) -> RunConfig:
    """File values first, then overrides; missing file is a config error."""
    pairs = []
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        pairs = parse_text(p.read_text())
    return RunConfig.from_pairs(pairs + parse_overrides(overrides))
