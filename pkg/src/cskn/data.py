"""Dataset loading: LIBSVM text, IDX binaries, normalization and seeded subsampling."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from typing import IO, Iterable

import numpy as np

from .kernels import ContractError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
NORMALIZATION_MODES = ("unit_norm", "standardize", "pixel", "none")
STD_FLOOR = 1e-8


class DataFormatError(ValueError):
    pass


class TruncatedFileError(DataFormatError):
    pass


@dataclass(frozen=True)
class Normalization:
    """Enough to replay a transform on held-out data (train statistics only)."""

    mode: str = "none"
    mean: tuple | None = None
    std: tuple | None = None
    zero_rows: tuple = ()

    def to_dict(self) -> dict:
        return {"mode": self.mode, "mean": self.mean and list(self.mean), "std": self.std and list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        mean = d.get("mean")
        std = d.get("std")
        return cls(d["mode"], tuple(mean) if mean else None, tuple(std) if std else None)


@dataclass(frozen=True)
class Dataset:
    """Features are ``(n, d)`` or ``(n, h, w, c)``; labels are class indices or reals.

    ``label_map`` maps raw labels to class indices for classification data.
    """

    features: np.ndarray
    labels: np.ndarray
    task: str = "classification"
    n_classes: int | None = None
    label_map: dict = field(default_factory=dict)
    normalization: Normalization = Normalization()
    provenance: str = ""

    def __post_init__(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ContractError("features and labels disagree on sample count")
        if self.task == "classification":
            k = self.n_classes
            if k is None:
                k = int(self.labels.max()) + 1 if self.labels.size else 0
                object.__setattr__(self, "n_classes", k)
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
                raise ContractError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, features=self.features[idx], labels=self.labels[idx])


# -- LIBSVM ------------------------------------------------------------------

def _parse_label(tok: str):
    v = float(tok)
    return int(v) if v.is_integer() else v


def parse_libsvm(stream: IO[str] | Iterable[str], n_features: int | None = None,
                 task: str = "classification", label_map: dict | None = None,
                 provenance: str = "") -> Dataset:
    """Parse ``<label> <index>:<value> ...`` lines (1-based ascending indices) into dense form.

    Classification labels are remapped to ``0..K-1`` in sorted order of the
    raw values unless ``label_map`` is given (e.g. to reuse a training map).
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    raw_labels = []
    rows = []
    max_index = 0
    for lineno, line in enumerate(stream, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        try:
            raw_labels.append(_parse_label(toks[0]))
        except ValueError:
            raise DataFormatError(f"line {lineno}: bad label {toks[0]!r}") from None
        entries = []
        last = 0
        for tok in toks[1:]:
            idx, sep, val = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                i, v = int(idx), float(val)
            except ValueError:
                raise DataFormatError(f"line {lineno}: malformed entry {tok!r}") from None
            if i <= last:
                raise DataFormatError(f"line {lineno}: indices must be 1-based and ascending")
            last = i
            entries.append((i, v))
        max_index = max(max_index, last)
        rows.append(entries)
    if not rows:
        raise DataFormatError("no samples")
    d = max_index if n_features is None else n_features
    if max_index > d:
        raise DataFormatError(f"index {max_index} exceeds n_features={d}")
    X = np.zeros((len(rows), d))
    for r, entries in enumerate(rows):
        for i, v in entries:
            X[r, i - 1] = v
    if task == "classification":
        if label_map is None:
            label_map = {lab: k for k, lab in enumerate(sorted(set(raw_labels)))}
        try:
            y = np.array([label_map[lab] for lab in raw_labels], dtype=np.int64)
        except KeyError as e:
            raise DataFormatError(f"label {e.args[0]!r} not in label map") from None
        return Dataset(X, y, task, len(label_map), dict(label_map), provenance=f"{provenance} [libsvm]")
    return Dataset(X, np.asarray(raw_labels, dtype=np.float64), "regression",
                   provenance=f"{provenance} [libsvm]")


def load_libsvm(path, **kwargs) -> Dataset:
    with open(path) as f:
        return parse_libsvm(f, provenance=str(path), **kwargs)


def serialize_libsvm(dataset: Dataset) -> str:
    """Inverse of :func:`parse_libsvm` for flat datasets; zeros are omitted."""
    inverse = {v: k for k, v in dataset.label_map.items()}
    lines = []
    X = dataset.features.reshape(len(dataset), -1)
    for x, y in zip(X, dataset.labels):
        lab = inverse.get(int(y), int(y)) if dataset.task == "classification" else float(y)
        parts = [repr(lab) if isinstance(lab, float) else str(lab)]
        parts += [f"{i + 1}:{float(x[i])!r}" for i in np.flatnonzero(x)]
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


# -- IDX ---------------------------------------------------------------------

def _read_exact(stream: IO[bytes], n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"{what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_idx(image_stream: IO[bytes], label_stream: IO[bytes], provenance: str = "") -> Dataset:
    """Read an IDX image/label pair; images become ``(n, h, w, 1)`` scaled by 1/255."""
    magic, n = struct.unpack(">II", _read_exact(image_stream, 8, "image header"))
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"bad image magic {magic:#010x}")
    h, w = struct.unpack(">II", _read_exact(image_stream, 8, "image header"))
    lmagic, ln = struct.unpack(">II", _read_exact(label_stream, 8, "label header"))
    if lmagic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"bad label magic {lmagic:#010x}")
    if ln != n:
        raise DataFormatError(f"image count {n} != label count {ln}")
    pixels = np.frombuffer(_read_exact(image_stream, n * h * w, "image payload"), dtype=np.uint8)
    labels = np.frombuffer(_read_exact(label_stream, n, "label payload"), dtype=np.uint8).astype(np.int64)
    images = pixels.reshape(n, h, w, 1) / 255.0
    k = max(10, int(labels.max()) + 1) if n else 10
    return Dataset(images, labels, "classification", k, {i: i for i in range(k)},
                   Normalization("pixel"), provenance=f"{provenance} [idx]")


def load_idx(image_path, label_path) -> Dataset:
    with open(image_path, "rb") as fi, open(label_path, "rb") as fl:
        return read_idx(fi, fl, provenance=f"{image_path},{label_path}")


def write_idx(dataset: Dataset) -> tuple[bytes, bytes]:
    """Encode ``(n, h, w, 1)`` images in [0, 1] and labels as an IDX pair."""
    n, h, w = dataset.features.shape[:3]
    px = np.rint(dataset.features.reshape(n, h, w) * 255).astype(np.uint8)
    img = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w) + px.tobytes()
    lab = struct.pack(">II", IDX_LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return img, lab


# -- transforms --------------------------------------------------------------

def _balanced_quota(counts: np.ndarray, size: int) -> np.ndarray:
    """Equal share per class; classes too small to fill theirs hand the rest to the others."""
    quota = np.zeros_like(counts)
    left = size
    open_ = list(np.argsort(counts, kind="stable"))
    while open_:
        share, extra = divmod(left, len(open_))
        c = open_[0]
        if counts[c] <= share:
            quota[c] = counts[c]
            left -= counts[c]
            open_.pop(0)
            continue
        # everyone left can take the equal share; the remainder goes in class order
        for k, c in enumerate(sorted(open_)):
            quota[c] = share + (k < extra)
        break
    return quota


def subsample(dataset: Dataset, size: int, seed: int, stratified: bool = True,
              balanced: bool = False) -> Dataset:
    """Seeded subset of ``size`` samples.

    ``stratified`` keeps every class share within one sample of its
    proportion in ``dataset``; adding ``balanced`` draws the same count from
    each class instead (within one sample, as far as class sizes allow).
    """
    n = len(dataset)
    if size > n or size < 0:
        raise ContractError(f"subsample size {size} not in [0, {n}]")
    rng = np.random.default_rng(int(seed))
    if not stratified or dataset.task != "classification":
        return dataset.take(np.sort(rng.choice(n, size, replace=False)))
    classes, counts = np.unique(dataset.labels, return_counts=True)
    if balanced:
        quota = _balanced_quota(counts, size)
    else:
        exact = counts * size / n
        quota = np.floor(exact).astype(np.int64)
        # largest remainders get the leftover slots; ties by class order
        short = size - quota.sum()
        quota[np.argsort(-(exact - quota), kind="stable")[:short]] += 1
    picked = []
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(dataset.labels == c)
        picked.append(rng.choice(idx, q, replace=False))
    return dataset.take(np.sort(np.concatenate(picked)))


def fit_normalization(dataset: Dataset, mode: str) -> Normalization:
    if mode not in NORMALIZATION_MODES:
        raise ContractError(f"unknown normalization mode {mode!r}")
    if mode == "standardize":
        X = dataset.features.reshape(len(dataset), -1)
        std = np.maximum(X.std(axis=0), STD_FLOOR)
        return Normalization(mode, tuple(X.mean(axis=0)), tuple(std))
    return Normalization(mode)


def apply_normalization(dataset: Dataset, norm: Normalization) -> Dataset:
    """Apply a fitted transform. ``pixel`` assumes raw 0..255 values unless already scaled."""
    X = dataset.features.astype(np.float64)
    shape = X.shape
    flat = X.reshape(shape[0], -1)
    zero_rows = ()
    if norm.mode == "unit_norm":
        nrm = np.linalg.norm(flat, axis=1)
        zero = nrm == 0
        zero_rows = tuple(int(i) for i in np.flatnonzero(zero))
        flat = flat / np.where(zero, 1.0, nrm)[:, None]
    elif norm.mode == "standardize":
        flat = (flat - np.asarray(norm.mean)) / np.asarray(norm.std)
    elif norm.mode == "pixel":
        if dataset.normalization.mode != "pixel":
            flat = flat / 255.0
    elif norm.mode != "none":
        raise ContractError(f"unknown normalization mode {norm.mode!r}")
    return replace(dataset, features=flat.reshape(shape), normalization=replace(norm, zero_rows=zero_rows))


def normalize(dataset: Dataset, mode: str) -> Dataset:
    """Fit ``mode`` on this dataset and apply it; replay on test data with :func:`apply_normalization`."""
    return apply_normalization(dataset, fit_normalization(dataset, mode))
