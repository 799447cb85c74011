"""Monte Carlo checks of the kernel theory and a finite-difference gradient checker."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import features as fm
from . import kernels as kn
from . import training as tr
from .features import DenseLayerParams, DenseSpec, InitSchedule, NetworkArchitecture, Variant
from .kernels import ContractError, GaussianSpectralDensity

DEFAULT_PROBES = 100
DEFAULT_MARGIN = 0.5
FALLBACK_VARIANCE = 1.0


@dataclass(frozen=True)
class MCEstimate:
    value: float
    feature_count: int
    trials: int
    std_error: float


def _draw_pair_layer(rng: np.random.Generator, d: int, D: int, sigma: float) -> DenseLayerParams:
    return DenseLayerParams(rng.normal(0.0, sigma, (d, D)), rng.normal(0.0, sigma, (d, D)),
                            rng.uniform(0.0, fm.TWO_PI, D))


def mc_kernel_estimate(x, x_prime, density: GaussianSpectralDensity, D: int, trials: int,
                       seed: int = 0) -> MCEstimate:
    """Average of ``<psi(x), psi(x')>`` over ``trials`` fresh paired-frequency draws."""
    if D < 1 or trials < 1:
        raise ContractError("D and trials must be >= 1")
    x = np.asarray(x, dtype=np.float64).ravel()
    x_prime = np.asarray(x_prime, dtype=np.float64).ravel()
    if x.shape != x_prime.shape:
        raise ContractError("dimension mismatch")
    rng = np.random.default_rng(seed)
    vals = np.empty(trials)
    for t in range(trials):
        p = _draw_pair_layer(rng, x.size, D, density.sigma)
        vals[t] = fm.rff_nonstationary(x, p) @ fm.rff_nonstationary(x_prime, p)
    se = float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return MCEstimate(float(vals.mean()), D, trials, se)


def schedule_from_thresholds(kappa_0: float, depth: int, margin: float = DEFAULT_MARGIN,
                             fallback_variance: float = FALLBACK_VARIANCE) -> tuple[float, ...]:
    """Per-layer sigmas with ``sigma_l^2 = threshold(kappa_{l-1}) + margin``.

    When ``kappa_0 <= 1/2`` the first threshold is undefined and layer 1 uses
    ``fallback_variance``; every later diagonal lies in (1/2, 1].
    """
    if not kappa_0 > 0:
        raise ContractError("kappa_0 must be positive")
    if margin < 0 or depth < 0:
        raise ContractError("margin and depth must be nonnegative")
    kappa = float(kappa_0)
    sigmas = []
    for _ in range(depth):
        try:
            var = kn.min_variance_threshold(kappa) + margin
        except kn.ThresholdUndefinedError:
            var = fallback_variance
        sigmas.append(math.sqrt(var))
        kappa = kn.diagonal_recursion(kappa, [sigmas[-1]]).per_layer[-1]
    return tuple(sigmas)


@dataclass
class DecayReport:
    per_layer_mean_diagonal: list
    closed_form_trace: kn.DiagonalTrace
    sigmas_used: tuple
    violations: int
    tolerances: list = field(default_factory=list)
    per_sample: np.ndarray | None = None
    layer_violations: list = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for l, (emp, cf) in enumerate(zip(self.per_layer_mean_diagonal, self.closed_form_trace.per_layer)):
            out.append({
                "layer": l,
                "sigma": self.sigmas_used[l - 1] if l else "",
                "closed_form": cf,
                "empirical_mean": emp,
                "tolerance": self.tolerances[l - 1] if l else "",
                "violations": int(self.layer_violations[l - 1]) if l else 0,
            })
        return out


def decay_report(widths: Sequence[int], sigmas: Sequence[float], probe_set, seed: int = 0,
                 eta: float = 0.01) -> DecayReport:
    """Empirical vs closed-form kernel diagonals through a dense paired-frequency stack.

    A violation is a (probe, layer) pair whose estimated diagonal exceeds the
    previous layer's by more than ``3 * hoeffding_bound(width, eta)``.
    """
    probes = np.asarray(probe_set, dtype=np.float64)
    if probes.ndim != 2 or probes.shape[0] == 0:
        raise ContractError("probe_set must be a nonempty (n, d) array")
    if len(widths) != len(sigmas):
        raise ContractError("one sigma per layer required")
    arch = NetworkArchitecture((probes.shape[1],), tuple(DenseSpec(w) for w in widths), Variant.DSKN, 1)
    params = fm.initialize(arch, InitSchedule(tuple(sigmas), seed))
    maps = fm.stacked_features(probes, params)
    diag = np.stack([(m * m).sum(axis=1) for m in maps], axis=1)  # (n, L+1)
    tols = [3.0 * kn.hoeffding_bound(w, eta) for w in widths]
    layer_viol = [int((diag[:, l + 1] > diag[:, l] + tols[l]).sum()) for l in range(len(widths))]
    closed = kn.diagonal_recursion(float(diag[:, 0].mean()), sigmas)
    return DecayReport(list(diag.mean(axis=0)), closed, tuple(float(s) for s in sigmas),
                       sum(layer_viol), tols, diag, layer_viol)


@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple
    checked: int
    excluded: int = 0

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_error <= tol


def _set_tensor(state: tr.ModelState, key, value: np.ndarray) -> None:
    if key == "W":
        state.W = value
        return
    i, name = key
    p = state.layer_params[i]
    setattr(p, name, value)
    if p.tied:
        setattr(p, name + "_prime", value.copy())


def _relu_signs(state: tr.ModelState, batch) -> list:
    _, cache = tr.forward(state, batch)
    return [entry[2] > 0 for entry in cache.layers]


def gradient_check(state: tr.ModelState, batch, labels, config: tr.TrainConfig, epsilon: float = 1e-5,
                   n_total: int | None = None, corrupt: tuple | None = None) -> GradCheckResult:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|a - f| / max(1, |a|, |f|)``. ``corrupt``
    is ``(key, flat_index, delta)`` and adds ``delta`` to one analytic
    coordinate. For relu networks, exact-zero inputs are nudged and any
    coordinate whose perturbation flips an activation pattern is skipped.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractError("epsilon must lie in [1e-7, 1e-3]")
    relu = state.arch.variant is Variant.CNN_RELU
    batch = np.asarray(batch, dtype=np.float64)
    if relu:
        batch = np.where(batch == 0.0, 1e-3, batch)
    _, cache = tr.forward(state, batch)
    cfg = replace(config, freeze_features=False)
    grads = tr.backward(state, batch, labels, cache, cfg, n_total)
    analytic = dict(grads.grad_layers)
    analytic["W"] = grads.grad_W
    if corrupt is not None:
        key, idx, delta = corrupt
        g = analytic[key].copy()
        g.flat[idx] += delta
        analytic[key] = g
    base_signs = _relu_signs(state, batch) if relu else None

    def f():
        return tr.objective(state, batch, labels, cfg, n_total)

    worst = (None, None)
    max_err = 0.0
    checked = excluded = 0
    for key, g in analytic.items():
        orig = state.W if key == "W" else getattr(state.layer_params[key[0]], key[1])
        for j in range(orig.size):
            values = []
            flipped = False
            for sgn in (1.0, -1.0):
                t = orig.copy()
                t.flat[j] += sgn * epsilon
                _set_tensor(state, key, t)
                values.append(f())
                if relu and not flipped:
                    flipped = any(np.any(a != b) for a, b in zip(_relu_signs(state, batch), base_signs))
            _set_tensor(state, key, orig)
            if flipped:
                excluded += 1
                continue
            num = (values[0] - values[1]) / (2.0 * epsilon)
            a = float(g.flat[j])
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            checked += 1
            if err > max_err:
                max_err, worst = err, (key, j)
    return GradCheckResult(max_err, worst, checked, excluded)


@dataclass
class EnvelopeResult:
    violation_fraction: float
    bound: float
    deviations: np.ndarray


def hoeffding_envelope_test(density: GaussianSpectralDensity, D: int, eta: float, trials: int,
                            seed: int = 0, dim: int = 3) -> EnvelopeResult:
    """Fraction of fresh (x, x', features) draws whose kernel error exceeds the Hoeffding bound.

    Inputs are drawn ``N(0, I / dim)`` so their norms concentrate near one.
    """
    if trials < 100:
        raise ContractError("hoeffding_envelope_test needs at least 100 trials")
    bound = kn.hoeffding_bound(D, eta)
    rng = np.random.default_rng(seed)
    dev = np.empty(trials)
    scale = 1.0 / math.sqrt(dim)
    for t in range(trials):
        x = rng.normal(0.0, scale, dim)
        xp = rng.normal(0.0, scale, dim)
        p = _draw_pair_layer(rng, dim, D, density.sigma)
        est = fm.rff_nonstationary(x, p) @ fm.rff_nonstationary(xp, p)
        dev[t] = abs(est - kn.nonstationary_kernel(x, xp, density))
    return EnvelopeResult(float((dev > bound).mean()), bound, dev)


def empirical_trace(state: tr.ModelState, X) -> float:
    """``sum_i |Phi_L(x_i)|^2`` through the reference feature maps, one sample at a time."""
    X = np.asarray(X, dtype=np.float64)
    total = 0.0
    for x in X:
        phi = fm.feature_map(state.layer_params, x[None])
        total += float(phi.ravel() @ phi.ravel())
    return total


def bound_report(state: tr.ModelState, X, lipschitz_constant: float = 1.0) -> kn.BoundReport:
    trace = empirical_trace(state, X)
    return kn.BoundReport(trace, tr.nuclear_norm(state.W), X.shape[0], state.arch.output_dim,
                          lipschitz_constant)


def write_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
