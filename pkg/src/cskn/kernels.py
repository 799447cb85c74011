"""Closed-form spectral kernels under Gaussian spectral densities.

Every function here is pure and works in float64. The closed forms follow
from the Gaussian characteristic function: if ``w ~ N(0, s^2 I)`` then
``E cos(w^T t) = exp(-s^2 |t|^2 / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class ThresholdUndefinedError(ContractError):
    """The variance threshold needs ``2 * kappa - 1 > 0``."""


@dataclass(frozen=True)
class GaussianSpectralDensity:
    """Isotropic Gaussian density over each frequency of a pair."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0 or not math.isfinite(self.sigma):
            raise ContractError(f"sigma must be positive and finite, got {self.sigma}")

    @property
    def variance(self) -> float:
        return self.sigma * self.sigma


@dataclass(frozen=True)
class DiagonalTrace:
    """Kernel diagonal per layer, ``per_layer[0]`` being the input squared norm."""

    per_layer: tuple[float, ...]
    sigmas: tuple[float, ...]

    def __post_init__(self):
        if len(self.per_layer) != len(self.sigmas) + 1:
            raise ContractError("per_layer must have exactly one more entry than sigmas")

    def is_strictly_decreasing(self) -> bool:
        v = self.per_layer
        return all(b < a for a, b in zip(v, v[1:]))


@dataclass(frozen=True)
class BoundReport:
    """Rademacher complexity bound for a trained linear readout.

    ``rademacher_bound`` is the data-dependent complexity bound
    ``(|W|_* / n) sqrt(K trace)``; ``excess_risk_term`` multiplies it by
    ``4 sqrt(2) L`` for an L-Lipschitz loss.
    """

    trace_sum: float
    nuclear_norm_W: float
    n: int
    K: int
    lipschitz_constant: float = 1.0
    rademacher_bound: float = field(init=False)
    excess_risk_term: float = field(init=False)

    def __post_init__(self):
        if not self.lipschitz_constant > 0:
            raise ContractError("lipschitz_constant must be positive")
        r = rademacher_bound(self.nuclear_norm_W, self.n, self.K, self.trace_sum)
        object.__setattr__(self, "rademacher_bound", r)
        object.__setattr__(self, "excess_risk_term", 4.0 * math.sqrt(2.0) * self.lipschitz_constant * r)


def _pair(x, x_prime) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    x_prime = np.asarray(x_prime, dtype=np.float64)
    if x.shape != x_prime.shape:
        raise ContractError(f"dimension mismatch: {x.shape} vs {x_prime.shape}")
    return x.ravel(), x_prime.ravel()


def stationary_kernel(x, x_prime, density: GaussianSpectralDensity) -> float:
    """Gaussian (shift-invariant) kernel ``exp(-sigma^2 |x - x'|^2 / 2)``."""
    x, x_prime = _pair(x, x_prime)
    tau = x - x_prime
    return math.exp(-0.5 * density.variance * float(tau @ tau))


def nonstationary_kernel(x, x_prime, density: GaussianSpectralDensity) -> float:
    """Symmetrized non-stationary kernel with independent Gaussian frequency pairs.

    The two cross terms contribute ``exp(-sigma^2 (|x|^2 + |x'|^2) / 2)`` each
    and the two diagonal terms ``exp(-sigma^2 |x - x'|^2 / 2)`` each; the
    kernel is the average of the four.
    """
    x, x_prime = _pair(x, x_prime)
    s2 = density.variance
    tau = x - x_prime
    cross = math.exp(-0.5 * s2 * (float(x @ x) + float(x_prime @ x_prime)))
    diag = math.exp(-0.5 * s2 * float(tau @ tau))
    return 0.5 * (cross + diag)


def nonstationary_diagonal(sq_norm: float, density: GaussianSpectralDensity) -> float:
    """``kappa(x, x) = (exp(-sigma^2 x^T x) + 1) / 2``."""
    if sq_norm < 0:
        raise ContractError(f"sq_norm must be nonnegative, got {sq_norm}")
    return 0.5 * (math.exp(-density.variance * sq_norm) + 1.0)


def diagonal_recursion(kappa_0: float, sigmas: Sequence[float]) -> DiagonalTrace:
    """Propagate the kernel diagonal through stacked non-stationary layers.

    ``sigmas`` are standard deviations; a zero entry is accepted and leaves
    the next diagonal at exactly 1.
    """
    if not kappa_0 > 0:
        raise ContractError(f"kappa_0 must be positive, got {kappa_0}")
    values = [float(kappa_0)]
    for s in sigmas:
        if s < 0:
            raise ContractError(f"sigma must be nonnegative, got {s}")
        values.append(0.5 * (math.exp(-(s * s) * values[-1]) + 1.0))
    return DiagonalTrace(tuple(values), tuple(float(s) for s in sigmas))


def min_variance_threshold(kappa_prev: float) -> float:
    """Smallest layer variance that keeps the next diagonal from growing.

    At exactly this variance the recursion has ``kappa_prev`` as a fixed
    point; any larger variance makes the diagonal shrink.
    """
    if not kappa_prev > 0.5:
        raise ThresholdUndefinedError(
            f"threshold undefined for kappa_prev={kappa_prev} (needs kappa_prev > 1/2)"
        )
    # -0.0 for kappa_prev == 1
    return max(-math.log(2.0 * kappa_prev - 1.0) / kappa_prev, 0.0)


def rademacher_bound(nuclear_norm_W: float, n: int, K: int, trace_sum: float) -> float:
    """``(B / n) * sqrt(K * trace)`` with ``B`` the nuclear norm of the readout."""
    if n <= 0:
        raise ContractError("n must be positive")
    if K < 1:
        raise ContractError("K must be at least 1")
    if trace_sum < 0 or nuclear_norm_W < 0:
        raise ContractError("trace_sum and nuclear_norm_W must be nonnegative")
    return (nuclear_norm_W / n) * math.sqrt(K * trace_sum)


def hoeffding_bound(feature_count: int, eta: float) -> float:
    """Deviation ``sqrt(2/D log(2/eta))`` exceeded with probability at most ``eta``."""
    if feature_count < 1:
        raise ContractError("feature_count must be >= 1")
    if not 0.0 < eta < 1.0:
        raise ContractError(f"eta must lie in (0, 1), got {eta}")
    return math.sqrt(2.0 / feature_count * math.log(2.0 / eta))
