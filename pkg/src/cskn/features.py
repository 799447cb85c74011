"""Random Fourier feature maps: stationary, paired-frequency, stacked and convolutional.

Tensor layout inside the network is channel-major: a spatial feature map is
``(channels, height, width)`` and a batch is ``(n, channels, height, width)``.
Flattening follows the same order (channel, then row, then column).

A paired-frequency unit of width ``D`` computes

    (cos(W^T x + b) + cos(W'^T x + b)) / sqrt(2 D)

with one phase ``b`` shared inside each pair. Sharing the phase is what makes
the feature inner product an unbiased estimate of all four cosine terms of the
symmetrized non-stationary kernel; with independent phases the cross terms
average out. Tying ``W' = W`` gives the stationary map ``sqrt(2/D) cos(W^T x + b)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kernels import ContractError

TWO_PI = 2.0 * math.pi


class Variant(str, enum.Enum):
    CSKN = "CSKN"
    CDSK = "CDSK"
    CRFF = "CRFF"
    DSKN = "DSKN"
    CNN_RELU = "CNN_RELU"

    @property
    def activation(self) -> str:
        return "relu" if self is Variant.CNN_RELU else "cosine"

    @property
    def tied(self) -> bool:
        return self is Variant.CRFF


@dataclass(frozen=True)
class DenseSpec:
    width: int

    def __post_init__(self):
        if self.width < 1:
            raise ContractError("dense width must be >= 1")


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    filter_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "filter_size", tuple(int(k) for k in self.filter_size))
        if self.out_channels < 1 or len(self.filter_size) != 2 or min(self.filter_size) < 1:
            raise ContractError(f"bad conv spec {self}")


LayerSpec = Union[DenseSpec, ConvSpec]


@dataclass(frozen=True)
class NetworkArchitecture:
    """Layer stack: zero or more conv layers, then zero or more dense layers.

    ``input_shape`` is ``(height, width, channels)`` for image inputs or
    ``(d0,)`` for flat inputs. Conv layers use stride 1 and valid padding.
    """

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]
    variant: Variant
    output_dim: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.layers:
            raise ContractError("architecture needs at least one layer")
        if self.output_dim < 1:
            raise ContractError("output_dim must be >= 1")
        if len(self.input_shape) not in (1, 3) or min(self.input_shape) < 1:
            raise ContractError(f"input_shape must be (d0,) or (h, w, c), got {self.input_shape}")
        seen_dense = False
        for spec in self.layers:
            if isinstance(spec, DenseSpec):
                seen_dense = True
            elif isinstance(spec, ConvSpec):
                if seen_dense:
                    raise ContractError("conv layers must precede dense layers")
                if len(self.input_shape) != 3:
                    raise ContractError("conv layers require a spatial input shape (h, w, c)")
            else:
                raise ContractError(f"unknown layer spec {spec!r}")
        if self.variant is Variant.DSKN and self.n_conv:
            raise ContractError("DSKN has no conv layers")
        # raises on filters that do not fit
        self.layer_shapes()

    @property
    def n_conv(self) -> int:
        return sum(isinstance(s, ConvSpec) for s in self.layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def is_spatial(self) -> bool:
        return len(self.input_shape) == 3

    @property
    def network_input_shape(self) -> tuple[int, ...]:
        """Input shape in network layout: ``(c, h, w)`` or ``(d0,)``."""
        if self.is_spatial and self.n_conv:
            h, w, c = self.input_shape
            return (c, h, w)
        return (int(np.prod(self.input_shape)),)

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of each layer, network layout, without batch axis."""
        shape = self.network_input_shape
        shapes = []
        for spec in self.layers:
            if isinstance(spec, ConvSpec):
                c, h, w = shape
                kh, kw = spec.filter_size
                if kh > h or kw > w:
                    raise ContractError(f"filter {spec.filter_size} larger than spatial extent {(h, w)}")
                shape = (spec.out_channels, h - kh + 1, w - kw + 1)
            else:
                shape = (spec.width,)
            shapes.append(shape)
        return shapes

    def layer_input_dims(self) -> list[int]:
        """Fan-in of each layer (channels for conv, flat width for dense)."""
        dims = []
        shape = self.network_input_shape
        for spec, out in zip(self.layers, self.layer_shapes()):
            dims.append(shape[0] if isinstance(spec, ConvSpec) else int(np.prod(shape)))
            shape = out
        return dims

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.layer_shapes()[-1]))


@dataclass(frozen=True)
class InitSchedule:
    sigmas: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if any(not s > 0 for s in self.sigmas):
            raise ContractError(f"all sigmas must be positive, got {self.sigmas}")
        if not 0 <= int(self.seed) < 2**64:
            raise ContractError("seed must be a 64-bit unsigned integer")


@dataclass
class DenseLayerParams:
    """Frequencies are ``(d_in, d_out)``; ``omega_prime`` is None for relu layers."""

    omega: np.ndarray
    omega_prime: np.ndarray | None
    phase: np.ndarray
    activation: str = "cosine"
    tied: bool = False

    def __post_init__(self):
        if self.omega.ndim != 2:
            raise ContractError("omega must be a matrix")
        if self.omega_prime is not None and self.omega_prime.shape != self.omega.shape:
            raise ContractError("omega and omega_prime must share shape")
        if self.phase.shape != (self.omega.shape[1],):
            raise ContractError("phase length must equal layer width")

    @property
    def width(self) -> int:
        return self.omega.shape[1]

    @property
    def fan_in(self) -> int:
        return self.omega.shape[0]


@dataclass
class ConvLayerParams:
    """Filter banks are ``(c_in, c_out, kh, kw)``; one phase per output channel."""

    filters: np.ndarray
    filters_prime: np.ndarray | None
    phase: np.ndarray
    activation: str = "cosine"
    tied: bool = False

    def __post_init__(self):
        if self.filters.ndim != 4:
            raise ContractError("filters must be a 4-index array")
        if self.filters_prime is not None and self.filters_prime.shape != self.filters.shape:
            raise ContractError("filters and filters_prime must share shape")
        if self.phase.shape != (self.filters.shape[1],):
            raise ContractError("phase length must equal out_channels")

    @property
    def in_channels(self) -> int:
        return self.filters.shape[0]

    @property
    def out_channels(self) -> int:
        return self.filters.shape[1]

    @property
    def filter_size(self) -> tuple[int, int]:
        return self.filters.shape[2], self.filters.shape[3]

    @property
    def width(self) -> int:
        return self.out_channels


LayerParams = Union[DenseLayerParams, ConvLayerParams]


def trainable_names(p: LayerParams) -> tuple[str, ...]:
    """Tensors updated by training; phases are frozen, tied banks share one tensor."""
    first = "omega" if isinstance(p, DenseLayerParams) else "filters"
    if p.activation == "relu" or p.tied:
        return (first,)
    return (first, first + "_prime")


def param_count(params: Sequence[LayerParams]) -> int:
    return sum(
        getattr(p, n).size for p in params for n in trainable_names(p)
    ) + sum(p.phase.size for p in params)


def initialize(arch: NetworkArchitecture, schedule: InitSchedule) -> list[LayerParams]:
    """Draw every frequency i.i.d. ``N(0, sigma_l^2)`` and phases uniform on [0, 2 pi).

    Draw order per layer: first bank, second bank, phases. A tied (CRFF)
    second bank is a copy of the first; relu layers have no second bank and
    zero bias.
    """
    if len(schedule.sigmas) != arch.depth:
        raise ContractError(f"schedule has {len(schedule.sigmas)} sigmas for {arch.depth} layers")
    rng = np.random.default_rng(int(schedule.seed))
    act = arch.variant.activation
    tied = arch.variant.tied
    out = []
    for spec, fan_in, sigma in zip(arch.layers, arch.layer_input_dims(), schedule.sigmas):
        if isinstance(spec, ConvSpec):
            shape = (fan_in, spec.out_channels, *spec.filter_size)
            width = spec.out_channels
        else:
            shape = (fan_in, spec.width)
            width = spec.width
        w = rng.normal(0.0, sigma, size=shape)
        if act == "relu":
            w_prime = None
            phase = np.zeros(width)
        else:
            w_prime = w.copy() if tied else rng.normal(0.0, sigma, size=shape)
            phase = rng.uniform(0.0, TWO_PI, size=width)
        cls = ConvLayerParams if isinstance(spec, ConvSpec) else DenseLayerParams
        out.append(cls(w, w_prime, phase, activation=act, tied=tied))
    return out


def _as_flat(x, params: DenseLayerParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.fan_in:
        raise ContractError(f"input dimension {x.shape[-1]} != layer fan-in {params.fan_in}")
    return x


def rff_stationary(x, params: DenseLayerParams) -> np.ndarray:
    """``sqrt(2/D) cos(Omega^T x + b)``; accepts a vector or a batch of rows."""
    x = _as_flat(x, params)
    D = params.width
    return math.sqrt(2.0 / D) * np.cos(x @ params.omega + params.phase)


def rff_nonstationary(x, params: DenseLayerParams) -> np.ndarray:
    """Paired-frequency features ``(cos(Omega^T x + b) + cos(Omega'^T x + b)) / sqrt(2D)``."""
    x = _as_flat(x, params)
    D = params.width
    omega_prime = params.omega if params.omega_prime is None else params.omega_prime
    return (np.cos(x @ params.omega + params.phase) + np.cos(x @ omega_prime + params.phase)) / math.sqrt(2.0 * D)


def _relu_dense(x, params: DenseLayerParams) -> np.ndarray:
    x = _as_flat(x, params)
    return math.sqrt(2.0 / params.width) * np.maximum(x @ params.omega + params.phase, 0.0)


def dense_layer(x, params: DenseLayerParams) -> np.ndarray:
    if params.activation == "relu":
        return _relu_dense(x, params)
    return rff_nonstationary(x, params)


def stacked_features(x, params: Sequence[DenseLayerParams]) -> list[np.ndarray]:
    """All intermediate maps ``[Psi_0(x), Psi_1(x), ..., Psi_L(x)]``."""
    out = [np.asarray(x, dtype=np.float64)]
    for p in params:
        out.append(dense_layer(out[-1], p))
    return out


def stacked_forward(x, params: Sequence[DenseLayerParams]) -> np.ndarray:
    """``Psi_L(x)`` for a stack of dense layers, ``Psi_0(x) = x``."""
    return stacked_features(x, params)[-1]


def _correlate(x: np.ndarray, filters: np.ndarray) -> np.ndarray:
    # x: (..., c_in, H, W); filters: (c_in, c_out, kh, kw) -> (..., c_out, H-kh+1, W-kw+1)
    kh, kw = filters.shape[2:]
    patches = sliding_window_view(x, (kh, kw), axis=(-2, -1))
    return np.einsum("...ipqab,ijab->...jpq", patches, filters)


def conv_layer(x, params: ConvLayerParams) -> np.ndarray:
    """One valid, stride-1 convolutional feature layer on ``(..., c, h, w)`` input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3 or x.shape[-3] != params.in_channels:
        raise ContractError(f"expected (..., {params.in_channels}, h, w) input, got {x.shape}")
    kh, kw = params.filter_size
    if kh > x.shape[-2] or kw > x.shape[-1]:
        raise ContractError(f"filter {(kh, kw)} larger than spatial extent {x.shape[-2:]}")
    b = params.phase[:, None, None]
    c = params.out_channels
    z = _correlate(x, params.filters) + b
    if params.activation == "relu":
        return math.sqrt(2.0 / c) * np.maximum(z, 0.0)
    fp = params.filters if params.filters_prime is None else params.filters_prime
    z_prime = _correlate(x, fp) + b
    return (np.cos(z) + np.cos(z_prime)) / math.sqrt(2.0 * c)


def conv_forward(x, params: Sequence[ConvLayerParams]) -> np.ndarray:
    """``Phi_L(x)`` for a stack of conv layers, ``Phi_0(x) = x``."""
    for p in params:
        x = conv_layer(x, p)
    return np.asarray(x, dtype=np.float64)


def flatten_features(tensor) -> np.ndarray:
    """Row-major flatten of a ``(c, h, w)`` map: channel, then row, then column."""
    return np.asarray(tensor).reshape(-1)


def unflatten_features(vector, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(vector).reshape(shape)


def to_network_input(arch: NetworkArchitecture, X) -> np.ndarray:
    """Convert a batch from dataset layout (``(n, h, w, c)`` or ``(n, d)``) to network layout."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if arch.is_spatial:
        if X.shape[1:] == tuple(arch.input_shape):
            X = X.transpose(0, 3, 1, 2)
        elif X.ndim == 2 and X.shape[1] == int(np.prod(arch.input_shape)):
            X = X.reshape(n, *arch.input_shape).transpose(0, 3, 1, 2)
        else:
            raise ContractError(f"batch shape {X.shape[1:]} does not match input shape {arch.input_shape}")
        if not arch.n_conv:
            X = X.reshape(n, -1)
        return np.ascontiguousarray(X)
    if X.ndim != 2 or X.shape[1] != arch.input_shape[0]:
        raise ContractError(f"batch shape {X.shape[1:]} does not match input shape {arch.input_shape}")
    return X


def feature_map(params: Sequence[LayerParams], x) -> np.ndarray:
    """Final flattened features for a batch in network layout, shape ``(n, d_L)``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    for p in params:
        if isinstance(p, ConvLayerParams):
            x = conv_layer(x, p)
        else:
            x = dense_layer(x.reshape(n, -1), p)
    return x.reshape(n, -1)
