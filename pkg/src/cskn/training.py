"""End-to-end training of spectral kernel networks.

The objective is

    mean loss + lambda1 * |W|_* + lambda2 * sum_i |Phi_L(x_i)|^2

Gradients of the smooth part are computed by hand (batched im2col for conv
layers). Hidden-layer frequencies are updated with Adam; the readout ``W`` takes
a plain gradient step followed by exact singular value thresholding, which is
the proximal map of the nuclear norm. Phases never move.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import features as fm
from .features import ConvLayerParams, DenseLayerParams, NetworkArchitecture, InitSchedule, Variant
from .kernels import ContractError, rademacher_bound

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_LIMIT = 1e10
LOSS_KINDS = ("softmax_cross_entropy", "squared_error")


class TrainingDiverged(RuntimeError):
    pass


class StaleCacheError(ContractError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    learning_rate: float = 0.05
    # Adam step for hidden layers; None reuses learning_rate
    adam_learning_rate: float | None = None
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    loss_kind: str = "softmax_cross_entropy"
    freeze_features: bool = False
    dtype: str = "float64"
    eval_every: int = 1
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("lambdas must be nonnegative")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.adam_learning_rate is not None and not self.adam_learning_rate > 0:
            raise ContractError("adam_learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1 or self.eval_batch_size < 1:
            raise ContractError("batch_size, epochs, eval_every, eval_batch_size must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.dtype not in ("float64", "float32"):
            raise ContractError("dtype must be float64 or float32")

    @property
    def hidden_lr(self) -> float:
        return self.learning_rate if self.adam_learning_rate is None else self.adam_learning_rate


@dataclass
class ModelState:
    arch: NetworkArchitecture
    layer_params: list
    W: np.ndarray
    adam_moments: dict = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if self.W.shape != (self.arch.feature_dim, self.arch.output_dim):
            raise ContractError(f"W shape {self.W.shape} != {(self.arch.feature_dim, self.arch.output_dim)}")
        if len(self.layer_params) != self.arch.depth:
            raise ContractError("one parameter set per layer required")

    @classmethod
    def fresh(cls, arch: NetworkArchitecture, schedule: InitSchedule) -> "ModelState":
        params = fm.initialize(arch, schedule)
        return cls(arch, params, np.zeros((arch.feature_dim, arch.output_dim)))

    def trainable(self) -> Iterable[tuple[tuple[int, str], np.ndarray]]:
        for i, p in enumerate(self.layer_params):
            for name in fm.trainable_names(p):
                yield (i, name), getattr(p, name)


@dataclass
class GradientSet:
    grad_W: np.ndarray
    grad_layers: dict

    def flat(self) -> np.ndarray:
        parts = [g.ravel() for _, g in sorted(self.grad_layers.items())]
        return np.concatenate(parts + [self.grad_W.ravel()])


@dataclass
class ForwardCache:
    step_count: int
    layers: list
    phi: np.ndarray


# -- layer kernels -----------------------------------------------------------

def _banks(p) -> np.ndarray:
    """First-bank (and second-bank) weights as one ``(fan_in_patch, width * banks)`` matrix."""
    if isinstance(p, ConvLayerParams):
        c_in, c_out, kh, kw = p.filters.shape
        mats = [p.filters.transpose(0, 2, 3, 1).reshape(c_in * kh * kw, c_out)]
        if p.activation == "cosine":
            fp = p.filters if p.filters_prime is None else p.filters_prime
            mats.append(fp.transpose(0, 2, 3, 1).reshape(c_in * kh * kw, c_out))
    else:
        mats = [p.omega]
        if p.activation == "cosine":
            mats.append(p.omega if p.omega_prime is None else p.omega_prime)
    return np.concatenate(mats, axis=1) if len(mats) > 1 else mats[0]


def _im2col(A: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, c, H, Wd = A.shape
    cols = sliding_window_view(A, (kh, kw), axis=(2, 3))  # n c Ho Wo kh kw
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, H - kh + 1, Wd - kw + 1, c * kh * kw)


def _activate(Z: np.ndarray, p, width: int) -> np.ndarray:
    if p.activation == "relu":
        return math.sqrt(2.0 / width) * np.maximum(Z, 0.0)
    return (np.cos(Z[..., :width]) + np.cos(Z[..., width:])) / math.sqrt(2.0 * width)


def _activate_grad(Z: np.ndarray, p, width: int, dout: np.ndarray) -> np.ndarray:
    if p.activation == "relu":
        return math.sqrt(2.0 / width) * (Z > 0) * dout
    s = -1.0 / math.sqrt(2.0 * width)
    return s * np.sin(Z) * np.concatenate([dout, dout], axis=-1)


def _layer_forward(A: np.ndarray, p):
    """Returns ``(output, cache_entry)``; conv output is ``(n, c, h, w)``."""
    M = _banks(p)
    n = A.shape[0]
    width = p.width
    nb = M.shape[1] // width
    bias = np.tile(p.phase, nb).astype(A.dtype, copy=False)
    if isinstance(p, ConvLayerParams):
        kh, kw = p.filter_size
        X = _im2col(A, kh, kw)
        Z = X @ M + bias
        out = _activate(Z, p, width).transpose(0, 3, 1, 2)
    else:
        X = A.reshape(n, -1)
        Z = X @ M + bias
        out = _activate(Z, p, width)
    return out, (A.shape, X, Z, M)


def _layer_backward(p, entry, dout: np.ndarray, need_input_grad: bool):
    in_shape, X, Z, M = entry
    width = p.width
    if isinstance(p, ConvLayerParams):
        dout = dout.transpose(0, 2, 3, 1)
    dZ = _activate_grad(Z, p, width, dout)
    K = X.shape[-1]
    dM = X.reshape(-1, K).T @ dZ.reshape(-1, dZ.shape[-1])
    grads = {}
    if isinstance(p, ConvLayerParams):
        c_in, c_out, kh, kw = p.filters.shape
        to_filter = lambda g: g.reshape(c_in, kh, kw, c_out).transpose(0, 3, 1, 2)
        g0 = to_filter(dM[:, :width])
        g1 = to_filter(dM[:, width:]) if p.activation == "cosine" else None
        first = "filters"
    else:
        g0 = dM[:, :width]
        g1 = dM[:, width:] if p.activation == "cosine" else None
        first = "omega"
    if p.activation == "relu":
        grads[first] = g0
    elif p.tied:
        grads[first] = g0 + g1
    else:
        grads[first] = g0
        grads[first + "_prime"] = g1
    if not need_input_grad:
        return grads, None
    dX = dZ @ M.T
    if isinstance(p, ConvLayerParams):
        n, c, H, Wd = in_shape
        kh, kw = p.filter_size
        Ho, Wo = H - kh + 1, Wd - kw + 1
        dX = dX.reshape(n, Ho, Wo, c, kh, kw)
        dA = np.zeros(in_shape, dtype=dX.dtype)
        for a in range(kh):
            for b in range(kw):
                dA[:, :, a:a + Ho, b:b + Wo] += dX[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        return grads, dA
    return grads, dX.reshape(in_shape)


# -- public operations -------------------------------------------------------

def forward(state: ModelState, batch: np.ndarray, cache: bool = True):
    """Predictions ``W^T Phi_L(x)`` for a batch in network layout.

    Returns ``(predictions, ForwardCache)``; with ``cache=False`` the cache is None.
    """
    A = batch
    expected = state.arch.network_input_shape
    if A.shape[1:] != expected:
        raise ContractError(f"batch shape {A.shape[1:]} != network input shape {expected}")
    entries = []
    for p in state.layer_params:
        A, entry = _layer_forward(A, p)
        if cache:
            entries.append(entry)
    phi = A.reshape(A.shape[0], -1)
    pred = phi @ state.W
    return pred, (ForwardCache(state.step_count, entries, phi) if cache else None)


def predict(state: ModelState, batch: np.ndarray) -> np.ndarray:
    return forward(state, batch, cache=False)[0]


def _targets(labels, K: int, loss_kind: str, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if loss_kind == "softmax_cross_entropy":
        if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
            raise ContractError("classification labels must be an integer vector")
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
            raise ContractError(f"label out of range [0, {K})")
        return labels
    Y = labels.astype(np.float64).reshape(n, -1)
    if Y.shape[1] != K:
        raise ContractError(f"regression targets have {Y.shape[1]} columns, expected {K}")
    return Y


def _log_softmax(pred: np.ndarray) -> np.ndarray:
    s = pred - pred.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def loss(predictions: np.ndarray, labels, loss_kind: str = "softmax_cross_entropy") -> float:
    """Mean softmax cross-entropy, or half the mean squared error over the batch."""
    n, K = predictions.shape
    t = _targets(labels, K, loss_kind, n)
    if loss_kind == "softmax_cross_entropy":
        return float(-_log_softmax(predictions)[np.arange(n), t].mean())
    r = predictions - t
    return float(0.5 * (r * r).sum() / n)


def _loss_grad(predictions: np.ndarray, labels, loss_kind: str) -> np.ndarray:
    n, K = predictions.shape
    t = _targets(labels, K, loss_kind, n)
    if loss_kind == "softmax_cross_entropy":
        g = np.exp(_log_softmax(predictions))
        g[np.arange(n), t] -= 1.0
        return g / n
    return (predictions - t) / n


def objective(state: ModelState, batch, labels, config: TrainConfig, n_total: int | None = None) -> float:
    """Smooth part of the minibatch objective: loss + lambda2 (n / n_b) sum |Phi_L|^2."""
    pred, cache = forward(state, batch)
    n_b = batch.shape[0]
    scale = (n_total or n_b) / n_b
    return loss(pred, labels, config.loss_kind) + config.lambda2 * scale * float((cache.phi ** 2).sum())


def backward(state: ModelState, batch, labels, cache: ForwardCache, config: TrainConfig,
             n_total: int | None = None) -> GradientSet:
    """Exact gradients of the smooth objective; the nuclear-norm term is left to the prox."""
    if cache is None or cache.step_count != state.step_count:
        raise StaleCacheError("forward cache does not match the current step")
    pred = cache.phi @ state.W
    n_b = batch.shape[0]
    scale = (n_total or n_b) / n_b
    d_pred = _loss_grad(pred, labels, config.loss_kind)
    grad_W = cache.phi.T @ d_pred
    grad_layers = {}
    if config.freeze_features:
        for key, t in state.trainable():
            grad_layers[key] = np.zeros_like(t)
        return GradientSet(grad_W, grad_layers)
    d = d_pred @ state.W.T + 2.0 * config.lambda2 * scale * cache.phi
    shapes = state.arch.layer_shapes()
    for i in range(len(state.layer_params) - 1, -1, -1):
        p = state.layer_params[i]
        d = d.reshape((n_b,) + shapes[i])
        g, d = _layer_backward(p, cache.layers[i], d, need_input_grad=i > 0)
        for name, v in g.items():
            grad_layers[(i, name)] = v
    return GradientSet(grad_W, grad_layers)


def svt_step(W: np.ndarray, grad_W: np.ndarray, eta: float, lambda1: float) -> np.ndarray:
    """Proximal gradient step: ``Q = W - eta grad``, then shrink singular values by ``lambda1 eta``."""
    if W.shape != grad_W.shape:
        raise ContractError("W and grad_W shapes differ")
    if not eta > 0:
        raise ContractError("eta must be positive")
    Q = W - eta * grad_W
    if lambda1 == 0:
        return Q
    if not np.all(np.isfinite(Q)):
        raise np.linalg.LinAlgError("SVD of non-finite matrix")
    U, s, Vt = np.linalg.svd(Q, full_matrices=False)
    s = np.maximum(s - lambda1 * eta, 0.0)
    return (U * s) @ Vt


def nuclear_norm(W: np.ndarray) -> float:
    return float(np.linalg.svd(W, compute_uv=False).sum())


def adam_step(tensor, grad, moments, step_count: int, eta: float):
    """One bias-corrected Adam update. ``step_count`` is 1 on the first call.

    Returns ``(new_tensor, (m, v))`` without mutating the inputs.
    """
    m, v = moments
    m = BETA1 * m + (1.0 - BETA1) * grad
    v = BETA2 * v + (1.0 - BETA2) * (grad * grad)
    m_hat = m / (1.0 - BETA1 ** step_count)
    v_hat = v / (1.0 - BETA2 ** step_count)
    return tensor - eta * m_hat / (np.sqrt(v_hat) + ADAM_EPS), (m, v)


# -- training loop -----------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    nuclear_norm_W: float
    frobenius_features: float
    rademacher_bound: float


@dataclass
class TrainResult:
    state: ModelState
    metrics: list


def _cast_params(params, dtype):
    out = []
    for p in params:
        kw = {}
        for name in ("omega", "omega_prime", "filters", "filters_prime", "phase"):
            if hasattr(p, name):
                a = getattr(p, name)
                kw[name] = None if a is None else a.astype(dtype)
        out.append(replace(p, **kw))
    return out


def evaluate(state: ModelState, X: np.ndarray, labels, loss_kind: str, batch_size: int = 500) -> dict:
    """Full-data pass: mean loss, accuracy (classification) and ``sum |Phi_L(x)|^2``."""
    n = X.shape[0]
    total_loss = 0.0
    correct = 0
    frob = 0.0
    labels = np.asarray(labels)
    for i in range(0, n, batch_size):
        xb = X[i:i + batch_size]
        pred, cache = forward(state, xb)
        yb = labels[i:i + batch_size]
        total_loss += loss(pred, yb, loss_kind) * xb.shape[0]
        frob += float((cache.phi.astype(np.float64) ** 2).sum())
        if loss_kind == "softmax_cross_entropy":
            correct += int((pred.argmax(axis=1) == yb).sum())
    acc = correct / n if loss_kind == "softmax_cross_entropy" else math.nan
    return {"loss": total_loss / n, "accuracy": acc, "frobenius": frob}


def train(dataset, arch: NetworkArchitecture, schedule: InitSchedule, config: TrainConfig,
          eval_dataset=None, state: ModelState | None = None) -> TrainResult:
    """Minibatch training with Adam on frequencies and proximal SGD on ``W``.

    ``dataset`` needs ``features`` (dataset layout) and ``labels``. Metrics
    are recorded after every epoch from a full float64 pass over the training
    data; ``test_accuracy`` is filled every ``eval_every`` epochs and at the last
    epoch when ``eval_dataset`` is given, NaN otherwise.
    """
    X = fm.to_network_input(arch, dataset.features)
    y = np.asarray(dataset.labels)
    n = X.shape[0]
    if n == 0:
        raise ContractError("empty dataset")
    K = arch.output_dim
    _targets(y, K, config.loss_kind, n)
    frozen = config.freeze_features or arch.variant is Variant.CDSK
    if frozen and not config.freeze_features:
        config = replace(config, freeze_features=True)
    batch_size = min(config.batch_size, n)
    dtype = np.dtype(config.dtype)

    if state is None:
        state = ModelState.fresh(arch, schedule)
    original_params = state.layer_params
    work = ModelState(arch, _cast_params(original_params, dtype), state.W.astype(dtype),
                      {}, state.step_count)
    X_metrics = X
    X = X.astype(dtype)
    Xe = ye = None
    if eval_dataset is not None:
        Xe = fm.to_network_input(arch, eval_dataset.features)
        ye = np.asarray(eval_dataset.labels)
    for key, t in work.trainable():
        work.adam_moments[key] = (np.zeros_like(t), np.zeros_like(t))

    rng = np.random.default_rng(int(config.seed))
    lr = config.learning_rate
    metrics = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = X[idx], y[idx]
            pred, cache = forward(work, xb)
            batch_loss = loss(pred, yb, config.loss_kind)
            if not math.isfinite(batch_loss) or batch_loss > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"loss {batch_loss} at epoch {epoch}, step {work.step_count}")
            grads = backward(work, xb, yb, cache, config, n_total=n)
            work.step_count += 1
            if not frozen:
                _apply_adam(work, grads, config.hidden_lr)
            work.W = svt_step(work.W, grads.grad_W, lr, config.lambda1)

        # metrics always come from a float64 pass, whatever the training dtype
        snap = _snapshot(work)
        stats = evaluate(snap, X_metrics, y, config.loss_kind, config.eval_batch_size)
        nuc = nuclear_norm(snap.W)
        test_acc = math.nan
        if Xe is not None and (epoch % config.eval_every == 0 or epoch == config.epochs):
            test_acc = evaluate(snap, Xe, ye, config.loss_kind, config.eval_batch_size)["accuracy"]
        m = EpochMetrics(epoch, stats["loss"], stats["accuracy"], test_acc, nuc, stats["frobenius"],
                         rademacher_bound(nuc, n, K, stats["frobenius"]))
        metrics.append(m)
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f |W|_* %.4f",
                 epoch, m.train_loss, m.train_accuracy, m.test_accuracy, nuc)
        if not math.isfinite(m.train_loss):
            raise TrainingDiverged(f"non-finite training loss after epoch {epoch}")

    final_params = original_params if frozen else _cast_params(work.layer_params, np.float64)
    final = ModelState(arch, final_params, work.W.astype(np.float64), work.adam_moments, work.step_count)
    return TrainResult(final, metrics)


def _snapshot(state: ModelState) -> ModelState:
    if state.W.dtype == np.float64:
        return state
    return ModelState(state.arch, _cast_params(state.layer_params, np.float64), state.W.astype(np.float64),
                      step_count=state.step_count)


def _apply_adam(state: ModelState, grads: GradientSet, eta: float) -> None:
    for (i, name), g in grads.grad_layers.items():
        p = state.layer_params[i]
        new, mom = adam_step(getattr(p, name), g, state.adam_moments[(i, name)], state.step_count, eta)
        state.adam_moments[(i, name)] = mom
        setattr(p, name, new)
        if p.tied:
            setattr(p, name + "_prime", new.copy())


# -- cross-validation --------------------------------------------------------

PAPER_GRID = tuple(10.0 ** e for e in range(-10, 0))


def stratified_folds(labels, k: int, seed: int, stratified: bool = True) -> np.ndarray:
    """Fold index per sample; within each class, a seeded permutation is dealt round-robin."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    rng = np.random.default_rng(int(seed))
    fold = np.empty(n, dtype=np.int64)
    if not stratified:
        fold[rng.permutation(n)] = np.arange(n) % k
        return fold
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    return fold


@dataclass
class CVCell:
    lambda1: float
    lambda2: float
    fold_scores: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_scores))


@dataclass
class CVResult:
    best: tuple
    cells: list


def select_best(cells: Sequence[CVCell]) -> CVCell:
    """Highest mean score; ties go to larger lambda1, then larger lambda2."""
    return max(cells, key=lambda c: (c.mean, c.lambda1, c.lambda2))


def cross_validate(dataset, arch: NetworkArchitecture, schedule: InitSchedule, config: TrainConfig,
                   grid: Sequence[tuple[float, float]] | None = None, folds: int = 5) -> CVResult:
    """k-fold CV over ``(lambda1, lambda2)`` cells; score is validation accuracy."""
    if grid is None:
        grid = [(a, b) for a in PAPER_GRID for b in PAPER_GRID]
    grid = list(grid)
    if not grid:
        raise ContractError("empty grid")
    classification = config.loss_kind == "softmax_cross_entropy"
    fold_of = stratified_folds(dataset.labels, folds, config.seed, stratified=classification)
    cells = []
    for l1, l2 in grid:
        scores = []
        for f in range(folds):
            tr, va = dataset.take(np.flatnonzero(fold_of != f)), dataset.take(np.flatnonzero(fold_of == f))
            cfg = replace(config, lambda1=l1, lambda2=l2, batch_size=min(config.batch_size, len(tr)),
                          eval_every=config.epochs + 1)
            res = train(tr, arch, schedule, cfg)
            Xv = fm.to_network_input(arch, va.features)
            ev = evaluate(res.state, Xv, va.labels, config.loss_kind)
            scores.append(ev["accuracy"] if classification else -ev["loss"])
        cells.append(CVCell(l1, l2, scores))
    best = select_best(cells)
    return CVResult((best.lambda1, best.lambda2), cells)
