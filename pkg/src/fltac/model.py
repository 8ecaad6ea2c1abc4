"""Frozen base network plus trainable low-rank adapters.

The base model is a stack of affine layers with a pointwise activation
between them (identity after the last).  Fine-tuning never touches the base
weights; instead each adapted layer l carries a low-rank pair (A_l, B_l)
and the effective weight is W_l + B_l A_l, applied as W h + bias + B (A h)
so the r-dimensional bottleneck is explicit.

A layer may carry rank 0, meaning "not adapted": the pair contributes
nothing to the forward pass, the gradient, the parameter count, or the
flattened vector.  This keeps adapters structurally aligned with their
model (one pair per layer) while still supporting partial adaptation.

Training state is deliberately minimal: plain SGD on (A, B), no momentum.
All public operations are pure; arrays inside BaseModel and Adapter are
marked read-only at construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .numeric import Matrix, Rng

ACTIVATIONS = ("tanh", "relu", "identity")

LOSS_KINDS = ("mse", "softmax_ce")

# Adapter shape signature: one (d, k, r) triple per layer.
AdapterShape = tuple[tuple[int, int, int], ...]

_MAGIC = b"LRAD"
_FORMAT_VERSION = 1


def _freeze(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.setflags(write=False)


@dataclass(frozen=True)
class BaseModel:
    """Immutable layer stack [(W d_l x k_l, bias d_l x 1), ...]."""

    layers: tuple[tuple[Matrix, Matrix], ...]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(
                f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}"
            )
        if not self.layers:
            raise ParameterError("model needs at least one layer")
        for l, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0], 1):
                raise ShapeError(
                    f"layer {l}: weight {tuple(w.shape)} and bias {tuple(b.shape)} disagree"
                )
            if l > 0 and self.layers[l - 1][0].shape[0] != w.shape[1]:
                raise ShapeError(
                    f"layer {l}: input dim {w.shape[1]} != previous output dim "
                    f"{self.layers[l - 1][0].shape[0]}"
                )
            _freeze(w, b)

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer_dims(self) -> tuple[tuple[int, int], ...]:
        """(d_l, k_l) per layer."""
        return tuple((w.shape[0], w.shape[1]) for w, _ in self.layers)


@dataclass(frozen=True)
class Adapter:
    """Per-layer low-rank pairs [(A r_l x k_l, B d_l x r_l), ...]."""

    pairs: tuple[tuple[Matrix, Matrix], ...]

    def __post_init__(self):
        for l, (a, b) in enumerate(self.pairs):
            if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[1]:
                raise ShapeError(
                    f"layer {l}: A {tuple(a.shape)} and B {tuple(b.shape)} "
                    "do not share a rank dimension"
                )
            r = a.shape[0]
            if r > min(b.shape[0], a.shape[1]):
                raise ShapeError(
                    f"layer {l}: rank {r} exceeds min(d, k) = "
                    f"{min(b.shape[0], a.shape[1])}"
                )
            _freeze(a, b)

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(a.shape[0] for a, _ in self.pairs)

    def shape(self) -> AdapterShape:
        return tuple((b.shape[0], a.shape[1], a.shape[0]) for a, b in self.pairs)


@dataclass(frozen=True)
class GradPair:
    """Gradients mirroring an adapter's pairs, plus the loss they came from."""

    dA: tuple[Matrix, ...]
    dB: tuple[Matrix, ...]
    loss: float


def init_base_model(
    dims: list[int] | tuple[int, ...],
    activation: str,
    rng: Rng,
    weight_std: float | None | Sequence[float | None] = None,
    bias_std: float | Sequence[float] = 0.0,
) -> BaseModel:
    """Random frozen network with layer sizes dims[0] -> dims[1] -> ...

    weight_std of None picks 1/sqrt(fan_in) per layer; a sequence gives one
    value per layer (None entries fall back the same way).  bias_std may
    likewise be a per-layer sequence.
    """
    if len(dims) < 2:
        raise ParameterError("dims must list at least input and output size")
    n_layers = len(dims) - 1
    w_stds = (list(weight_std) if isinstance(weight_std, (list, tuple))
              else [weight_std] * n_layers)
    b_stds = (list(bias_std) if isinstance(bias_std, (list, tuple))
              else [bias_std] * n_layers)
    if len(w_stds) != n_layers or len(b_stds) != n_layers:
        raise ParameterError(
            f"per-layer std lists must have {n_layers} entries")
    layers = []
    for l in range(n_layers):
        k, d = dims[l], dims[l + 1]
        std = w_stds[l] if w_stds[l] is not None else 1.0 / np.sqrt(k)
        w = std * rng.normal((d, k))
        b = b_stds[l] * rng.normal((d, 1)) if b_stds[l] > 0 \
            else np.zeros((d, 1))
        layers.append((w, b))
    return BaseModel(tuple(layers), activation)


def init_adapter(
    model: BaseModel,
    rank: int | list[int],
    rng: Rng,
    adapted_layers: list[int] | None = None,
    init_std: float = 0.02,
) -> Adapter:
    """Fresh adapter: A ~ Normal(0, init_std^2), B = 0, so BA = 0 initially.

    A single integer rank is clamped per layer to min(d_l, k_l); an explicit
    per-layer rank list must already satisfy that bound.  Layers outside
    adapted_layers (default: all layers) get rank 0.
    """
    dims = model.layer_dims()
    adapted = set(range(model.depth)) if adapted_layers is None else set(adapted_layers)
    if not adapted <= set(range(model.depth)):
        raise ParameterError(
            f"adapted_layers {sorted(adapted)} outside model depth {model.depth}"
        )
    if isinstance(rank, (list, tuple)):
        if len(rank) != model.depth:
            raise ParameterError(
                f"per-layer rank list has {len(rank)} entries for {model.depth} layers"
            )
        ranks = list(rank)
        for l, (d, k) in enumerate(dims):
            if l in adapted and ranks[l] > min(d, k):
                raise ParameterError(
                    f"layer {l}: rank {ranks[l]} exceeds min(d, k) = {min(d, k)}"
                )
    else:
        if rank < 1:
            raise ParameterError(f"rank must be >= 1, got {rank}")
        ranks = [min(rank, min(d, k)) for d, k in dims]
    pairs = []
    for l, (d, k) in enumerate(dims):
        r = ranks[l] if l in adapted else 0
        a = init_std * rng.normal((r, k)) if r > 0 else np.zeros((0, k))
        b = np.zeros((d, r))
        pairs.append((a, b))
    return Adapter(tuple(pairs))


def zero_adapter_like(adapter: Adapter) -> Adapter:
    return Adapter(tuple((np.zeros_like(a), np.zeros_like(b)) for a, b in adapter.pairs))


def _check_conformable(model: BaseModel, adapter: Adapter) -> None:
    if len(adapter.pairs) != model.depth:
        raise ShapeError(
            f"adapter has {len(adapter.pairs)} layer pairs for a depth-{model.depth} model"
        )
    for l, ((w, _), (a, b)) in enumerate(zip(model.layers, adapter.pairs)):
        if a.shape[1] != w.shape[1] or b.shape[0] != w.shape[0]:
            raise ShapeError(
                f"layer {l}: adapter (A {tuple(a.shape)}, B {tuple(b.shape)}) "
                f"does not fit weight {tuple(w.shape)}"
            )


def _activate(s: Matrix, kind: str) -> Matrix:
    if kind == "tanh":
        return np.tanh(s)
    if kind == "relu":
        return np.maximum(s, 0.0)
    return s


def _forward_cached(model: BaseModel, adapter: Adapter, z: Matrix):
    """Returns (output, hs, us) with hs[l] the input to layer l and
    us[l] = A_l hs[l] the bottleneck activations."""
    _check_conformable(model, adapter)
    if z.ndim != 2 or z.shape[0] != model.input_dim:
        raise ShapeError(
            f"layer 0: input has {z.shape[0] if z.ndim == 2 else '?'} rows, "
            f"expected {model.input_dim}"
        )
    h = z
    hs, us = [], []
    last = model.depth - 1
    for l, ((w, bias), (a, b)) in enumerate(zip(model.layers, adapter.pairs)):
        hs.append(h)
        u = a @ h
        us.append(u)
        s = w @ h + bias + b @ u
        h = _activate(s, model.activation) if l < last else s
    return h, hs, us


def forward(model: BaseModel, adapter: Adapter, z: Matrix) -> Matrix:
    """Adapted forward pass: per layer h <- act(W h + bias + B (A h))."""
    out, _, _ = _forward_cached(model, adapter, z)
    return out


def _loss_and_output_grad(y_hat: Matrix, y: Matrix, loss_kind: str):
    if loss_kind not in LOSS_KINDS:
        raise ParameterError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction {tuple(y_hat.shape)} vs target {tuple(y.shape)}")
    n = y.shape[1]
    if loss_kind == "mse":
        diff = y_hat - y
        loss = float(np.sum(diff * diff)) / n
        return loss, (2.0 / n) * diff
    # softmax cross-entropy over rows, targets one-hot per column
    shifted = y_hat - y_hat.max(axis=0, keepdims=True)
    exp = np.exp(shifted)
    p = exp / exp.sum(axis=0, keepdims=True)
    loss = float(-np.sum(y * np.log(p + 1e-300))) / n
    return loss, (p - y) / n


def loss_and_grad(
    model: BaseModel, adapter: Adapter, batch: tuple[Matrix, Matrix], loss_kind: str = "mse"
) -> GradPair:
    """Batch-mean loss and exact analytic gradients w.r.t. every (A, B).

    The base weights are constants of the computation; no gradient for
    them exists anywhere in the code path.
    """
    x, y = batch
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeError("batch must contain at least one sample column")
    y_hat, hs, us = _forward_cached(model, adapter, x)
    loss, delta = _loss_and_output_grad(y_hat, y, loss_kind)
    if not np.isfinite(loss):
        raise NumericError(f"{loss_kind} loss diverged (value {loss})")

    das: list[Matrix] = [None] * model.depth
    dbs: list[Matrix] = [None] * model.depth
    for l in range(model.depth - 1, -1, -1):
        w, _ = model.layers[l]
        a, b = adapter.pairs[l]
        # delta is dLoss/ds_l here (post-activation grad already folded in)
        dbs[l] = delta @ us[l].T
        das[l] = (b.T @ delta) @ hs[l].T
        if l > 0:
            dh = w.T @ delta + a.T @ (b.T @ delta)
            if model.activation == "tanh":
                delta = dh * (1.0 - hs[l] * hs[l])
            elif model.activation == "relu":
                delta = dh * (hs[l] > 0)
            else:
                delta = dh
    return GradPair(tuple(das), tuple(dbs), loss)


def batch_loss(
    model: BaseModel, adapter: Adapter, x: Matrix, y: Matrix, loss_kind: str = "mse"
) -> float:
    """Forward-only batch-mean loss."""
    y_hat = forward(model, adapter, x)
    loss, _ = _loss_and_output_grad(y_hat, y, loss_kind)
    if not np.isfinite(loss):
        raise NumericError(f"{loss_kind} loss diverged (value {loss})")
    return loss


def sgd_step(adapter: Adapter, grad: GradPair, eta: float) -> Adapter:
    """A <- A - eta dA, B <- B - eta dB; returns a new adapter."""
    if eta <= 0:
        raise ParameterError(f"learning rate must be > 0, got {eta}")
    pairs = []
    for (a, b), da, db in zip(adapter.pairs, grad.dA, grad.dB):
        if da.shape != a.shape or db.shape != b.shape:
            raise ShapeError(
                f"gradient shapes ({tuple(da.shape)}, {tuple(db.shape)}) do not "
                f"match adapter ({tuple(a.shape)}, {tuple(b.shape)})"
            )
        pairs.append((a - eta * da, b - eta * db))
    return Adapter(tuple(pairs))


def adapter_param_count(adapter: Adapter) -> int:
    """Trainable scalar count: sum over layers of r_l (d_l + k_l)."""
    return sum(r * (d + k) for d, k, r in adapter.shape())


def param_count_for(shape: AdapterShape) -> int:
    return sum(r * (d + k) for d, k, r in shape)


def flatten(adapter: Adapter) -> np.ndarray:
    """Canonical vector: layers in order, A row-major then B row-major."""
    parts = []
    for a, b in adapter.pairs:
        parts.append(a.ravel(order="C"))
        parts.append(b.ravel(order="C"))
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def unflatten(shape: AdapterShape, vector: np.ndarray) -> Adapter:
    """Inverse of flatten for the given shape signature."""
    vector = np.asarray(vector, dtype=np.float64).ravel()
    expected = param_count_for(shape)
    if vector.size != expected:
        raise ShapeError(
            f"vector length {vector.size} != parameter count {expected} for shape {shape}"
        )
    pairs = []
    pos = 0
    for d, k, r in shape:
        a = vector[pos : pos + r * k].reshape(r, k).copy()
        pos += r * k
        b = vector[pos : pos + d * r].reshape(d, r).copy()
        pos += d * r
        pairs.append((a, b))
    return Adapter(tuple(pairs))


def save_adapter(f: BinaryIO, adapter: Adapter) -> None:
    """Binary layout: magic, version u32, layer count u32, per-layer
    (d, k, r) u32 triples, then the flatten vector as f64; all little-endian."""
    shape = adapter.shape()
    f.write(_MAGIC)
    f.write(struct.pack("<II", _FORMAT_VERSION, len(shape)))
    for d, k, r in shape:
        f.write(struct.pack("<III", d, k, r))
    f.write(flatten(adapter).astype("<f8").tobytes())


def load_adapter(f: BinaryIO) -> Adapter:
    magic = f.read(4)
    if magic != _MAGIC:
        raise ParameterError(f"bad adapter file magic {magic!r}")
    version, nlayers = struct.unpack("<II", f.read(8))
    if version != _FORMAT_VERSION:
        raise ParameterError(f"unsupported adapter format version {version}")
    shape = tuple(struct.unpack("<III", f.read(12)) for _ in range(nlayers))
    count = param_count_for(shape)
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise ShapeError(f"adapter file truncated: wanted {8 * count} payload bytes")
    return unflatten(shape, np.frombuffer(raw, dtype="<f8"))
