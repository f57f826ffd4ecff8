"""Small deterministic feed-forward network engine.

Everything is plain numpy in float64. Parameters are stored as
``weights[k]`` of shape ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
Backward passes are hand-derived for the fixed MLP family; there is also a
forward-mode pass (:func:`jvp`) used by the meta-optimizer to take inner
products against per-instance gradients without materialising them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh")

# A loss term maps logits (n, C) to (values (n,), dvalues/dlogits (n, C)).
LossTerm = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Raised when a forward or backward quantity stops being finite."""

    def __init__(self, message: str, instance_id: int | None = None):
        super().__init__(message if instance_id is None else f"{message} (instance {instance_id})")
        self.instance_id = instance_id


@dataclass
class MlpParams:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("layer count does not match layer_dims")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]):
                raise ShapeError(f"weights[{k}] has shape {w.shape}")
            if b.shape != (self.layer_dims[k + 1],):
                raise ShapeError(f"biases[{k}] has shape {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"non-finite parameters in layer {k}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            self.layer_dims,
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.activation,
        )

    def axpy(self, alpha: float, other: "MlpParams") -> "MlpParams":
        """Return ``self + alpha * other`` as a new parameter set."""
        return MlpParams(
            self.layer_dims,
            [w + alpha * ow for w, ow in zip(self.weights, other.weights)],
            [b + alpha * ob for b, ob in zip(self.biases, other.biases)],
            self.activation,
        )

    def dot(self, other: "MlpParams") -> float:
        return float(sum(np.sum(a * b) for a, b in zip(self.arrays(), other.arrays())))

    def sq_norm(self) -> float:
        return self.dot(self)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        out = self.zeros_like()
        pos = 0
        for a in out.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        return out

    def hidden_zeroed(self) -> "MlpParams":
        """Copy with every block except the final layer set to zero."""
        out = self.zeros_like()
        out.weights[-1][...] = self.weights[-1]
        out.biases[-1][...] = self.biases[-1]
        return out


def init_mlp(layer_dims: Sequence[int], seed: int | np.random.Generator = 0,
             activation: str = "relu") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ShapeError(f"invalid layer_dims {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(dims), weights, biases, activation)


def _act(a: np.ndarray, kind: str) -> np.ndarray:
    return np.maximum(a, 0.0) if kind == "relu" else np.tanh(a)


def _act_deriv(a: np.ndarray, z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (a > 0.0).astype(a.dtype)
    return 1.0 - z * z


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to layer k
    pre: list[np.ndarray] = field(default_factory=list)      # pre-activation of layer k

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]

    @property
    def last_hidden(self) -> np.ndarray:
        return self.inputs[-1]


def forward_cache(params: MlpParams, features: np.ndarray) -> ForwardCache:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise ShapeError(f"features of shape {x.shape} do not match input dim {params.layer_dims[0]}")
    cache = ForwardCache()
    z = x
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(z)
        a = z @ w + b
        cache.pre.append(a)
        if k < last:
            z = _act(a, params.activation)
    bad = ~np.isfinite(cache.logits).all(axis=1)
    if bad.any():
        raise NumericError("non-finite logits", int(np.flatnonzero(bad)[0]))
    return cache


def forward(params: MlpParams, features: np.ndarray) -> np.ndarray:
    return forward_cache(params, features).logits


def backward(params: MlpParams, cache: ForwardCache, dlogits: np.ndarray) -> MlpParams:
    """Gradient of ``sum_i <dlogits_i, logits_i>`` with respect to every block.

    Rows are reduced in ascending order by the matrix products, so the result
    is deterministic for a given batch ordering.
    """
    grads = params.zeros_like()
    delta = dlogits
    for k in range(params.n_layers - 1, -1, -1):
        grads.weights[k] = cache.inputs[k].T @ delta
        grads.biases[k] = delta.sum(axis=0)
        if k > 0:
            z = cache.inputs[k]
            delta = (delta @ params.weights[k].T) * _act_deriv(cache.pre[k - 1], z, params.activation)
    return grads


def jvp(params: MlpParams, cache: ForwardCache, direction: MlpParams) -> np.ndarray:
    """Directional derivative of every logit row along ``direction``.

    Row ``i`` of the result dotted with ``g_i`` equals the inner product of
    ``direction`` with the parameter gradient of ``<g_i, logits_i>``.
    """
    dz = np.zeros_like(cache.inputs[0])
    last = params.n_layers - 1
    da = None
    for k in range(params.n_layers):
        da = dz @ params.weights[k] + cache.inputs[k] @ direction.weights[k] + direction.biases[k]
        if k < last:
            dz = _act_deriv(cache.pre[k], cache.inputs[k + 1], params.activation) * da
    return da


def weighted_dlogits(logits: np.ndarray, terms: Sequence[tuple[LossTerm, np.ndarray]]):
    """Combine loss terms with per-instance coefficients.

    Returns ``(values, dlogits)`` where ``values[i] = sum_c coeff_c[i] * L_c,i``.
    """
    n = logits.shape[0]
    values = np.zeros(n)
    dl = np.zeros_like(logits)
    for term, coeff in terms:
        coeff = np.asarray(coeff, dtype=np.float64)
        if not np.isfinite(coeff).all():
            raise NumericError("non-finite loss coefficient", int(np.flatnonzero(~np.isfinite(coeff))[0]))
        v, g = term(logits)
        values += coeff * v
        dl += coeff[:, None] * g
    bad = ~np.isfinite(dl).all(axis=1)
    if bad.any():
        raise NumericError("non-finite loss gradient", int(np.flatnonzero(bad)[0]))
    return values, dl


def per_instance_grads(params: MlpParams, features: np.ndarray,
                       terms: Sequence[tuple[LossTerm, np.ndarray]]) -> MlpParams:
    """Batch-mean gradient ``(1/n) sum_i grad(sum_c coeff_c[i] * L_c,i)``."""
    cache = forward_cache(params, features)
    _, dl = weighted_dlogits(cache.logits, terms)
    grads = backward(params, cache, dl)
    n = cache.logits.shape[0]
    for a in grads.arrays():
        a /= n
    return grads


def last_layer_grads(params: MlpParams, features: np.ndarray,
                     terms: Sequence[tuple[LossTerm, np.ndarray]]):
    """Per-instance (not averaged) gradients of the final weight matrix and bias.

    Returns ``(dW, db)`` with shapes ``(n, h, C)`` and ``(n, C)``.
    """
    cache = forward_cache(params, features)
    _, dl = weighted_dlogits(cache.logits, terms)
    h = cache.last_hidden
    return h[:, :, None] * dl[:, None, :], dl


@dataclass
class SgdState:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = (150, 180, 210)
    gamma: float = 0.1
    reset_momentum_at_milestones: bool = False
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.lr0 <= 0 or self.gamma <= 0:
            raise ValueError("lr0 and gamma must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")

    def fresh(self) -> "SgdState":
        return SgdState(self.lr0, self.momentum, self.weight_decay, self.milestones,
                        self.gamma, self.reset_momentum_at_milestones)


def lr_at_epoch(state: SgdState, epoch: int) -> float:
    passed = sum(1 for m in state.milestones if m <= epoch)
    return state.lr0 * state.gamma ** passed


def sgd_step_arrays(arrays: list[np.ndarray], grads: list[np.ndarray], state: SgdState,
                    epoch: int) -> list[np.ndarray]:
    """Momentum SGD on a list of arrays; mutates ``state.velocity`` only."""
    if len(arrays) != len(grads) or any(a.shape != g.shape for a, g in zip(arrays, grads)):
        raise ShapeError("parameter and gradient shapes differ")
    if state.velocity is None or (state.reset_momentum_at_milestones and epoch in state.milestones):
        state.velocity = [np.zeros_like(a) for a in arrays]
    lr = lr_at_epoch(state, epoch)
    out = []
    for k, (p, g) in enumerate(zip(arrays, grads)):
        v = state.momentum * state.velocity[k] + g + state.weight_decay * p
        state.velocity[k] = v
        out.append(p - lr * v)
    return out


def sgd_step(params: MlpParams, grads: MlpParams, state: SgdState, epoch: int) -> MlpParams:
    if params.layer_dims != grads.layer_dims:
        raise ShapeError("parameter and gradient shapes differ")
    new = sgd_step_arrays(params.arrays(), grads.arrays(), state, epoch)
    return MlpParams(params.layer_dims, new[0::2], new[1::2], params.activation)


# Checkpoint layout (all little-endian):
#   8 bytes  b"AMALCKPT"
#   u32      format version (1)
#   u8       activation tag (0 = relu, 1 = tanh)
#   u8       layer count L (number of weight matrices)
#   u32 x (L + 1)  layer dims
#   then for each layer k: f64 W_k row-major (dims[k] x dims[k+1]), f64 b_k
CKPT_MAGIC = b"AMALCKPT"
CKPT_VERSION = 1


def save_checkpoint(params: MlpParams, path: str | Path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<IBB", CKPT_VERSION, ACTIVATIONS.index(params.activation),
                                     params.n_layers)]
    parts.append(struct.pack(f"<{len(params.layer_dims)}I", *params.layer_dims))
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> MlpParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an AMAL checkpoint")
    version, act, n_layers = struct.unpack_from("<IBB", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 14
    dims = struct.unpack_from(f"<{n_layers + 1}I", raw, pos)
    pos += 4 * (n_layers + 1)
    weights, biases = [], []
    for k in range(n_layers):
        count = dims[k] * dims[k + 1]
        weights.append(np.frombuffer(raw, "<f8", count, pos).reshape(dims[k], dims[k + 1]).astype(np.float64))
        pos += 8 * count
        biases.append(np.frombuffer(raw, "<f8", dims[k + 1], pos).astype(np.float64))
        pos += 8 * dims[k + 1]
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return MlpParams(dims, weights, biases, ACTIVATIONS[act])
