"""Numeric substrate: stable activations, tiny MLPs with exact manual
gradients, and seeded reproducible RNG.

Everything is float64. Matrices are row-major numpy arrays. Gradients are
computed analytically and are verified against central finite differences in
the test suite, so no autodiff framework is needed for models this small.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_U64 = (1 << 64) - 1

ACTIVATIONS = ("relu", "identity")


def sigmoid(x):
    """Numerically stable logistic function, elementwise on arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def softmax_temp(scores, tau):
    """Temperature softmax. -inf entries are excluded and map to exactly 0.

    Raises ValueError if tau <= 0 or if no entry is finite.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(s)
    if not finite.any():
        raise ValueError("no valid units")
    m = s[finite].max()
    out = np.zeros_like(s)
    out[finite] = np.exp((s[finite] - m) / tau)
    out /= out.sum()
    return out


@dataclass(frozen=True)
class Layer:
    """One affine layer: y = act(w @ x + b), w has shape (out, in)."""

    w: np.ndarray
    b: np.ndarray
    act: str

    def __post_init__(self):
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        if self.w.ndim != 2 or self.b.ndim != 1 or self.w.shape[0] != self.b.shape[0]:
            raise ValueError("layer shape mismatch")


@dataclass(frozen=True)
class Mlp:
    """A feed-forward stack of Layers with chained dimensions."""

    layers: tuple[Layer, ...]

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.w.shape[1] != prev.w.shape[0]:
                raise ValueError("layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].w.shape[0]

    def n_params(self) -> int:
        return sum(l.w.size + l.b.size for l in self.layers)


def init_mlp(dims, activations, rng) -> Mlp:
    """Build an Mlp with weights ~ U[-1/sqrt(fan_in), +1/sqrt(fan_in)].

    dims is [in, h1, ..., out]; activations has one tag per layer. Biases
    start at zero so freshly initialised models are centered.
    """
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for din, dout, act in zip(dims, dims[1:], activations):
        bound = 1.0 / np.sqrt(din)
        w = rng.uniform(-bound, bound, size=(dout, din))
        layers.append(Layer(w=w, b=np.zeros(dout), act=act))
    return Mlp(layers=tuple(layers))


def _apply_act(z, act):
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def mlp_forward(mlp: Mlp, x):
    """Single-vector forward pass. Returns (output, cache) where cache keeps
    the per-layer inputs and pre-activations needed by mlp_backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (mlp.in_dim,):
        raise ValueError(f"input shape {x.shape} != ({mlp.in_dim},)")
    inputs, zs = [], []
    a = x
    for layer in mlp.layers:
        inputs.append(a)
        z = layer.w @ a + layer.b
        zs.append(z)
        a = _apply_act(z, layer.act)
    return a, (inputs, zs)


def mlp_forward_batch(mlp: Mlp, X):
    """Row-batched forward pass: X has shape (n, in_dim)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != mlp.in_dim:
        raise ValueError(f"input shape {X.shape} incompatible with in_dim {mlp.in_dim}")
    inputs, zs = [], []
    A = X
    for layer in mlp.layers:
        inputs.append(A)
        Z = A @ layer.w.T + layer.b
        zs.append(Z)
        A = _apply_act(Z, layer.act)
    return A, (inputs, zs)


def _act_grad(z, act):
    if act == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def mlp_backward(mlp: Mlp, cache, upstream):
    """Exact gradients of (output . upstream) w.r.t. parameters and input.

    cache must come from mlp_forward on the same mlp. Returns
    (grads, dinput) with grads a list of (dw, db) matching mlp.layers.
    """
    inputs, zs = cache
    if len(inputs) != len(mlp.layers):
        raise ValueError("cache does not match mlp")
    delta = np.asarray(upstream, dtype=np.float64)
    if delta.shape != (mlp.out_dim,):
        raise ValueError("upstream shape mismatch")
    grads = [None] * len(mlp.layers)
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        delta = delta * _act_grad(zs[i], layer.act)
        grads[i] = (np.outer(delta, inputs[i]), delta.copy())
        delta = layer.w.T @ delta
    return grads, delta


def mlp_backward_batch(mlp: Mlp, cache, upstream):
    """Batched backward: upstream (n, out_dim). Parameter grads are summed
    over rows; the per-row input gradient (n, in_dim) is returned."""
    inputs, zs = cache
    if len(inputs) != len(mlp.layers):
        raise ValueError("cache does not match mlp")
    delta = np.asarray(upstream, dtype=np.float64)
    grads = [None] * len(mlp.layers)
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        delta = delta * _act_grad(zs[i], layer.act)
        grads[i] = (delta.T @ inputs[i], delta.sum(axis=0))
        delta = delta @ layer.w
    return grads, delta


def zero_grads(mlp: Mlp):
    return [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in mlp.layers]


def add_grads(acc, grads, scale=1.0):
    """acc += scale * grads, in place on the accumulator list."""
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += scale * gw
        ab += scale * gb
    return acc


def sgd_step(mlp: Mlp, grads, lr: float) -> Mlp:
    """p <- p - lr * g elementwise; returns a new Mlp (params are immutable)."""
    layers = []
    for layer, (gw, gb) in zip(mlp.layers, grads):
        layers.append(Layer(w=layer.w - lr * gw, b=layer.b - lr * gb, act=layer.act))
    return Mlp(layers=tuple(layers))


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64). Identical seeds give identical streams;
    the algorithm is fixed by numpy's PCG64 stream-compatibility guarantee."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(root: int, tag: str) -> int:
    """Derive an independent 64-bit seed as root XOR sha256(tag).

    Every source of randomness in the pipeline draws from one root seed
    through a purpose tag, so sub-experiments are reproducible in isolation.
    """
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return (int(root) ^ int.from_bytes(digest[:8], "little")) & _U64
