"""Dense numerics underneath the lab: seeded RNG streams, small MLPs with
manual reverse-mode gradients, an Adam optimizer, and checkpoint I/O.

Everything is float64 numpy. A "matrix" is a 2-D C-order ndarray.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_TAG = "fairdiff-mlp/v1"


class DimensionError(ValueError):
    """Operand shapes do not line up."""


class StaleCacheError(RuntimeError):
    """Forward cache no longer matches the network it was computed with."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed or carries the wrong format tag."""


def derive_seed(seed: int, *tags: object) -> int:
    """Stable 63-bit child seed from a base seed plus context tags."""
    blob = repr((int(seed),) + tags).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


@dataclass
class RngStream:
    """Seeded random stream; all randomness in the package flows through one.

    Identical seed gives an identical draw sequence. Derived streams for
    sub-tasks come from `child`, so adding a consumer never shifts the draws
    seen by existing ones.
    """

    seed: int

    def __post_init__(self) -> None:
        self._gen = np.random.Generator(np.random.PCG64(int(self.seed)))

    def child(self, *tags: object) -> "RngStream":
        return RngStream(derive_seed(self.seed, *tags))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, size=None):
        return self._gen.uniform(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, p: np.ndarray | None = None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Product of two 2-D matrices with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def gaussian_sample(rng: RngStream, n: int, d: int) -> np.ndarray:
    """(n, d) matrix of i.i.d. standard-normal draws."""
    if n <= 0 or d <= 0:
        raise ValueError(f"need positive sample counts, got n={n}, d={d}")
    return rng.standard_normal((n, d))


# ---------------------------------------------------------------------------
# Fixed-topology MLP with manual forward/backward
# ---------------------------------------------------------------------------

@dataclass
class Mlp:
    """Fully connected net: tanh on hidden layers, identity on the output.

    `bottleneck_index` marks the layer whose activation is the h-space;
    layers before it form the encoder, layers after it the decoder.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]  # weights[l]: (fan_in, fan_out)
    biases: list[np.ndarray]   # biases[l]: (fan_out,)
    activation: str = "tanh"
    bottleneck_index: int = 1
    version: int = field(default=0, compare=False, repr=False)

    def __post_init__(self) -> None:
        L = self.n_layers
        if L < 1:
            raise ValueError("need at least one layer")
        if not (0 < self.bottleneck_index < L):
            raise ValueError(f"bottleneck_index {self.bottleneck_index} outside (0, {L})")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        for l in range(L):
            expect = (self.layer_sizes[l], self.layer_sizes[l + 1])
            if self.weights[l].shape != expect:
                raise DimensionError(f"layer {l}: weight shape {self.weights[l].shape} != {expect}")
            if self.biases[l].shape != (self.layer_sizes[l + 1],):
                raise DimensionError(f"layer {l}: bias shape {self.biases[l].shape}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_width(self) -> int:
        return self.layer_sizes[-1]

    @property
    def bottleneck_width(self) -> int:
        return self.layer_sizes[self.bottleneck_index]

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def bump(self) -> None:
        """Mark an in-place parameter update; invalidates existing caches."""
        self.version += 1


def init_mlp(layer_sizes: Sequence[int], bottleneck_index: int, rng: RngStream,
             activation: str = "tanh") -> Mlp:
    """Fresh net with 1/sqrt(fan_in) Gaussian weights and zero biases."""
    sizes = [int(s) for s in layer_sizes]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        biases.append(np.zeros(fan_out))
    return Mlp(sizes, weights, biases, activation, bottleneck_index)


@dataclass
class ForwardCache:
    """Activations of one forward pass over layers [lo, hi)."""

    acts: list[np.ndarray]  # acts[0] is the segment input
    lo: int
    hi: int
    net_id: int
    net_version: int


def forward_layers(net: Mlp, a: np.ndarray, lo: int = 0, hi: int | None = None):
    """Run layers lo..hi-1 on a (n, width) batch; returns (out, cache).

    The network's final layer is always identity, hidden layers tanh,
    regardless of where the segment boundaries fall.
    """
    hi = net.n_layers if hi is None else hi
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[1] != net.layer_sizes[lo]:
        raise DimensionError(f"segment input width {a.shape[1]} != layer size {net.layer_sizes[lo]}")
    acts = [a]
    for l in range(lo, hi):
        z = a @ net.weights[l] + net.biases[l]
        a = np.tanh(z) if l < net.n_layers - 1 else z
        acts.append(a)
    return a, ForwardCache(acts, lo, hi, id(net), net.version)


def backward_layers(net: Mlp, cache: ForwardCache, out_grad: np.ndarray):
    """Reverse-mode gradients for a cached segment.

    Returns (input_grad, weight_grads, bias_grads); the grad lists align
    with layers lo..hi-1.
    """
    if cache.net_id != id(net) or cache.net_version != net.version:
        raise StaleCacheError("cache does not match the current network parameters")
    g = np.atleast_2d(np.asarray(out_grad, dtype=np.float64))
    if g.shape != cache.acts[-1].shape:
        raise DimensionError(f"out_grad shape {g.shape} != output shape {cache.acts[-1].shape}")
    wgrads: list[np.ndarray] = [None] * (cache.hi - cache.lo)  # type: ignore[list-item]
    bgrads: list[np.ndarray] = [None] * (cache.hi - cache.lo)  # type: ignore[list-item]
    for l in range(cache.hi - 1, cache.lo - 1, -1):
        a_in = cache.acts[l - cache.lo]
        a_out = cache.acts[l - cache.lo + 1]
        dz = g if l == net.n_layers - 1 else g * (1.0 - a_out * a_out)
        wgrads[l - cache.lo] = a_in.T @ dz
        bgrads[l - cache.lo] = dz.sum(axis=0)
        g = dz @ net.weights[l].T
    return g, wgrads, bgrads


def mlp_forward(net: Mlp, x: np.ndarray, t_embed: np.ndarray | None = None):
    """Evaluate the net on one input vector, time embedding concatenated.

    Returns (output vector, cache); the cache serves both the backward pass
    and bottleneck reads.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    parts = [x] if t_embed is None else [x, np.asarray(t_embed, dtype=np.float64).ravel()]
    full = np.concatenate(parts)
    if full.shape[0] != net.input_width:
        raise DimensionError(f"input width {full.shape[0]} != expected {net.input_width}")
    out, cache = forward_layers(net, full[None, :])
    return out[0], cache


def mlp_backward(net: Mlp, cache: ForwardCache, out_grad: np.ndarray):
    """Gradients for a single-vector forward; returns ((dW, db) lists, input grad)."""
    g, wgrads, bgrads = backward_layers(net, cache, np.atleast_2d(out_grad))
    return (wgrads, bgrads), g[0]


def bottleneck_activation(net: Mlp, cache: ForwardCache) -> np.ndarray:
    """h-space activation recorded in a full forward cache."""
    if cache.lo != 0 or cache.hi != net.n_layers:
        raise ValueError("bottleneck read needs a full-network cache")
    return cache.acts[net.bottleneck_index]


class Adam:
    """Adam on a fixed list of parameter arrays, updated in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise DimensionError("gradient list length does not match parameters")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_mlp(net: Mlp, path: str | Path) -> None:
    """Write a self-describing text checkpoint (format-tagged JSON)."""
    payload = {
        "format": CHECKPOINT_TAG,
        "layer_sizes": net.layer_sizes,
        "activation": net.activation,
        "bottleneck_index": net.bottleneck_index,
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    Path(path).write_text(json.dumps(payload))


def load_mlp(path: str | Path) -> Mlp:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_TAG:
        raise CheckpointError(f"{path}: expected format {CHECKPOINT_TAG!r}, got {payload.get('format')!r}")
    try:
        sizes = [int(s) for s in payload["layer_sizes"]]
        weights = [
            np.array(w, dtype=np.float64).reshape(fan_in, fan_out)
            for w, fan_in, fan_out in zip(payload["weights"], sizes[:-1], sizes[1:])
        ]
        biases = [np.array(b, dtype=np.float64) for b in payload["biases"]]
        net = Mlp(sizes, weights, biases, payload["activation"], int(payload["bottleneck_index"]))
    except (KeyError, ValueError, DimensionError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    for arr in net.parameters():
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{path}: non-finite parameter values")
    return net
