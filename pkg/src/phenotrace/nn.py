"""Small dense networks in float64 with hand-written backprop.

Batches are row-major: inputs are ``(n, in_dim)`` and a layer computes
``act(X @ W.T + b)`` with ``W`` of shape ``(out_dim, in_dim)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "identity", "sigmoid")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator: same seed, same stream."""
    return np.random.Generator(np.random.Philox(seed))


def derive_seed(base: int, *keys) -> int:
    """``base`` XOR a stable 63-bit hash of ``keys``."""
    digest = hashlib.blake2b(repr(keys).encode(), digest_size=8).digest()
    return (int(base) ^ int.from_bytes(digest, "little")) & ((1 << 63) - 1)


def sigmoid(z):
    return expit(np.asarray(z, dtype=float))


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("layer weights/bias shapes do not agree")


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if b.W.shape[1] != a.W.shape[0]:
                raise ValueError("layer dimensions do not chain")

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> "DenseNet":
        """He-uniform weights, zero biases."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / fan_in)
            layers.append(Layer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out), act))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].W.shape[1]] + [l.W.shape[0] for l in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend((l.W, l.b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def __call__(self, X) -> np.ndarray:
        return forward(self, X)[0]

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": [l.activation for l in self.layers],
            "params": [p.ravel().tolist() for p in self.params()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DenseNet":
        sizes, acts, flat = doc["sizes"], doc["activations"], doc["params"]
        layers = []
        for k, act in enumerate(acts):
            W = np.array(flat[2 * k], dtype=float).reshape(sizes[k + 1], sizes[k])
            b = np.array(flat[2 * k + 1], dtype=float)
            layers.append(Layer(W, b, act))
        return cls(layers)


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def forward(net: DenseNet, X) -> tuple[np.ndarray, list]:
    """Returns the output and a cache of per-layer (input, pre-activation, output)."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 1
    h = X[None, :] if single else X
    if h.shape[1] != net.in_dim:
        raise ValueError(f"input width {h.shape[1]} != network input {net.in_dim}")
    cache = []
    for layer in net.layers:
        z = h @ layer.W.T + layer.b
        a = _activate(z, layer.activation)
        cache.append((h, z, a))
        h = a
    return (h[0] if single else h), cache


def backward(net: DenseNet, cache: list, output_grad) -> tuple[np.ndarray, list[np.ndarray]]:
    """Gradient w.r.t. the input and the parameters (same order as ``params()``).

    Parameter gradients are summed over the batch. ReLU has derivative 0 at 0.
    """
    g = np.asarray(output_grad, dtype=float)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        h, z, a = cache[k]
        if layer.activation == "relu":
            g = g * (z > 0)
        elif layer.activation == "sigmoid":
            g = g * a * (1.0 - a)
        grads[2 * k] = g.T @ h
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ layer.W
    return (g[0] if single else g), grads


# --------------------------------------------------------------------------
# losses


def triplet_margin_loss(anchor, positive, negative, margin: float = 1.0):
    """Mean of ``max(0, |a-p| - |a-n| + margin)`` over a batch of triplets.

    Returns ``(loss, (grad_a, grad_p, grad_n))``. A zero distance contributes
    the subgradient 0.
    """
    a = np.asarray(anchor, dtype=float)
    p = np.asarray(positive, dtype=float)
    n = np.asarray(negative, dtype=float)
    single = a.ndim == 1
    if single:
        a, p, n = a[None], p[None], n[None]
    dp_vec, dn_vec = a - p, a - n
    dp = np.sqrt((dp_vec**2).sum(axis=1))
    dn = np.sqrt((dn_vec**2).sum(axis=1))
    raw = dp - dn + margin
    active = raw > 0
    loss = float(np.maximum(raw, 0.0).mean())  # NaN propagates
    B = len(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        up = np.where((dp > 0)[:, None], dp_vec / dp[:, None], 0.0)
        un = np.where((dn > 0)[:, None], dn_vec / dn[:, None], 0.0)
    w = active[:, None] / B
    ga = w * (up - un)
    gp = -w * up
    gn = w * un
    if single:
        return loss, (ga[0], gp[0], gn[0])
    return loss, (ga, gp, gn)


def weighted_bce(logits, labels, positive_weight: float = 1.0):
    """Class-weighted binary cross-entropy on logits, averaged over the batch.

    Uses ``softplus`` forms so large logits never overflow. Returns
    ``(loss, grad_logits)``.
    """
    z = np.asarray(logits, dtype=float)
    y = np.asarray(labels, dtype=float)
    w = np.where(y == 1, positive_weight, 1.0)
    per = w * (y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z))
    n = per.size
    grad = w * (sigmoid(z) - y) / n
    return float(per.mean()), grad


# --------------------------------------------------------------------------
# optimiser


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled (AdamW-style); 0 gives plain Adam
    t: int = 0
    m: np.ndarray | None = None  # moments over all parameters, flattened
    v: np.ndarray | None = None
    shapes: list[tuple] = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """Bias-corrected Adam update, applied to ``params`` in place."""
        if self.m is None:
            self.shapes = [p.shape for p in params]
            size = sum(p.size for p in params)
            self.m, self.v = np.zeros(size), np.zeros(size)
        if len(grads) != len(self.shapes) or any(g.shape != s for g, s in zip(grads, self.shapes)):
            raise ValueError("gradient shapes do not match parameters")
        g = np.concatenate([np.ravel(x) for x in grads])
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * g * g
        update = (self.lr / c1) * self.m / (np.sqrt(self.v / c2) + self.eps)
        start = 0
        for p in params:
            if self.weight_decay and p.ndim > 1:
                p *= 1.0 - self.lr * self.weight_decay
            p -= update[start : start + p.size].reshape(p.shape)
            start += p.size


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: Adam) -> tuple[list[np.ndarray], Adam]:
    state.step(params, grads)
    return params, state


# --------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: list[np.ndarray],
    h: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max elementwise relative error of analytic vs central-difference gradients.

    ``loss_fn(params)`` returns ``(loss, grads)``; ``params`` are perturbed in
    place and restored. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_coords`` only that many randomly chosen entries of each
    parameter array are probed.
    """
    _, analytic = loss_fn(params)
    analytic = [np.array(g, dtype=float) for g in analytic]
    rng = rng if rng is not None else make_rng(0)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        coords = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)[0]
            flat[i] = old - h
            down = loss_fn(params)[0]
            flat[i] = old
            num = (up - down) / (2 * h)
            err = abs(gflat[i] - num) / max(abs(gflat[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, nets: dict[str, DenseNet], registry_hash: str, config: dict, extra: dict | None = None) -> Path:
    doc = {
        "v": CHECKPOINT_VERSION,
        "registry_hash": registry_hash,
        "config": config,
        "networks": {name: net.to_dict() for name, net in sorted(nets.items())},
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("v") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('v')!r}")
    doc["networks"] = {name: DenseNet.from_dict(d) for name, d in doc["networks"].items()}
    return doc
