"""Small dense-network engine: ReLU MLPs with manual backprop, Adam/AdamW,
losses and sinusoidal timestep embeddings.

Everything runs in float64 on numpy arrays. A network is a plain container of
parameter arrays; ``forward`` returns a :class:`ForwardCache` that ``backward``
consumes, so a frozen network can be shared between callers.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
EMBED_DIM = 128


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or parameter contains NaN or Inf."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only RNG used across the package."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


@dataclass
class MlpNetwork:
    """Fully connected ReLU network with identity output.

    ``weights[i]`` has shape ``(layer_sizes[i], layer_sizes[i+1])``. When
    ``embed_injection`` is set, ``embed_proj[i]`` maps a timestep embedding to
    the width of hidden layer ``i`` and is added to its pre-activation.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    embed_injection: bool = False
    embed_dim: int = EMBED_DIM
    embed_proj: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ShapeError(f"invalid layer sizes {self.layer_sizes}")
        n = len(self.layer_sizes) - 1
        if len(self.weights) != n or len(self.biases) != n:
            raise ShapeError(f"expected {n} weight/bias arrays, got {len(self.weights)}/{len(self.biases)}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ShapeError(f"layer {i + 1}: weight {w.shape} / bias {b.shape}, expected {want} / {(want[1],)}")
        if self.embed_injection:
            if len(self.embed_proj) != n - 1:
                raise ShapeError(f"expected {n - 1} embedding projections, got {len(self.embed_proj)}")
            for i, p in enumerate(self.embed_proj):
                if p.shape != (self.embed_dim, self.layer_sizes[i + 1]):
                    raise ShapeError(f"embedding projection {i + 1} has shape {p.shape}")
        elif self.embed_proj:
            raise ShapeError("embedding projections given but embed_injection is off")

    @classmethod
    def create(cls, layer_sizes: Sequence[int], rng: np.random.Generator,
               embed_injection: bool = False, embed_dim: int = EMBED_DIM) -> "MlpNetwork":
        """Glorot-uniform weights, zero biases."""
        sizes = [int(s) for s in layer_sizes]
        weights, biases, proj = [], [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        if embed_injection:
            for width in sizes[1:-1]:
                limit = np.sqrt(6.0 / (embed_dim + width))
                proj.append(rng.uniform(-limit, limit, size=(embed_dim, width)))
        return cls(sizes, weights, biases, embed_injection, embed_dim, proj)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list[np.ndarray]:
        """Parameters in canonical order: all weights, all biases, projections."""
        return [*self.weights, *self.biases, *self.embed_proj]

    def param_names(self) -> list[str]:
        n = self.n_layers
        return ([f"layer{i + 1}.weight" for i in range(n)]
                + [f"layer{i + 1}.bias" for i in range(n)]
                + [f"layer{i + 1}.embed_proj" for i in range(len(self.embed_proj))])

    def decay_mask(self) -> list[bool]:
        n = self.n_layers
        return [True] * n + [False] * n + [True] * len(self.embed_proj)

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        n = self.n_layers
        params = list(params)
        self.weights = params[:n]
        self.biases = params[n:2 * n]
        self.embed_proj = params[2 * n:]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(list(self.layer_sizes), [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], self.embed_injection,
                          self.embed_dim, [p.copy() for p in self.embed_proj])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.layer_sizes, self.embed_injection, self.embed_dim]).encode())
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class ForwardCache:
    """Post-activations of every layer (input first, logits last)."""

    layers: list[np.ndarray]
    embed: Optional[np.ndarray] = None

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1]


def forward(net: MlpNetwork, x, embed=None) -> ForwardCache:
    """Evaluate ``net`` on the rows of ``x``.

    ``embed`` is a single embedding vector shared by all rows or one embedding
    per row; it must be given exactly when the network injects embeddings.
    """
    x = as_matrix(x)
    if x.shape[1] != net.layer_sizes[0]:
        raise ShapeError(f"input has shape {x.shape}, network expects (n, {net.layer_sizes[0]})")
    if net.embed_injection != (embed is not None):
        raise ShapeError("embedding must be supplied iff the network has embed_injection set")
    if embed is not None:
        embed = np.asarray(embed, dtype=np.float64)
        if embed.ndim == 1:
            embed = embed[None, :]
        if embed.shape[1] != net.embed_dim or embed.shape[0] not in (1, x.shape[0]):
            raise ShapeError(f"embedding has shape {embed.shape}, expected (1 or {x.shape[0]}, {net.embed_dim})")
    layers = [x]
    h = x
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if i < last:
            if embed is not None:
                z += embed @ net.embed_proj[i]
            h = np.maximum(z, 0.0)
        else:
            h = z
        layers.append(h)
    return ForwardCache(layers, embed)


def backward(net: MlpNetwork, cache: ForwardCache, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
    """Backpropagate ``output_grad`` through ``net``.

    Returns parameter gradients in :meth:`MlpNetwork.params` order and the
    gradient with respect to the input rows.
    """
    g = as_matrix(output_grad, "output_grad")
    layers = cache.layers
    if len(layers) != net.n_layers + 1:
        raise ShapeError(f"cache holds {len(layers)} layers, network has {net.n_layers + 1}")
    for i, a in enumerate(layers):
        if a.ndim != 2 or a.shape[1] != net.layer_sizes[i] or a.shape[0] != layers[0].shape[0]:
            raise ShapeError(f"cached activation {i} has shape {a.shape}, network width {net.layer_sizes[i]}")
    if g.shape != cache.output.shape:
        raise ShapeError(f"output_grad has shape {g.shape}, output has shape {cache.output.shape}")
    if net.embed_injection and cache.embed is None:
        raise ShapeError("cache lacks the embedding used by this network")

    n = net.n_layers
    w_grads: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    p_grads: list[np.ndarray] = [None] * len(net.embed_proj)  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (layers[i + 1] > 0)
            if net.embed_injection:
                e = cache.embed
                if e.shape[0] == 1:
                    p_grads[i] = e.T @ g.sum(axis=0, keepdims=True)
                else:
                    p_grads[i] = e.T @ g
        w_grads[i] = layers[i].T @ g
        b_grads[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    return [*w_grads, *b_grads, *p_grads], g


# ---------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def optimizer_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
                   decay_mask: Optional[Sequence[bool]] = None,
                   names: Optional[Sequence[str]] = None) -> list[np.ndarray]:
    """One Adam / AdamW update, in place. Returns ``params``.

    AdamW applies decoupled weight decay only where ``decay_mask`` is true
    (weights, not biases).
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    names = names or [f"param{i}" for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif [m.shape for m in state.m] != [p.shape for p in params]:
        raise ShapeError("optimizer moments do not match parameter shapes")
    if decay_mask is None:
        decay_mask = [True] * len(params)

    state.step_count += 1
    t = state.step_count
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v, decay in zip(params, grads, state.m, state.v, decay_mask):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.kind == "adamw" and decay and state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def softmax(logits) -> np.ndarray:
    z = as_matrix(logits, "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean softmax negative log-likelihood and its gradient wrt logits."""
    z = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {z.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError(f"labels must lie in 0..{z.shape[1] - 1}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = float(np.mean(log_norm - shifted[rows, labels]))
    grad = np.exp(shifted - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / z.shape[0]


# ---------------------------------------------------------------------------
# timestep embeddings

def sinusoidal_embedding(t, dim: int = EMBED_DIM) -> np.ndarray:
    """sin/cos pairs at geometric frequencies; element 2i is sin, 2i+1 cos.

    ``t`` may be a scalar (returns ``(dim,)``) or an array of steps (returns
    ``(len(t), dim)``).
    """
    if dim % 2:
        raise ValueError(f"embedding dimension must be even, got {dim}")
    steps = np.asarray(t, dtype=np.float64)
    if np.any(steps < 0):
        raise ValueError("timestep must be non-negative")
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    angles = steps[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


# ---------------------------------------------------------------------------
# checkpoints

def network_to_dict(net: MlpNetwork) -> dict[str, Any]:
    acts = ["relu"] * (net.n_layers - 1) + ["identity"]
    return {
        "layer_sizes": net.layer_sizes,
        "activations": acts,
        "embed_injection": net.embed_injection,
        "embed_dim": net.embed_dim,
        "params": [p.ravel().tolist() for p in net.params()],
    }


def network_from_dict(doc: dict[str, Any]) -> MlpNetwork:
    sizes = [int(s) for s in doc["layer_sizes"]]
    n = len(sizes) - 1
    embed = bool(doc["embed_injection"])
    edim = int(doc.get("embed_dim", EMBED_DIM))
    shapes = ([(sizes[i], sizes[i + 1]) for i in range(n)] + [(sizes[i + 1],) for i in range(n)]
              + ([(edim, sizes[i + 1]) for i in range(n - 1)] if embed else []))
    flat = doc["params"]
    if len(flat) != len(shapes):
        raise ShapeError(f"checkpoint has {len(flat)} parameter arrays, expected {len(shapes)}")
    arrays = [np.asarray(a, dtype=np.float64).reshape(s) for a, s in zip(flat, shapes)]
    return MlpNetwork(sizes, arrays[:n], arrays[n:2 * n], embed, edim, arrays[2 * n:])


def save_checkpoint(path, kind: str, net: MlpNetwork, config: dict[str, Any],
                    extra: Optional[dict[str, Any]] = None) -> str:
    """Write a JSON checkpoint and return its sha256."""
    doc = {"format_version": FORMAT_VERSION, "kind": kind, "network": network_to_dict(net),
           "config": config}
    if extra:
        doc.update(extra)
    data = json.dumps(doc, sort_keys=True).encode()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> tuple[MlpNetwork, dict[str, Any]]:
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    return network_from_dict(doc["network"]), doc
