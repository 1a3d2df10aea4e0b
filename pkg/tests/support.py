"""Shared helpers for the test suite: finite-difference oracles and tiny models."""
import numpy as np

from purifynet import nn


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` wrt every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def network_gradcheck(net: nn.MlpNetwork, x: np.ndarray, embed, seed: int) -> dict[str, float]:
    """Relative error of every analytic gradient against central differences.

    The scalar probed is ``sum(output * R)`` for a fixed random ``R``.
    """
    r = nn.make_rng(seed).standard_normal(nn.forward(net, x, embed).output.shape)

    def loss():
        return float(np.sum(nn.forward(net, x, embed).output * r))

    grads, g_in = nn.backward(net, nn.forward(net, x, embed), r)
    errors = {}
    for name, p, g in zip(net.param_names(), net.params(), grads):
        errors[name] = rel_error(g, numeric_grad(loss, p))
    errors["input"] = rel_error(g_in, numeric_grad(loss, x))
    return errors


def random_network(seed: int, embed: bool = False):
    """A small random network with an input batch (and embedding when asked)."""
    rng = nn.make_rng(seed)
    depth = int(rng.integers(1, 4))
    sizes = [int(rng.integers(2, 7)) for _ in range(depth + 1)]
    if embed:
        sizes[-1] = sizes[0]
        if len(sizes) < 3:
            sizes.insert(1, 5)
    net = nn.MlpNetwork.create(sizes, rng, embed_injection=embed, embed_dim=8)
    for b in net.biases:
        b[:] = rng.normal(0, 0.3, b.shape)
    x = rng.standard_normal((int(rng.integers(1, 5)), sizes[0]))
    e = None
    if embed:
        e = nn.sinusoidal_embedding(rng.integers(1, 50, size=x.shape[0]), 8)
    return net, x, e
