"""Discrete-time Gaussian diffusion over feature vectors.

Forward noising, epsilon-prediction training, ancestral reverse sampling and
the purification operator (``t`` forward steps followed by ``t`` reverse steps).
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .datasets import Dataset

log = logging.getLogger(__name__)

PAPER_HIDDEN = (960,) * 10
DESK_HIDDEN = (128,) * 4


@dataclass(frozen=True)
class VarianceSchedule:
    """Linear variance schedule and its derived sequences.

    Arrays are indexed by ``t - 1``; use the accessor methods for 1-based
    steps. ``alpha_bar_at(0) == 1`` by convention.
    """

    T: int
    beta1: float
    betaT: float
    kind: str = "linear"
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)
    sigma2: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not 0 < self.beta1 <= self.betaT < 1:
            raise ValueError(f"need 0 < beta1 <= betaT < 1, got beta1={self.beta1}, betaT={self.betaT}")
        T = int(self.T)
        if T == 1:
            beta = np.array([float(self.beta1)])
        else:
            i = np.arange(T, dtype=np.float64)
            beta = self.beta1 + i * (self.betaT - self.beta1) / (T - 1)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for name, value in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                            ("sigma2", 1.0 - alpha_bar)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    def _check(self, t: int, lo: int = 1) -> int:
        if int(t) != t or not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")
        return int(t)

    def beta_at(self, t: int) -> float:
        return float(self.beta[self._check(t) - 1])

    def alpha_bar_at(self, t: int) -> float:
        t = self._check(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def posterior_variance(self, t: int) -> float:
        t = self._check(t)
        return self.beta_at(t) * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t))

    def to_dict(self) -> dict:
        return {"T": int(self.T), "beta1": float(self.beta1), "betaT": float(self.betaT), "kind": self.kind}

    @classmethod
    def from_dict(cls, doc: dict) -> "VarianceSchedule":
        return cls(int(doc["T"]), float(doc["beta1"]), float(doc["betaT"]), doc.get("kind", "linear"))


def linear_schedule(T: int, beta1: float, betaT: float) -> VarianceSchedule:
    """``T`` evenly spaced variances from ``beta1`` to ``betaT`` (constant when equal)."""
    return VarianceSchedule(T, beta1, betaT)


def composed_variance(schedule: VarianceSchedule, t: int) -> float:
    """Total noise variance on the clean data after ``t`` steps, ``1 - alpha_bar_t``."""
    return float(schedule.sigma2[schedule._check(t) - 1])


def forward_sample(x0, t: int, schedule: VarianceSchedule, rng: Optional[np.random.Generator] = None,
                   noise=None) -> np.ndarray:
    """Closed-form draw of ``x_t`` given ``x_0``; ``noise`` overrides the RNG."""
    x0 = nn.as_matrix(x0, "x0")
    a = schedule.alpha_bar_at(t)
    if t == 0:
        return x0.copy()
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise nn.ShapeError(f"noise {noise.shape} vs x0 {x0.shape}")
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


def forward_chain(x0, t: int, schedule: VarianceSchedule, rng: np.random.Generator) -> np.ndarray:
    """``x_t`` by iterating the one-step transition ``t`` times."""
    x = nn.as_matrix(x0, "x0").copy()
    t = schedule._check(t, lo=0)
    for s in range(1, t + 1):
        b = schedule.beta[s - 1]
        x = np.sqrt(1.0 - b) * x + np.sqrt(b) * rng.standard_normal(x.shape)
    return x


@dataclass
class DiffusionTrainConfig:
    epochs: int = 5000
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: Optional[int] = None  # None: full batch
    seed: int = 0
    hidden: tuple[int, ...] = DESK_HIDDEN
    log_interval: int = 100

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.log_interval < 1 or (self.batch_size is not None and self.batch_size < 1):
            raise ValueError("batch_size and log_interval must be >= 1")


@dataclass
class DiffusionModel:
    schedule: VarianceSchedule
    noise_net: nn.MlpNetwork
    config: dict = field(default_factory=dict)
    posterior: str = "beta_tilde"  # or "beta"

    def __post_init__(self):
        sizes = self.noise_net.layer_sizes
        if sizes[0] != sizes[-1]:
            raise nn.ShapeError(f"noise network maps {sizes[0]} -> {sizes[-1]} features")
        if not self.noise_net.embed_injection:
            raise ValueError("noise network must take timestep embeddings")
        if self.posterior not in ("beta_tilde", "beta"):
            raise ValueError(f"unknown posterior variance {self.posterior!r}")

    @property
    def n_features(self) -> int:
        return self.noise_net.layer_sizes[0]

    def predict_noise(self, x_t, t) -> np.ndarray:
        emb = nn.sinusoidal_embedding(t, self.noise_net.embed_dim)
        return nn.forward(self.noise_net, x_t, emb).output

    def checksum(self) -> str:
        return self.noise_net.checksum()

    def save(self, path) -> str:
        return nn.save_checkpoint(path, "diffusion", self.noise_net, self.config,
                                  {"schedule": self.schedule.to_dict(), "posterior": self.posterior})

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        net, doc = nn.load_checkpoint(path)
        if doc.get("kind") != "diffusion":
            raise ValueError(f"{path} is not a diffusion checkpoint")
        return cls(VarianceSchedule.from_dict(doc["schedule"]), net, doc["config"],
                   doc.get("posterior", "beta_tilde"))


def train_diffusion(train: Dataset, schedule: VarianceSchedule,
                    cfg: DiffusionTrainConfig) -> tuple[DiffusionModel, list[tuple[int, float]]]:
    """Epsilon-prediction training with AdamW.

    Each epoch draws a fresh step and noise for every instance and takes one
    gradient step per mini-batch (one full-batch step by default).
    """
    if train.n_rows == 0:
        raise ValueError("training set is empty")
    rng = nn.make_rng(cfg.seed)
    d = train.n_features
    net = nn.MlpNetwork.create([d, *cfg.hidden, d], rng, embed_injection=True)
    opt = nn.OptimizerState("adamw", cfg.learning_rate, weight_decay=cfg.weight_decay)
    names, mask = net.param_names(), net.decay_mask()
    table = nn.sinusoidal_embedding(np.arange(schedule.T + 1), net.embed_dim)
    sqrt_ab = np.sqrt(np.concatenate([[1.0], schedule.alpha_bar]))
    sqrt_1mab = np.sqrt(np.concatenate([[0.0], schedule.sigma2]))
    x0 = train.features
    n = x0.shape[0]
    bs = cfg.batch_size or n
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        steps = rng.integers(1, schedule.T + 1, size=n)
        eps = rng.standard_normal(x0.shape)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            t = steps[idx]
            x_t = sqrt_ab[t, None] * x0[idx] + sqrt_1mab[t, None] * eps[idx]
            cache = nn.forward(net, x_t, table[t])
            loss, g = nn.mse_loss(cache.output, eps[idx])
            grads, _ = nn.backward(net, cache, g)
            nn.optimizer_step(net.params(), grads, opt, mask, names)
            total += loss * len(idx)
        if epoch % cfg.log_interval == 0:
            history.append((epoch, total / n))
            if not np.isfinite(history[-1][1]):
                raise nn.NonFiniteError(f"diffusion loss diverged at epoch {epoch}")
    meta = asdict(cfg)
    meta["hidden"] = list(cfg.hidden)
    return DiffusionModel(schedule, net, meta), history


def reverse_step(model: DiffusionModel, x_t, t: int, rng: Optional[np.random.Generator] = None,
                 noise=None, eps_hat=None) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; no noise is added at ``t == 1``.

    ``eps_hat`` substitutes the network's noise prediction (for testing).
    """
    s = model.schedule
    t = s._check(t)
    x_t = nn.as_matrix(x_t, "x_t")
    if eps_hat is None:
        eps_hat = model.predict_noise(x_t, t)
    beta = s.beta_at(t)
    mean = (x_t - beta / np.sqrt(1.0 - s.alpha_bar_at(t)) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    var = s.posterior_variance(t) if model.posterior == "beta_tilde" else beta
    if noise is None:
        noise = rng.standard_normal(x_t.shape)
    return mean + np.sqrt(var) * noise


def purify(model: DiffusionModel, x, t: int, rng: np.random.Generator) -> np.ndarray:
    """Diffuse ``x`` for ``t`` steps, denoise back to step 0 and clamp to [0, 1]."""
    x = nn.as_matrix(x)
    t = model.schedule._check(t, lo=0)
    if x.shape[1] != model.n_features:
        raise nn.ShapeError(f"input has {x.shape[1]} features, diffusion model expects {model.n_features}")
    if t == 0:
        return x.copy()
    h = forward_sample(x, t, model.schedule, rng)
    for s in range(t, 0, -1):
        h = reverse_step(model, h, s, rng)
    return np.clip(h, 0.0, 1.0)
