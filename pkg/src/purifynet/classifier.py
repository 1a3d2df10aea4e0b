"""Binary intrusion-detection MLP: training, prediction and input gradients."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .datasets import Dataset

log = logging.getLogger(__name__)

PAPER_HIDDEN = (256, 512, 1024, 512, 256)
DESK_HIDDEN = (64, 128, 256, 128, 64)
N_CLASSES = 2


@dataclass
class ClassifierTrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-5
    batch_size: Optional[int] = 1024  # None: full batch
    seed: int = 0
    hidden: tuple[int, ...] = DESK_HIDDEN
    log_interval: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if (self.batch_size is not None and self.batch_size < 1) or self.log_interval < 1:
            raise ValueError("batch_size and log_interval must be >= 1")


@dataclass
class IdsModel:
    net: nn.MlpNetwork
    config: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.net.layer_sizes[0]

    def logits(self, x) -> np.ndarray:
        return nn.forward(self.net, x).output

    def checksum(self) -> str:
        return self.net.checksum()

    def save(self, path) -> str:
        return nn.save_checkpoint(path, "classifier", self.net, self.config)

    @classmethod
    def load(cls, path) -> "IdsModel":
        net, doc = nn.load_checkpoint(path)
        if doc.get("kind") != "classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        return cls(net, doc["config"])


def train_classifier(train: Dataset, cfg: ClassifierTrainConfig) -> tuple[IdsModel, list[tuple[int, float]]]:
    """Train with Adam on cross-entropy; returns the model and ``(epoch, loss)`` log."""
    if train.n_rows == 0:
        raise ValueError("training set is empty")
    if len(np.unique(train.labels)) < N_CLASSES:
        raise ValueError("training set must contain both classes")
    rng = nn.make_rng(cfg.seed)
    net = nn.MlpNetwork.create([train.n_features, *cfg.hidden, N_CLASSES], rng)
    opt = nn.OptimizerState("adam", cfg.learning_rate)
    names, mask = net.param_names(), net.decay_mask()
    x, y = train.features, train.labels
    n = x.shape[0]
    bs = cfg.batch_size or n
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            cache = nn.forward(net, x[idx])
            loss, g = nn.cross_entropy_loss(cache.output, y[idx])
            grads, _ = nn.backward(net, cache, g)
            nn.optimizer_step(net.params(), grads, opt, mask, names)
            total += loss * len(idx)
        if epoch % cfg.log_interval == 0:
            history.append((epoch, total / n))
            if not np.isfinite(history[-1][1]):
                raise nn.NonFiniteError(f"classifier loss diverged at epoch {epoch}")
    meta = asdict(cfg)
    meta["hidden"] = list(cfg.hidden)
    return IdsModel(net, meta), history


def predict(model: IdsModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and class probabilities."""
    probs = nn.softmax(model.logits(x))
    return probs.argmax(axis=1), probs


def accuracy(model: IdsModel, data: Dataset) -> float:
    if data.n_rows == 0:
        return float("nan")
    labels, _ = predict(model, data.features)
    return float(np.mean(labels == data.labels))


def input_gradient(model: IdsModel, x, target_labels, loss_kind: str = "cross_entropy") -> np.ndarray:
    """Gradient of the mean loss over rows with respect to every input element.

    ``loss_kind`` is ``"cross_entropy"`` or ``"logit"`` (negated target logit).
    """
    x = nn.as_matrix(x)
    cache = nn.forward(model.net, x)
    labels = np.asarray(target_labels, dtype=np.int64).reshape(-1)
    if loss_kind == "cross_entropy":
        _, g = nn.cross_entropy_loss(cache.output, labels)
    elif loss_kind == "logit":
        if labels.shape[0] != x.shape[0]:
            raise nn.ShapeError(f"{labels.shape[0]} labels for {x.shape[0]} rows")
        g = np.zeros_like(cache.output)
        g[np.arange(x.shape[0]), labels] = -1.0 / x.shape[0]
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    _, gx = nn.backward(model.net, cache, g)
    return gx


def logit_jacobian(model: IdsModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(n, C)`` and per-row Jacobian ``(n, C, d)`` of logits wrt inputs."""
    x = nn.as_matrix(x)
    cache = nn.forward(model.net, x)
    z = cache.output
    jac = np.empty((x.shape[0], z.shape[1], x.shape[1]))
    for c in range(z.shape[1]):
        g = np.zeros_like(z)
        g[:, c] = 1.0
        _, jac[:, c, :] = nn.backward(model.net, cache, g)
    return z, jac


def evaluation_rows(model: IdsModel, splits: dict[str, Dataset]) -> list[dict]:
    return [{"split": name, "accuracy": accuracy(model, d), "n": d.n_rows} for name, d in splits.items()]
