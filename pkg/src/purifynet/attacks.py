"""Adversarial example generation against a frozen :class:`IdsModel`.

FGSM and BIM are L-infinity attacks (targeted by default), DeepFool is the
untargeted minimal-L2 linearisation attack, JSMA greedily perturbs salient
feature pairs and Carlini-Wagner L2 optimises in tanh space. Every output is
kept inside the [0, 1] feature box.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .classifier import IdsModel, input_gradient, logit_jacobian, predict

METHODS = ("FGSM", "BIM", "DeepFool", "JSMA", "CW-L2")


@dataclass
class AttackConfig:
    method: str = "FGSM"
    epsilon: float = 0.03
    iterations: Optional[int] = None
    step_size: Optional[float] = None
    overshoot: float = 0.02
    theta: float = 0.1
    max_feature_fraction: float = 0.3
    confidence: float = 0.0
    initial_const: float = 1.0
    binary_search_steps: int = 5
    cw_learning_rate: float = 0.01
    abort_early: bool = True
    targeted: bool = True
    target_label: Optional[int] = None  # None: the opposite class
    feature_mask: Optional[list[int]] = None
    seed: int = 0

    def __post_init__(self):
        names = {m.lower(): m for m in METHODS}
        names.update({"cw": "CW-L2", "cwl2": "CW-L2", "cw_l2": "CW-L2"})
        key = self.method.lower()
        if key not in names:
            raise ValueError(f"unknown attack method {self.method!r}; choose from {METHODS}")
        self.method = names[key]
        if self.iterations is None:
            self.iterations = {"BIM": 100, "DeepFool": 50, "CW-L2": 1000}.get(self.method, 1)
        if self.step_size is None and self.method == "BIM":
            self.step_size = self.epsilon / 10
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 0 or (self.iterations == 0 and self.method != "DeepFool"):
            raise ValueError("iterations must be >= 1")
        if self.method == "JSMA" and self.theta == 0:
            raise ValueError("JSMA theta must be non-zero")
        if not 0 <= self.max_feature_fraction <= 1:
            raise ValueError("max_feature_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialBatch:
    adversarial: np.ndarray
    originals: np.ndarray
    true_labels: np.ndarray
    target_labels: np.ndarray
    config: AttackConfig
    success_mask: np.ndarray
    model_checksum: str = ""

    def __post_init__(self):
        if self.adversarial.shape != self.originals.shape:
            raise nn.ShapeError(f"adversarial {self.adversarial.shape} vs originals {self.originals.shape}")
        n = self.originals.shape[0]
        for name in ("true_labels", "target_labels", "success_mask"):
            if getattr(self, name).shape != (n,):
                raise nn.ShapeError(f"{name} has shape {getattr(self, name).shape}, expected ({n},)")

    @property
    def success_rate(self) -> float:
        return float(self.success_mask.mean()) if self.success_mask.size else float("nan")

    def save(self, directory) -> list[Path]:
        """Write originals/adversarial/labels CSVs and metadata.json."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = [directory / n for n in ("originals.csv", "adversarial.csv", "labels.csv", "metadata.json")]
        np.savetxt(paths[0], self.originals, delimiter=",", fmt="%.17g")
        np.savetxt(paths[1], self.adversarial, delimiter=",", fmt="%.17g")
        with paths[2].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true_label", "target_label", "success"])
            for row in zip(self.true_labels, self.target_labels, self.success_mask.astype(int)):
                w.writerow([int(v) for v in row])
        meta = {"config": self.config.to_dict(), "model_checksum": self.model_checksum,
                "rows": int(self.originals.shape[0]), "success_rate": self.success_rate}
        paths[3].write_text(json.dumps(meta, sort_keys=True, indent=1))
        return paths

    @classmethod
    def load(cls, directory) -> "AdversarialBatch":
        directory = Path(directory)
        meta = json.loads((directory / "metadata.json").read_text())
        orig = np.loadtxt(directory / "originals.csv", delimiter=",", ndmin=2)
        adv = np.loadtxt(directory / "adversarial.csv", delimiter=",", ndmin=2)
        lab = np.loadtxt(directory / "labels.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        return cls(adv, orig, lab[:, 0], lab[:, 1], AttackConfig(**meta["config"]), lab[:, 2].astype(bool),
                   meta.get("model_checksum", ""))


def opposite_labels(labels) -> np.ndarray:
    return 1 - np.asarray(labels, dtype=np.int64)


def _finish(model: IdsModel, x: np.ndarray, adv: np.ndarray, labels, targets, cfg: AttackConfig,
            targeted: bool) -> AdversarialBatch:
    adv = np.clip(adv, 0.0, 1.0)
    pred, _ = predict(model, adv)
    success = pred == targets if targeted else pred != labels
    return AdversarialBatch(adv, x.copy(), np.asarray(labels, dtype=np.int64).copy(),
                            np.asarray(targets, dtype=np.int64).copy(), cfg, success, model.checksum())


def _mask(cfg: AttackConfig, d: int) -> np.ndarray:
    m = np.ones(d)
    if cfg.feature_mask is not None:
        m[:] = 0.0
        m[np.asarray(cfg.feature_mask, dtype=np.int64)] = 1.0
    return m


def _signed_step(model: IdsModel, x: np.ndarray, labels, targets, targeted: bool) -> np.ndarray:
    # descend the target-class loss, or ascend the true-class loss
    if targeted:
        return -np.sign(input_gradient(model, x, targets))
    return np.sign(input_gradient(model, x, labels))


def fgsm_targeted(model: IdsModel, x, target_labels, epsilon: float, true_labels=None,
                  cfg: Optional[AttackConfig] = None) -> AdversarialBatch:
    """``clip(x - epsilon * sign(grad_x L(x, target)), 0, 1)``."""
    x = nn.as_matrix(x)
    cfg = cfg or AttackConfig("FGSM", epsilon=epsilon)
    targets = np.asarray(target_labels, dtype=np.int64)
    labels = opposite_labels(targets) if true_labels is None else np.asarray(true_labels)
    step = _signed_step(model, x, labels, targets, cfg.targeted) * _mask(cfg, x.shape[1])
    return _finish(model, x, x + epsilon * step, labels, targets, cfg, cfg.targeted)


def bim(model: IdsModel, x, target_labels, epsilon: float, iterations: int = 100,
        step_size: Optional[float] = None, true_labels=None,
        cfg: Optional[AttackConfig] = None) -> AdversarialBatch:
    """Iterated FGSM with projection onto the epsilon ball and the unit box."""
    x = nn.as_matrix(x)
    step_size = epsilon / 10 if step_size is None else step_size
    if step_size > epsilon:
        raise ValueError("step_size must not exceed epsilon")
    cfg = cfg or AttackConfig("BIM", epsilon=epsilon, iterations=iterations, step_size=step_size)
    targets = np.asarray(target_labels, dtype=np.int64)
    labels = opposite_labels(targets) if true_labels is None else np.asarray(true_labels)
    mask = _mask(cfg, x.shape[1])
    lo, hi = np.maximum(x - epsilon, 0.0), np.minimum(x + epsilon, 1.0)
    adv = x.copy()
    for _ in range(iterations):
        adv = np.clip(adv + step_size * _signed_step(model, adv, labels, targets, cfg.targeted) * mask, lo, hi)
    return _finish(model, x, adv, labels, targets, cfg, cfg.targeted)


def deepfool(model: IdsModel, x, max_iterations: int = 50, overshoot: float = 0.02, true_labels=None,
             cfg: Optional[AttackConfig] = None) -> AdversarialBatch:
    """Untargeted DeepFool.

    Rows are attacked from the class the model currently predicts; a row stops
    as soon as that prediction flips. Rows that never flip are returned
    unchanged.
    """
    x = nn.as_matrix(x)
    cfg = cfg or AttackConfig("DeepFool", iterations=max_iterations, overshoot=overshoot, targeted=False)
    start, _ = predict(model, x)
    labels = start if true_labels is None else np.asarray(true_labels, dtype=np.int64)
    mask = _mask(cfg, x.shape[1])
    rows = np.arange(x.shape[0])
    r_tot = np.zeros_like(x)
    adv = x.copy()
    active = labels == start  # already-misclassified rows are left alone
    for _ in range(max_iterations):
        idx = rows[active]
        if idx.size == 0:
            break
        z, jac = logit_jacobian(model, adv[idx])
        k0 = start[idx]
        best_r = np.zeros((idx.size, x.shape[1]))
        best_dist = np.full(idx.size, np.inf)
        for k in range(z.shape[1]):
            w = (jac[:, k, :] - jac[np.arange(idx.size), k0, :]) * mask
            f = z[:, k] - z[np.arange(idx.size), k0]
            norm = np.linalg.norm(w, axis=1)
            ok = (k != k0) & (norm > 0)
            dist = np.where(ok, np.abs(f) / np.where(ok, norm, 1.0), np.inf)
            better = dist < best_dist
            r = (np.abs(f) / np.where(ok, norm, 1.0) ** 2)[:, None] * w
            best_r = np.where(better[:, None], r, best_r)
            best_dist = np.where(better, dist, best_dist)
        stuck = ~np.isfinite(best_dist)
        r_tot[idx] += best_r
        adv[idx] = np.clip(x[idx] + (1.0 + overshoot) * r_tot[idx], 0.0, 1.0)
        pred, _ = predict(model, adv[idx])
        active[idx] = (pred == start[idx]) & ~stuck
    pred, _ = predict(model, adv)
    flipped = pred != start
    adv = np.where((flipped | (labels != start))[:, None], adv, x)
    return _finish(model, x, adv, labels, labels, cfg, targeted=False)


def jsma(model: IdsModel, x, target_labels, theta: float = 0.1, max_feature_fraction: float = 0.3,
         true_labels=None, cfg: Optional[AttackConfig] = None) -> AdversarialBatch:
    """Jacobian saliency map attack over feature pairs.

    Features move by ``theta`` per selection; a feature leaves the search
    domain once it saturates at the box boundary. At most
    ``ceil(max_feature_fraction * d)`` distinct features are modified.
    """
    if theta == 0:
        raise ValueError("theta must be non-zero")
    x = nn.as_matrix(x)
    cfg = cfg or AttackConfig("JSMA", theta=theta, max_feature_fraction=max_feature_fraction)
    targets = np.asarray(target_labels, dtype=np.int64)
    labels = opposite_labels(targets) if true_labels is None else np.asarray(true_labels)
    n, d = x.shape
    budget = math.ceil(max_feature_fraction * d - 1e-12)
    increase = theta > 0
    adv = x.copy()
    modified = np.zeros((n, d), dtype=bool)
    allowed = np.broadcast_to(_mask(cfg, d) > 0, (n, d)).copy()
    iu, ju = np.triu_indices(d, k=1)
    pred, _ = predict(model, adv)
    active = (pred != targets) & (budget > 0)
    # each selection saturates or advances a feature by |theta|
    max_rounds = int(np.ceil(1.0 / abs(theta))) * d + 1
    for _ in range(max_rounds):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        _, jac = logit_jacobian(model, adv[idx])
        rows = np.arange(idx.size)
        tgt = targets[idx]
        d_target = jac[rows, tgt, :]
        d_other = jac.sum(axis=1) - d_target
        room = adv[idx] < 1.0 if increase else adv[idx] > 0.0
        domain = room & allowed[idx]
        a = d_target[:, iu] + d_target[:, ju]
        b = d_other[:, iu] + d_other[:, ju]
        valid = domain[:, iu] & domain[:, ju]
        new = (~modified[idx][:, iu]).astype(int) + (~modified[idx][:, ju]).astype(int)
        used = modified[idx].sum(axis=1)
        valid &= used[:, None] + new <= budget
        if increase:
            score = np.where((a > 0) & (b < 0), -a * b, 0.0)
        else:
            score = np.where((a < 0) & (b > 0), -a * b, 0.0)
        score = np.where(valid, score, -np.inf)
        best = score.argmax(axis=1)
        ok = np.isfinite(score[rows, best])
        sel = idx[ok]
        p, q = iu[best[ok]], ju[best[ok]]
        for cols in (p, q):
            adv[sel, cols] = np.clip(adv[sel, cols] + theta, 0.0, 1.0)
            modified[sel, cols] = True
        active[idx[~ok]] = False
        pred, _ = predict(model, adv[sel])
        active[sel] = pred != targets[sel]
    return _finish(model, x, adv, labels, targets, cfg, targeted=True)


def carlini_wagner_l2(model: IdsModel, x, target_labels, cfg: Optional[AttackConfig] = None,
                      true_labels=None) -> AdversarialBatch:
    """Targeted Carlini-Wagner L2 with per-row binary search over the constant.

    Returns the lowest-L2 successful example per row, or the original row when
    every constant fails.
    """
    x = nn.as_matrix(x)
    cfg = cfg or AttackConfig("CW-L2")
    targets = np.asarray(target_labels, dtype=np.int64)
    labels = opposite_labels(targets) if true_labels is None else np.asarray(true_labels)
    n = x.shape[0]
    rows = np.arange(n)
    mask = _mask(cfg, x.shape[1])
    w0 = np.arctanh(np.clip(2.0 * x - 1.0, -1.0, 1.0) * (1.0 - 1e-6))
    x_box = (np.tanh(w0) + 1.0) / 2.0
    kappa = cfg.confidence

    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    const = np.full(n, float(cfg.initial_const))
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()

    def consider(adv, z):
        nonlocal best_l2, best_adv
        l2 = np.sum((adv - x) ** 2, axis=1)
        hit = (z.argmax(axis=1) == targets) & (l2 < best_l2)
        best_l2 = np.where(hit, l2, best_l2)
        best_adv[hit] = adv[hit]
        return z.argmax(axis=1) == targets

    consider(x, nn.forward(model.net, x).output)
    for _ in range(cfg.binary_search_steps):
        w = w0.copy()
        opt = nn.OptimizerState("adam", cfg.cw_learning_rate)
        found = np.zeros(n, dtype=bool)
        check_every = max(cfg.iterations // 10, 1)
        prev = np.inf
        for it in range(cfg.iterations):
            adv = (np.tanh(w) + 1.0) / 2.0
            cache = nn.forward(model.net, adv)
            z = cache.output
            found |= consider(adv, z)
            z_t = z[rows, targets]
            other = z.copy()
            other[rows, targets] = -np.inf
            j = other.argmax(axis=1)
            margin = z[rows, j] - z_t
            if cfg.abort_early and it % check_every == 0:
                # stop once the batch objective stalls, as in the reference attack
                total = float(np.sum(const * np.maximum(margin, -kappa)) + np.sum((adv - x_box) ** 2))
                if total > 0.9999 * prev:
                    break
                prev = total
            g_z = np.zeros_like(z)
            on = margin > -kappa
            g_z[rows[on], j[on]] = const[on]
            g_z[rows[on], targets[on]] = -const[on]
            _, g_adv = nn.backward(model.net, cache, g_z)
            g_adv = g_adv + 2.0 * (adv - x_box)
            g_w = g_adv * (1.0 - np.tanh(w) ** 2) / 2.0 * mask
            opt_params = [w]
            nn.optimizer_step(opt_params, [g_w], opt)
        adv = (np.tanh(w) + 1.0) / 2.0
        found |= consider(adv, nn.forward(model.net, adv).output)
        upper = np.where(found, np.minimum(upper, const), upper)
        lower = np.where(found, lower, np.maximum(lower, const))
        const = np.where(upper < 1e9, (lower + upper) / 2.0, const * 10.0)
    return _finish(model, x, best_adv, labels, targets, cfg, targeted=True)


def run_attack(model: IdsModel, x, true_labels, cfg: AttackConfig) -> AdversarialBatch:
    """Dispatch on ``cfg.method``; targets default to the opposite class."""
    x = nn.as_matrix(x)
    labels = np.asarray(true_labels, dtype=np.int64)
    if cfg.target_label is None:
        targets = opposite_labels(labels)
    else:
        targets = np.full(labels.shape, int(cfg.target_label))
    if cfg.method == "FGSM":
        return fgsm_targeted(model, x, targets, cfg.epsilon, labels, cfg)
    if cfg.method == "BIM":
        return bim(model, x, targets, cfg.epsilon, cfg.iterations, cfg.step_size, labels, cfg)
    if cfg.method == "DeepFool":
        return deepfool(model, x, cfg.iterations, cfg.overshoot, labels, cfg)
    if cfg.method == "JSMA":
        return jsma(model, x, targets, cfg.theta, cfg.max_feature_fraction, labels, cfg)
    return carlini_wagner_l2(model, x, targets, cfg, labels)
