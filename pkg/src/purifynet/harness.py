"""Purification experiments: per-step sweeps, optimal step search, ablation
tables, multi-seed aggregation and report files."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn
from .attacks import AdversarialBatch, AttackConfig, run_attack
from .classifier import IdsModel, predict
from .datasets import Dataset
from .diffusion import DiffusionModel, purify

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS = ("acc_train", "acc_test", "acc_adv", "recon_mse_train", "recon_mse_test", "recon_mse_adv")
CSV_COLUMNS = ("t", "beta_t", "sigma2_t", *METRICS)


@dataclass
class SweepRow:
    t: int
    beta_t: float
    sigma2_t: float
    acc_train: float
    acc_test: float
    acc_adv: float
    recon_mse_train: float
    recon_mse_test: float
    recon_mse_adv: float
    recon_mse_adv_vs_clean: float = 0.0


@dataclass
class SweepResult:
    rows: list[SweepRow]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [r.t for r in self.rows]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("sweep rows must have strictly increasing t")
        for r in self.rows:
            if not all(math.isfinite(getattr(r, f.name)) for f in fields(SweepRow)):
                raise ValueError(f"non-finite metric in sweep row t={r.t}")

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def row_at(self, t: int) -> SweepRow:
        for r in self.rows:
            if r.t == t:
                return r
        raise KeyError(t)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "metadata": self.metadata,
                "rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, doc: dict) -> "SweepResult":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported sweep schema_version {doc.get('schema_version')!r}")
        return cls([SweepRow(**r) for r in doc["rows"]], doc.get("metadata", {}))


@dataclass
class OptimalStep:
    t_star: int
    acc_adv_at_t_star: float
    acc_test_at_t_star: float
    sigma2_at_t_star: float
    beta_at_t_star: float


@dataclass
class RunAggregate:
    t: list[int]
    mean: dict[str, list[float]]
    std: dict[str, list[float]]
    n_runs: int
    metadata: dict = field(default_factory=dict)


def default_t_grid(T: int) -> list[int]:
    """Every step up to 100, stride 10 up to 600, stride 50 up to ``T``."""
    grid = set(range(0, min(T, 100) + 1))
    grid.update(range(110, min(T, 600) + 1, 10))
    grid.update(range(650, T + 1, 50))
    return sorted(grid)


def _step_values(diffusion: DiffusionModel, t: int) -> tuple[float, float]:
    if t == 0:
        return 0.0, 0.0
    s = diffusion.schedule
    return s.beta_at(t), 1.0 - s.alpha_bar_at(t)


def _purified_metrics(diffusion: DiffusionModel, ids: IdsModel, x: np.ndarray, labels: np.ndarray,
                      t: int, seed: int, reference: Optional[np.ndarray] = None) -> tuple[float, float, float]:
    # the same noise stream is replayed for every split at a given t
    out = purify(diffusion, x, t, nn.make_rng([seed, t]))
    pred, _ = predict(ids, out)
    acc = float(np.mean(pred == labels)) if len(labels) else 0.0
    recon = float(np.mean((out - x) ** 2))
    ref = float(np.mean((out - reference) ** 2)) if reference is not None else recon
    return acc, recon, ref


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _check_grid(diffusion: DiffusionModel, t_grid: Sequence[int]) -> list[int]:
    grid = sorted({int(t) for t in t_grid})
    if not grid:
        raise ValueError("t_grid is empty")
    if grid[0] < 0 or grid[-1] > diffusion.schedule.T:
        raise ValueError(f"t_grid must lie within [0, {diffusion.schedule.T}]")
    return grid


def clean_curves(diffusion: DiffusionModel, ids: IdsModel, clean_train: Dataset, clean_test: Dataset,
                 t_grid: Sequence[int], seed: int = 0, workers: int = 1) -> dict[int, tuple[float, ...]]:
    """Per-t (acc_train, acc_test, recon_train, recon_test); attack independent."""
    _check_widths(diffusion, ids, clean_train, clean_test)
    grid = _check_grid(diffusion, t_grid)

    def one(t):
        a_tr, r_tr, _ = _purified_metrics(diffusion, ids, clean_train.features, clean_train.labels, t, seed)
        a_te, r_te, _ = _purified_metrics(diffusion, ids, clean_test.features, clean_test.labels, t, seed)
        return a_tr, a_te, r_tr, r_te

    return dict(zip(grid, _map(one, grid, workers)))


def _check_widths(diffusion: DiffusionModel, ids: IdsModel, *data: Dataset) -> None:
    widths = {diffusion.n_features, ids.n_features, *(d.n_features for d in data)}
    if len(widths) != 1:
        raise nn.ShapeError(f"feature widths disagree: diffusion {diffusion.n_features}, classifier "
                            f"{ids.n_features}, data {[d.n_features for d in data]}")


def purification_sweep(diffusion: DiffusionModel, ids: IdsModel, clean_train: Dataset, clean_test: Dataset,
                       adv: AdversarialBatch, t_grid: Sequence[int], seed: int = 0, workers: int = 1,
                       clean: Optional[dict] = None) -> SweepResult:
    """Purify train, test and adversarial sets at every ``t`` in ``t_grid``.

    Reconstruction losses compare each purifier output with its own input.
    ``clean`` takes precomputed :func:`clean_curves` output.
    """
    _check_widths(diffusion, ids, clean_train, clean_test)
    if adv.adversarial.shape[1] != ids.n_features:
        raise nn.ShapeError(f"adversarial batch has {adv.adversarial.shape[1]} features, "
                            f"classifier expects {ids.n_features}")
    grid = _check_grid(diffusion, t_grid)
    if clean is None:
        clean = clean_curves(diffusion, ids, clean_train, clean_test, grid, seed, workers)
    missing = [t for t in grid if t not in clean]
    if missing:
        raise ValueError(f"clean curves lack steps {missing[:5]}")

    def one(t):
        return _purified_metrics(diffusion, ids, adv.adversarial, adv.true_labels, t, seed, adv.originals)

    adv_metrics = _map(one, grid, workers)
    rows = []
    for t, (a_adv, r_adv, r_vs_clean) in zip(grid, adv_metrics):
        a_tr, a_te, r_tr, r_te = clean[t]
        beta, sigma2 = _step_values(diffusion, t)
        rows.append(SweepRow(t, beta, sigma2, a_tr, a_te, a_adv, r_tr, r_te, r_adv, r_vs_clean))
    meta = {
        "schedule": diffusion.schedule.to_dict(),
        "T": diffusion.schedule.T,
        "attack": adv.config.to_dict(),
        "seed": seed,
        "diffusion_checksum": diffusion.checksum(),
        "classifier_checksum": ids.checksum(),
        "n_train": clean_train.n_rows,
        "n_test": clean_test.n_rows,
        "n_adv": int(adv.adversarial.shape[0]),
    }
    return SweepResult(rows, meta)


def find_optimal_step(sweep: SweepResult) -> OptimalStep:
    """Step with the highest adversarial accuracy; ties go to the smallest t."""
    rows = [r for r in sweep.rows if r.t >= 1]
    if not rows:
        raise ValueError("sweep has no rows with t >= 1")
    best = min(rows, key=lambda r: (-r.acc_adv, r.t))
    return OptimalStep(best.t, best.acc_adv, best.acc_test, best.sigma2_t, best.beta_t)


@dataclass
class AlignmentTable:
    rows: list[dict]
    ratios: list[dict]


def sigma_alignment(sweeps: Sequence[SweepResult]) -> AlignmentTable:
    """Optimal steps of sweeps with different ``T`` on the composed-variance axis."""
    if len(sweeps) < 2:
        raise ValueError("need at least two sweeps")
    Ts = [s.metadata.get("T") for s in sweeps]
    if len(set(Ts)) != len(Ts):
        raise ValueError(f"sweeps must have distinct T, got {Ts}")
    attacks = [json.dumps(s.metadata.get("attack"), sort_keys=True) for s in sweeps]
    if len(set(attacks)) != 1:
        raise ValueError("sweeps were run against different attack configurations")
    rows = []
    for s in sweeps:
        opt = find_optimal_step(s)
        rows.append({"T": s.metadata["T"], "t_star": opt.t_star, "beta_star": opt.beta_at_t_star,
                     "sigma2_star": opt.sigma2_at_t_star, "acc_adv_star": opt.acc_adv_at_t_star})
    ratios = []
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            a, b = rows[i]["sigma2_star"], rows[j]["sigma2_star"]
            ratios.append({"T_a": rows[i]["T"], "T_b": rows[j]["T"], "ratio": a / b if b else float("inf")})
    return AlignmentTable(rows, ratios)


def epsilon_study(ids: IdsModel, diffusion: DiffusionModel, clean_train: Dataset, clean_test: Dataset,
                  eps_grid: Sequence[float], t_grid: Sequence[int], seed: int = 0, workers: int = 1,
                  clean: Optional[dict] = None) -> tuple[list[dict], list[SweepResult]]:
    """Targeted FGSM at every epsilon, one sweep each; returns optimum rows and sweeps."""
    if not len(eps_grid):
        raise ValueError("eps_grid is empty")
    if clean is None:
        clean = clean_curves(diffusion, ids, clean_train, clean_test, t_grid, seed, workers)
    table, sweeps = [], []
    for eps in eps_grid:
        batch = run_attack(ids, clean_test.features, clean_test.labels,
                           AttackConfig("FGSM", epsilon=float(eps), seed=seed))
        sweep = purification_sweep(diffusion, ids, clean_train, clean_test, batch, t_grid, seed, workers, clean)
        opt = find_optimal_step(sweep)
        table.append({"epsilon": float(eps), "t_star": opt.t_star, "acc_adv_star": opt.acc_adv_at_t_star,
                      "acc_test_star": opt.acc_test_at_t_star, "sigma2_star": opt.sigma2_at_t_star,
                      "acc_adv_0": sweep.rows[0].acc_adv if sweep.rows[0].t == 0 else float("nan")})
        sweeps.append(sweep)
    return table, sweeps


def attack_benchmark(ids: IdsModel, diffusion: DiffusionModel, clean_train: Dataset, clean_test: Dataset,
                     attack_configs: Sequence[AttackConfig], t_grid: Sequence[int], seed: int = 0,
                     workers: int = 1, clean: Optional[dict] = None,
                     batches: Optional[Sequence[AdversarialBatch]] = None) -> tuple[list[dict], list[SweepResult]]:
    """One sweep per attack against shared clean baselines."""
    if clean is None:
        clean = clean_curves(diffusion, ids, clean_train, clean_test, t_grid, seed, workers)
    table, sweeps = [], []
    for i, cfg in enumerate(attack_configs):
        batch = batches[i] if batches is not None else run_attack(ids, clean_test.features,
                                                                  clean_test.labels, cfg)
        sweep = purification_sweep(diffusion, ids, clean_train, clean_test, batch, t_grid, seed, workers, clean)
        opt = find_optimal_step(sweep)
        acc0 = float(np.mean(predict(ids, batch.adversarial)[0] == batch.true_labels))
        table.append({"method": cfg.method, "t_star": opt.t_star, "acc_adv_star": opt.acc_adv_at_t_star,
                      "acc_test_star": opt.acc_test_at_t_star, "sigma2_star": opt.sigma2_at_t_star,
                      "acc_adv_0": acc0, "success_rate": batch.success_rate})
        sweeps.append(sweep)
    return table, sweeps


def aggregate_runs(sweeps: Sequence[SweepResult]) -> RunAggregate:
    """Per-t mean and population standard deviation across runs."""
    if not sweeps:
        raise ValueError("no sweeps to aggregate")
    grid = [r.t for r in sweeps[0].rows]
    for s in sweeps[1:]:
        if [r.t for r in s.rows] != grid:
            raise ValueError("sweeps use different t grids")
    names = ["beta_t", "sigma2_t", *METRICS, "recon_mse_adv_vs_clean"]
    mean, std = {}, {}
    for name in names:
        stack = np.stack([s.column(name) for s in sweeps])
        mean[name] = stack.mean(axis=0).tolist()
        std[name] = stack.std(axis=0).tolist()
    meta = {"std": "population", "runs": [s.metadata for s in sweeps]}
    return RunAggregate(grid, mean, std, len(sweeps), meta)


def mean_sweep(agg: RunAggregate, metadata: Optional[dict] = None) -> SweepResult:
    """The per-t mean curves of an aggregate as a sweep (for optimum search)."""
    names = [f.name for f in fields(SweepRow) if f.name != "t"]
    rows = [SweepRow(t, **{n: agg.mean[n][i] for n in names}) for i, t in enumerate(agg.t)]
    meta = dict(metadata or {})
    meta["n_runs"] = agg.n_runs
    return SweepResult(rows, meta)


def check_recon_gap(sweeps: Sequence[SweepResult]) -> bool:
    """Soft check: mean adversarial reconstruction loss >= mean test loss at
    every t >= 1. Logs a warning instead of raising."""
    if len(sweeps) < 3:
        log.warning("reconstruction-gap check wants >= 3 runs, got %d", len(sweeps))
    agg = aggregate_runs(sweeps)
    bad = [t for t, a, b in zip(agg.t, agg.mean["recon_mse_adv"], agg.mean["recon_mse_test"]) if t and a < b]
    if bad:
        log.warning("adversarial reconstruction loss below test loss at t=%s", bad[:10])
    return not bad


# ---------------------------------------------------------------------------
# reports

def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def emit_report(result: SweepResult, path, fmt: str = "csv", config: Optional[dict] = None) -> list[Path]:
    """Write a sweep as CSV (plus ``.meta.json`` sidecar) or as one JSON document."""
    path = Path(path)
    if not result.rows:
        raise ValueError("refusing to write an empty sweep")
    meta = dict(result.metadata)
    if config is not None:
        meta["config"] = config
    if fmt == "json":
        doc = SweepResult(result.rows, meta).to_dict()
        return [_write(path, json.dumps(doc, sort_keys=True, indent=1, default=_json_default))]
    if fmt != "csv":
        raise ValueError(f"unknown report format {fmt!r}")
    text = _csv_text(CSV_COLUMNS, ([getattr(r, c) for c in CSV_COLUMNS] for r in result.rows))
    side = path.with_name(path.name + ".meta.json")
    return [_write(path, text),
            _write(side, json.dumps({"schema_version": SCHEMA_VERSION, "metadata": meta},
                                    sort_keys=True, indent=1, default=_json_default))]


def load_report(path) -> SweepResult:
    return SweepResult.from_dict(json.loads(Path(path).read_text()))


def read_csv_report(path, metadata: Optional[dict] = None) -> SweepResult:
    """Parse a sweep CSV written by :func:`emit_report`."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [SweepRow(int(r[0]), *(float(v) for v in r[1:])) for r in reader if r]
    return SweepResult(rows, metadata or {})


def emit_aggregate(agg: RunAggregate, path, fmt: str = "csv") -> list[Path]:
    path = Path(path)
    names = list(agg.mean)
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, **asdict(agg)}
        return [_write(path, json.dumps(doc, sort_keys=True, indent=1, default=_json_default))]
    header = ["t"] + [f"{n}_{k}" for n in names for k in ("mean", "std")]
    rows = ([t] + [v for n in names for v in (agg.mean[n][i], agg.std[n][i])] for i, t in enumerate(agg.t))
    return [_write(path, _csv_text(header, rows))]


def emit_table(rows: Sequence[dict], path, fmt: str = "csv", metadata: Optional[dict] = None) -> list[Path]:
    """Write a list of flat dicts (optimum tables, alignment tables)."""
    path = Path(path)
    if not rows:
        raise ValueError("refusing to write an empty table")
    if fmt == "json":
        doc = {"schema_version": SCHEMA_VERSION, "metadata": metadata or {}, "rows": list(rows)}
        return [_write(path, json.dumps(doc, sort_keys=True, indent=1, default=_json_default))]
    header = list(rows[0])
    return [_write(path, _csv_text(header, ([r[k] for k in header] for r in rows)))]
