"""``purifynet`` command line: preprocess, train, attack, sweep, report.

Every command works inside one run directory under ``output_dir``. The first
``preprocess`` creates it (named by ``run_name`` or a UTC timestamp); later
commands reuse ``--run`` or the most recently modified run. A
``manifest.json`` in the run directory lists every artifact with its sha256.

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, datasets, harness, nn
from .attacks import AdversarialBatch, AttackConfig, run_attack
from .classifier import IdsModel, evaluation_rows, train_classifier
from .config import ConfigError, ExperimentConfig, load_config
from .diffusion import DiffusionModel, train_diffusion

log = logging.getLogger("purifynet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ENV_OUTPUT_DIR = "PURIFYNET_OUTPUT_DIR"


class UsageError(Exception):
    pass


class MissingArtifacts(RuntimeError):
    def __init__(self, missing: list[Path]):
        self.missing = missing
        super().__init__("missing artifacts:\n  " + "\n  ".join(str(p) for p in missing))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run directory

class Run:
    def __init__(self, root: Path, cfg: ExperimentConfig):
        self.root = root
        self.cfg = cfg

    data = property(lambda self: self.root / "data")
    models = property(lambda self: self.root / "models")
    attacks = property(lambda self: self.root / "attacks")
    sweeps = property(lambda self: self.root / "sweeps")
    reports = property(lambda self: self.root / "reports")

    def classifier_path(self) -> Path:
        return self.models / "classifier.json"

    def diffusion_path(self, T: int) -> Path:
        return self.models / f"diffusion_T{T}.json"

    def batch_dir(self, label: str) -> Path:
        return self.attacks / label

    def register(self, paths) -> None:
        """Record artifacts (relative path -> sha256) in the manifest."""
        manifest_path = self.root / "manifest.json"
        doc = json.loads(manifest_path.read_text()) if manifest_path.exists() else {"artifacts": {}}
        for p in paths:
            p = Path(p)
            doc["artifacts"][p.relative_to(self.root).as_posix()] = datasets.file_sha256(p)
        doc["artifacts"] = dict(sorted(doc["artifacts"].items()))
        manifest_path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir)


def echo_config(cfg: ExperimentConfig) -> dict:
    # location fields are left out so relocated reruns echo identical bytes
    return cfg.model_dump(mode="json", exclude={"output_dir", "run_name"})


def resolve_run(cfg: ExperimentConfig, run: Optional[str], create: bool) -> Run:
    root = output_root(cfg)
    name = run or cfg.run_name
    if name:
        path = root / name
    elif create:
        path = root / time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    else:
        runs = [p for p in root.glob("*") if (p / "manifest.json").exists()] if root.exists() else []
        if not runs:
            raise MissingArtifacts([root / "<run>" / "manifest.json"])
        path = max(runs, key=lambda p: ((p / "manifest.json").stat().st_mtime, p.name))
    if not create and not (path / "manifest.json").exists():
        raise MissingArtifacts([path / "manifest.json"])
    path.mkdir(parents=True, exist_ok=True)
    r = Run(path, cfg)
    cfg_path = path / "config.json"
    cfg_path.write_text(json.dumps(echo_config(cfg), indent=1, sort_keys=True) + "\n")
    r.register([cfg_path])
    return r


def require(paths) -> None:
    missing = [Path(p) for p in paths if not Path(p).exists()]
    if missing:
        raise MissingArtifacts(missing)


def _write_loss_log(path: Path, history) -> Path:
    path.write_text("epoch,loss\n" + "".join(f"{e},{l!r}\n" for e, l in history))
    return path


def _json_dump(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_preprocess(run: Run) -> list[Path]:
    ds = run.cfg.dataset
    rng = nn.make_rng(ds.seed)
    encoder = None
    if ds.kind == "synthetic":
        s = ds.synthetic
        params = s.model_dump(exclude={"n_train", "n_test", "n_features"})
        train = datasets.make_synthetic(s.n_train, s.n_features, ds.seed, **params)
        test = datasets.make_synthetic(s.n_test, s.n_features, ds.seed + 1, **params)
    else:
        schema = (datasets.FeatureSchema.from_json(ds.schema_path) if ds.schema_path
                  else datasets.BUILTIN_SCHEMAS[ds.kind])
        train_rec = datasets.load_csv(ds.train_path, schema)
        encoder = datasets.fit_encoder(train_rec, schema)
        full = datasets.transform(train_rec, encoder)
        if ds.test_path:
            train, test = full, datasets.transform(datasets.load_csv(ds.test_path, schema), encoder)
        else:
            train, test = datasets.split(full, [1.0 - ds.test_fraction, ds.test_fraction], rng)
        if ds.subsample_n and ds.subsample_n < train.n_rows:
            train = datasets.subsample(train, ds.subsample_n, True, rng)
        if ds.test_subsample_n and ds.test_subsample_n < test.n_rows:
            test = datasets.subsample(test, ds.test_subsample_n, True, rng)
    paths = datasets.save_dataset(train, run.data, "train", encoder)
    paths += datasets.save_dataset(test, run.data, "test", encoder)
    run.register(paths)
    for name, d in (("train", train), ("test", test)):
        print(f"{name}: {d.n_rows} rows, {d.n_features} features, "
              f"{int(d.labels.sum())} malicious")
    return paths


def _load_splits(run: Run):
    require([run.data / "train.json", run.data / "test.json"])
    return datasets.load_dataset(run.data, "train"), datasets.load_dataset(run.data, "test")


def cmd_train(run: Run, which: str = "all") -> list[Path]:
    train, test = _load_splits(run)
    paths = []
    if which in ("classifier", "all"):
        t0 = time.perf_counter()
        model, history = train_classifier(train, run.cfg.classifier.train_config())
        run.models.mkdir(parents=True, exist_ok=True)
        model.save(run.classifier_path())
        paths += [run.classifier_path(), _write_loss_log(run.models / "classifier_loss.csv", history)]
        rows = evaluation_rows(model, {"train": train, "test": test})
        paths.append(_json_dump(run.models / "classifier_eval.json", rows))
        log.info("classifier trained in %.1fs", time.perf_counter() - t0)
        for r in rows:
            print(f"classifier {r['split']}: accuracy {r['accuracy']:.4f}")
    if which in ("diffusion", "all"):
        dcfg = run.cfg.diffusion
        for T in dcfg.all_T():
            t0 = time.perf_counter()
            model, history = train_diffusion(train, dcfg.make_schedule(T), dcfg.train_config())
            model.posterior = dcfg.posterior
            run.models.mkdir(parents=True, exist_ok=True)
            model.save(run.diffusion_path(T))
            paths += [run.diffusion_path(T), _write_loss_log(run.models / f"diffusion_T{T}_loss.csv", history)]
            log.info("diffusion T=%d trained in %.1fs", T, time.perf_counter() - t0)
            print(f"diffusion T={T}: final loss {history[-1][1]:.5f}" if history else f"diffusion T={T} trained")
    run.register(paths)
    return paths


def epsilon_labels(cfg: ExperimentConfig) -> dict[float, str]:
    """Batch label used for each epsilon of the epsilon study. A configured
    attack with the identical FGSM config is reused instead of regenerated."""
    configured = {a.label: a.to_attack_config() for a in cfg.attacks}
    out = {}
    for eps in cfg.sweep.eps_grid:
        want = AttackConfig("FGSM", epsilon=float(eps))
        out[eps] = next((label for label, c in configured.items() if c == want), f"eps-{eps:g}")
    return out


def attack_jobs(cfg: ExperimentConfig) -> list[tuple[str, AttackConfig]]:
    """Configured attacks plus one targeted FGSM per epsilon of the epsilon study."""
    jobs = [(a.label, a.to_attack_config()) for a in cfg.attacks]
    known = {label for label, _ in jobs}
    for eps, label in epsilon_labels(cfg).items():
        if label not in known:
            jobs.append((label, AttackConfig("FGSM", epsilon=float(eps))))
            known.add(label)
    return jobs


def sweep_labels(cfg: ExperimentConfig, T: int) -> list[str]:
    """Batches swept with the step-``T`` model; extra T values may sweep a subset."""
    labels = [label for label, _ in attack_jobs(cfg)]
    if T == cfg.diffusion.schedule.T or cfg.sweep.alignment_attacks is None:
        return labels
    return [label for label in labels if label in cfg.sweep.alignment_attacks]


def cmd_attack(run: Run) -> list[Path]:
    _, test = _load_splits(run)
    require([run.classifier_path()])
    model = IdsModel.load(run.classifier_path())
    paths = []
    for label, acfg in attack_jobs(run.cfg):
        t0 = time.perf_counter()
        batch = run_attack(model, test.features, test.labels, acfg)
        paths += batch.save(run.batch_dir(label))
        print(f"attack {label}: success rate {batch.success_rate:.4f} ({time.perf_counter() - t0:.1f}s)")
    run.register(paths)
    return paths


def _sweep_name(T: int, label: str, seed: Optional[int] = None) -> str:
    return f"T{T}_{label}" + ("" if seed is None else f"_seed{seed}")


def _sweep_inputs(run: Run) -> list[Path]:
    need = [run.data / "train.json", run.data / "test.json", run.classifier_path()]
    need += [run.diffusion_path(T) for T in run.cfg.diffusion.all_T()]
    need += [run.batch_dir(label) / "metadata.json" for label, _ in attack_jobs(run.cfg)]
    return need


def cmd_sweep(run: Run, threads: Optional[int] = None) -> list[Path]:
    cfg = run.cfg
    require(_sweep_inputs(run))
    train, test = _load_splits(run)
    if cfg.sweep.train_rows and cfg.sweep.train_rows < train.n_rows:
        train = datasets.subsample(train, cfg.sweep.train_rows, True, nn.make_rng(cfg.dataset.seed))
    ids = IdsModel.load(run.classifier_path())
    batches = {label: AdversarialBatch.load(run.batch_dir(label)) for label, _ in attack_jobs(cfg)}
    workers = min(threads, cfg.sweep.workers) if threads else cfg.sweep.workers
    fmt = cfg.sweep.format
    ext = "json" if fmt == "json" else "csv"
    config_echo = echo_config(cfg)
    paths = []
    ok = True
    for T in cfg.diffusion.all_T():
        dm = DiffusionModel.load(run.diffusion_path(T))
        grid = cfg.sweep.grid(T)
        for seed in cfg.sweep.seeds:
            t0 = time.perf_counter()
            clean = harness.clean_curves(dm, ids, train, test, grid, seed, workers)
            for label in sweep_labels(cfg, T):
                batch = batches[label]
                sweep = harness.purification_sweep(dm, ids, train, test, batch, grid, seed, workers, clean)
                sweep.metadata["attack_label"] = label
                paths += harness.emit_report(sweep, run.sweeps / f"{_sweep_name(T, label, seed)}.{ext}", fmt,
                                             config_echo)
            log.info("T=%d seed=%d swept in %.1fs", T, seed, time.perf_counter() - t0)
        for label in sweep_labels(cfg, T):
            runs = [harness.load_report(p) if fmt == "json" else _read_sweep(p)
                    for p in (run.sweeps / f"{_sweep_name(T, label, s)}.{ext}" for s in cfg.sweep.seeds)]
            agg = harness.aggregate_runs(runs)
            paths += harness.emit_aggregate(agg, run.sweeps / f"{_sweep_name(T, label)}_aggregate.{ext}", fmt)
            ok &= harness.check_recon_gap(runs)
            opt = harness.find_optimal_step(harness.mean_sweep(agg, runs[0].metadata))
            print(f"T={T} {label}: t*={opt.t_star} acc_adv={opt.acc_adv_at_t_star:.3f} "
                  f"acc_test={opt.acc_test_at_t_star:.3f} sigma2*={opt.sigma2_at_t_star:.4f}")
    if not ok:
        log.warning("reconstruction-gap soft check did not hold; see warnings above")
    run.register(paths)
    return paths


def _read_sweep(path: Path) -> harness.SweepResult:
    side = json.loads(path.with_name(path.name + ".meta.json").read_text())
    return harness.read_csv_report(path, side["metadata"])


def _mean_sweeps(run: Run, T: int, label: str) -> harness.SweepResult:
    cfg = run.cfg
    ext = "json" if cfg.sweep.format == "json" else "csv"
    runs = []
    for s in cfg.sweep.seeds:
        p = run.sweeps / f"{_sweep_name(T, label, s)}.{ext}"
        require([p])
        runs.append(harness.load_report(p) if ext == "json" else _read_sweep(p))
    return harness.mean_sweep(harness.aggregate_runs(runs), runs[0].metadata)


def cmd_report(run: Run) -> list[Path]:
    cfg = run.cfg
    ext = "json" if cfg.sweep.format == "json" else "csv"
    Ts = cfg.diffusion.all_T()
    require([run.sweeps / f"{_sweep_name(T, label, s)}.{ext}"
             for T in Ts for label in sweep_labels(cfg, T) for s in cfg.sweep.seeds])
    meta = {"config": echo_config(cfg), "seeds": cfg.sweep.seeds}
    paths = []
    T0 = Ts[0]
    bench = []
    for a in cfg.attacks:
        sweep = _mean_sweeps(run, T0, a.label)
        opt = harness.find_optimal_step(sweep)
        bench.append({"attack": a.label, "method": sweep.metadata["attack"]["method"], "T": T0,
                      "t_star": opt.t_star, "acc_adv_0": sweep.rows[0].acc_adv if sweep.rows[0].t == 0 else "",
                      "acc_adv_star": opt.acc_adv_at_t_star, "acc_test_star": opt.acc_test_at_t_star,
                      "sigma2_star": opt.sigma2_at_t_star, "beta_star": opt.beta_at_t_star})
    if bench:
        paths += harness.emit_table(bench, run.reports / f"attack_benchmark.{ext}", cfg.sweep.format, meta)
    eps_rows = []
    for eps, label in epsilon_labels(cfg).items():
        sweep = _mean_sweeps(run, T0, label)
        opt = harness.find_optimal_step(sweep)
        eps_rows.append({"epsilon": float(eps), "T": T0, "t_star": opt.t_star,
                         "acc_adv_0": sweep.rows[0].acc_adv if sweep.rows[0].t == 0 else "",
                         "acc_adv_star": opt.acc_adv_at_t_star, "acc_test_star": opt.acc_test_at_t_star,
                         "sigma2_star": opt.sigma2_at_t_star})
    if eps_rows:
        paths += harness.emit_table(eps_rows, run.reports / f"epsilon_study.{ext}", cfg.sweep.format, meta)
    if len(Ts) >= 2:
        align_rows, ratio_rows = [], []
        shared = [label for label in sweep_labels(cfg, T0) if all(label in sweep_labels(cfg, T) for T in Ts)]
        for label in shared:
            table = harness.sigma_alignment([_mean_sweeps(run, T, label) for T in Ts])
            align_rows += [{"attack": label, **r} for r in table.rows]
            ratio_rows += [{"attack": label, **r} for r in table.ratios]
        paths += harness.emit_table(align_rows, run.reports / f"sigma_alignment.{ext}", cfg.sweep.format, meta)
        paths += harness.emit_table(ratio_rows, run.reports / f"sigma_alignment_ratios.{ext}",
                                    cfg.sweep.format, meta)
        print(f"sigma^2 alignment: {len(align_rows)} rows")
    for row in bench:
        print(f"{row['attack']}: acc_adv {row['acc_adv_0']} -> {row['acc_adv_star']:.3f} at t*={row['t_star']}")
    run.register(paths)
    return paths


# ---------------------------------------------------------------------------
# entry point

COMMANDS = ("preprocess", "train", "attack", "sweep", "report")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="purifynet", description="Diffusion-based adversarial purification experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON experiment config")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted path, e.g. diffusion.schedule.T=100")
        s.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        s.add_argument("--seed", type=int, default=None, help="set every seed in the config")
        s.add_argument("--run", default=None, help="run directory name under the output directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("which", nargs="?", choices=("classifier", "diffusion", "all"), default="all")
    return p


def _seed_overrides(seed: int) -> list[str]:
    return [f"dataset.seed={seed}", f"classifier.seed={seed}", f"diffusion.seed={seed}",
            f"sweep.seeds=[{seed}]"]


def _thread_limit(n: Optional[int]):
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(n)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides = _seed_overrides(args.seed) + overrides
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"purifynet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _thread_limit(args.threads):
            run = resolve_run(cfg, args.run, create=args.command == "preprocess")
            if args.command == "preprocess":
                cmd_preprocess(run)
            elif args.command == "train":
                cmd_train(run, args.which)
            elif args.command == "attack":
                cmd_attack(run)
            elif args.command == "sweep":
                cmd_sweep(run, args.threads)
            else:
                cmd_report(run)
        print(f"run directory: {run.root}")
    except MissingArtifacts as exc:
        print(f"purifynet: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, nn.NonFiniteError, datasets.DataError) as exc:
        print(f"purifynet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
