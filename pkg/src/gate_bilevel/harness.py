"""Experiment protocols: single runs, λ grids, fixed-vs-learned comparisons,
λ diagnostics and validation curves.  Every output is CSV or JSON."""

from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import runstore
from .bilevel import BilevelTrainer, TrainConfig, quadratic_variation
from .config import ConfigError, RunConfig
from .data import (
    TEST,
    SyntheticSpec,
    TaskDataset,
    generate_synthetic,
    load_manifest,
    load_task_csv,
    mixed_suite_spec,
    split_all,
    three_task_spec,
    write_task_csv,
)
from .losses import COMPONENTS, PerturbationConfig
from .model import ModelConfig, init_params

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "task", "val_rmse", *COMPONENTS, "l_tot", "seconds"]
LAMBDA_HEADER = ["epoch", "source", "target", "lambda"]


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- setup


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec | None:
    d = cfg.data
    if d.preset == "three_task":
        return three_task_spec(**d.preset_args)
    if d.preset == "mixed_suite":
        return mixed_suite_spec(**d.preset_args)
    if d.synthetic is not None:
        try:
            return SyntheticSpec(**d.synthetic)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None
    return None


def build_datasets(cfg: RunConfig) -> list[TaskDataset]:
    spec = synthetic_spec(cfg)
    if spec is not None:
        return generate_synthetic(spec, cfg.data.data_seed)
    datasets = [load_task_csv(cfg.resolve(tf.path), tf.task) for tf in cfg.data.tasks]
    if cfg.data.manifest:
        expected = {e.abbreviation: e.count for e in load_manifest(cfg.resolve(cfg.data.manifest))}
        for ds in datasets:
            if ds.task in expected and expected[ds.task] != len(ds):
                log.warning("task %s: manifest lists %d records, file has %d", ds.task, expected[ds.task], len(ds))
    return datasets


def model_config(cfg: RunConfig, datasets: Sequence[TaskDataset]) -> ModelConfig:
    m = cfg.model
    d_x = {ds.d_x for ds in datasets}
    if len(d_x) != 1:
        raise ConfigError(f"data: tasks disagree on feature width {sorted(d_x)}")
    try:
        return ModelConfig(
            d_x=d_x.pop(), tasks=tuple(ds.task for ds in datasets), d_z=m.d_z, d_m=m.d_m,
            embed_hidden=m.embed_hidden, enc_hidden=m.enc_hidden, map_hidden=m.map_hidden,
            head_hidden=m.head_hidden, embed_out_act=m.embed_out_act, latent_out_act=m.latent_out_act,
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def train_config(cfg: RunConfig) -> TrainConfig:
    t, b, l = cfg.train, cfg.bilevel, cfg.loss
    try:
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, inner_optimizer=t.optimizer, inner_lr=t.lr,
            inner_steps_per_epoch=t.inner_steps_per_epoch, lambda_init=b.lambda_init,
            lambda_min=b.lambda_min, beta0=b.beta0, beta1=b.beta1, eta=b.eta, eps=b.eps,
            outer_enabled=b.enabled, outer_cadence=b.cadence, symmetric=b.symmetric,
            skip_threshold=b.skip_threshold, patience=t.patience, swap_fraction=cfg.data.swap_fraction,
            split_fractions=tuple(cfg.data.split), divergence_limit=t.divergence_limit,
            perturb=PerturbationConfig(l.m, l.sigma, l.c),
            sources=tuple(b.sources) if b.sources else None,
            targets=tuple(b.targets) if b.targets else None, seed=cfg.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def with_overrides(cfg: RunConfig, seed: int | None = None, fixed_lambda: float | None = None) -> RunConfig:
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg.seed = seed
    if fixed_lambda is not None:
        if fixed_lambda < 0:
            raise ConfigError("--fixed-lambda must be >= 0")
        cfg.bilevel.enabled = False
        cfg.bilevel.lambda_init = float(fixed_lambda)
    return cfg


def make_trainer(cfg: RunConfig, fixed_pairs=None) -> BilevelTrainer:
    datasets = build_datasets(cfg)
    mc = model_config(cfg, datasets)
    tc = train_config(cfg)
    split_seed = cfg.seed if cfg.data.split_seed is None else cfg.data.split_seed
    split = split_all(datasets, tc.split_fractions, split_seed)
    return BilevelTrainer(mc, tc, datasets, split, fixed_lambda=fixed_pairs)


# ---------------------------------------------------------------- outputs


def metrics_rows(trainer: BilevelTrainer, wall_clock: bool = False):
    for rec in trainer.history:
        for t in trainer.model.tasks:
            b = rec.losses[t]
            yield [rec.epoch, t, _fmt(rec.val_rmse[t]), *(_fmt(getattr(b, k)) for k in (*COMPONENTS, "l_tot")),
                   _fmt(rec.seconds) if wall_clock else ""]


def lambda_rows(trainer: BilevelTrainer):
    pairs = trainer.lam.pairs()
    for rec in trainer.history:
        for s, t in pairs:
            i, j = trainer.lam.index(s, t)
            yield [rec.epoch, s, t, _fmt(rec.lam[i, j])]


def summary(trainer: BilevelTrainer, cfg: RunConfig) -> dict:
    last = trainer.history[-1]
    return {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "mode": "bilevel" if trainer.outer_enabled else "fixed",
        "epochs_run": trainer.epoch,
        "stopped_early": trainer.stopped,
        "final_val_rmse": last.val_rmse,
        "final_test_rmse": trainer.rmse(TEST),
        "lambda_final": [[s, t, trainer.lam[(s, t)]] for s, t in trainer.lam.pairs()],
        "theta_checksum_initial": init_params(trainer.model.config, cfg.seed).checksum(),
        "theta_checksum_final": trainer.theta.checksum(),
    }


def write_run(trainer: BilevelTrainer, cfg: RunConfig, out: Path) -> None:
    _write_csv(out / "metrics.csv", METRICS_HEADER, metrics_rows(trainer, cfg.output.wall_clock))
    _write_csv(out / "lambda.csv", LAMBDA_HEADER, lambda_rows(trainer))
    _write_csv(out / "timing.csv", ["epoch", "seconds"], ([r.epoch, _fmt(r.seconds)] for r in trainer.history))
    _write_json(out / "summary.json", summary(trainer, cfg))


def run_train(
    cfg: RunConfig,
    out: str | Path,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    fixed_pairs=None,
    checkpoints: bool = True,
) -> BilevelTrainer:
    """Train one configuration and write its run directory.

    Raises :class:`~gate_bilevel.bilevel.DivergenceError` after writing the
    partial metrics when the loss blows up.
    """
    from .bilevel import DivergenceError

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(cfg, fixed_pairs)
    chash = cfg.hash()
    if resume is not None:
        runstore.restore_trainer(trainer, runstore.load(resume), chash)
    every = cfg.train.checkpoint_every

    def on_epoch(tr: BilevelTrainer, rec) -> None:
        if not checkpoints or rec.epoch == 0:
            return
        last = tr.epoch >= tr.config.epochs or tr.stopped or (stop_after is not None and tr.epoch >= stop_after)
        if tr.epoch % every == 0 or last:
            state = runstore.trainer_state(tr, chash, timings=cfg.output.wall_clock)
            runstore.save(state, runstore.checkpoint_path(out, tr.epoch))

    try:
        trainer.train(stop_after=stop_after, on_epoch=on_epoch)
    except DivergenceError:
        write_run(trainer, cfg, out)
        raise
    write_run(trainer, cfg, out)
    return trainer


# ---------------------------------------------------------------- grid


def _grid_job(args):
    cfg, lam_pairs = args
    trainer = make_trainer(cfg, fixed_pairs=lam_pairs)
    trainer.train()
    return trainer.history[-1].val_rmse


def _pair_values(pairs, combo):
    out = {}
    for (a, b), v in zip(pairs, combo):
        out[(a, b)] = v
        out[(b, a)] = v
    return out


@dataclass
class GridResult:
    pairs: list[tuple[str, str]]
    rows: list[dict]
    best: int
    noise_std: float | None

    @property
    def spread(self) -> float:
        vals = [r["mean_rmse"] for r in self.rows]
        return max(vals) - min(vals)


def run_grid(cfg: RunConfig, out: str | Path, workers: int = 1) -> GridResult:
    """Fixed, symmetric λ at every combination of the axis values."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    base = copy.deepcopy(cfg)
    base.bilevel.enabled = False
    base.bilevel.symmetric = True
    if not cfg.grid.values:
        raise ConfigError("grid.values: empty axis")
    tasks = [ds.task for ds in build_datasets(base)]
    pairs = [tuple(p) for p in cfg.grid.pairs] or list(itertools.combinations(tasks, 2))
    for p in pairs:
        if p[0] not in tasks or p[1] not in tasks:
            raise ConfigError(f"grid.pairs: unknown task in {list(p)}")
    combos = list(itertools.product(cfg.grid.values, repeat=len(pairs)))
    jobs = [(base, _pair_values(pairs, c)) for c in combos]
    results = _map(jobs, workers)
    rows = []
    for combo, rmse in zip(combos, results):
        rows.append({"lambda": list(combo), "rmse": rmse, "mean_rmse": float(np.mean(list(rmse.values())))})
    best = int(np.argmin([r["mean_rmse"] for r in rows]))
    noise_std = None
    if cfg.grid.noise_seeds:
        seed_jobs = [(with_overrides(base, seed=s), _pair_values(pairs, combos[best])) for s in cfg.grid.noise_seeds]
        seed_means = [float(np.mean(list(r.values()))) for r in _map(seed_jobs, workers)]
        noise_std = float(np.std(seed_means, ddof=1)) if len(seed_means) > 1 else 0.0
    result = GridResult(pairs, rows, best, noise_std)
    header = [f"lambda_{a}_{b}" for a, b in pairs] + [f"rmse_{t}" for t in tasks] + ["mean_rmse", "best"]
    _write_csv(out / "grid.csv", header, (
        [*map(_fmt, r["lambda"]), *(_fmt(r["rmse"][t]) for t in tasks), _fmt(r["mean_rmse"]), int(i == best)]
        for i, r in enumerate(rows)
    ))
    _write_json(out / "grid_summary.json", {
        "pairs": [list(p) for p in pairs],
        "n_runs": len(rows),
        "best_row": best,
        "best_lambda": rows[best]["lambda"],
        "best_mean_rmse": rows[best]["mean_rmse"],
        "spread": result.spread,
        "noise_seeds": list(cfg.grid.noise_seeds),
        "noise_std_at_best": noise_std,
    })
    return result


def _map(jobs, workers: int):
    if workers <= 1:
        return [_grid_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_grid_job, jobs))


# ---------------------------------------------------------------- compare


def mean_val_loss(trainer_or_rows) -> list[float]:
    """Cross-task mean validation MSE per epoch."""
    history = trainer_or_rows.history if isinstance(trainer_or_rows, BilevelTrainer) else trainer_or_rows
    return [float(np.mean([v**2 for v in r.val_rmse.values()])) for r in history]


def convergence_epoch(curve: Sequence[float], factor: float = 1.2) -> int:
    """First epoch whose value falls below ``factor`` times the final value."""
    limit = factor * curve[-1]
    for e, v in enumerate(curve):
        if v < limit:
            return e
    return len(curve) - 1


@dataclass
class ComparisonReport:
    tasks: list[str]
    seeds: list[int]
    baseline: dict[int, dict[str, float]]
    bilevel: dict[int, dict[str, float]]
    convergence: dict[int, dict[str, int]]

    def mean_rmse(self, arm: str) -> dict[str, float]:
        runs = getattr(self, arm)
        return {t: float(np.mean([runs[s][t] for s in self.seeds])) for t in self.tasks}

    @property
    def improved(self) -> int:
        b, g = self.mean_rmse("baseline"), self.mean_rmse("bilevel")
        return sum(g[t] < b[t] for t in self.tasks)

    @property
    def ratio_mean_of_ratios(self) -> float:
        b, g = self.mean_rmse("baseline"), self.mean_rmse("bilevel")
        return float(np.mean([g[t] / b[t] for t in self.tasks]))

    @property
    def ratio_of_means(self) -> float:
        b, g = self.mean_rmse("baseline"), self.mean_rmse("bilevel")
        return float(np.mean(list(g.values())) / np.mean(list(b.values())))

    def as_dict(self) -> dict:
        return {
            "tasks": self.tasks,
            "seeds": self.seeds,
            "baseline_rmse": self.mean_rmse("baseline"),
            "bilevel_rmse": self.mean_rmse("bilevel"),
            "improved_tasks": self.improved,
            "n_tasks": len(self.tasks),
            "avg_rmse_ratio": self.ratio_mean_of_ratios,
            "avg_rmse_ratio_of_means": self.ratio_of_means,
            "convergence_epoch": {str(s): v for s, v in self.convergence.items()},
        }


def run_compare(cfg: RunConfig, seeds: Sequence[int], out: str | Path) -> ComparisonReport:
    """Fixed-λ baseline against bi-level training on identical seeds and splits."""
    if not seeds:
        raise ConfigError("compare: need at least one seed")
    out = Path(out)
    baseline, bilevel, conv = {}, {}, {}
    tasks = None
    for seed in seeds:
        arms = {}
        for arm, fixed in (("baseline", cfg.bilevel.lambda_init), ("bilevel", None)):
            run_cfg = with_overrides(cfg, seed=seed, fixed_lambda=fixed)
            arms[arm] = run_train(run_cfg, out / f"seed_{seed}" / arm, checkpoints=False)
        b, g = arms["baseline"], arms["bilevel"]
        if init_params(b.model.config, seed).checksum() != init_params(g.model.config, seed).checksum():
            raise RuntimeError("compare arms started from different parameters")
        tasks = list(b.model.tasks)
        baseline[seed] = b.history[-1].val_rmse
        bilevel[seed] = g.history[-1].val_rmse
        conv[seed] = {arm: convergence_epoch(mean_val_loss(tr)) for arm, tr in arms.items()}
    report = ComparisonReport(tasks, list(seeds), baseline, bilevel, conv)
    _write_csv(out / "compare.csv", ["seed", "task", "baseline_rmse", "bilevel_rmse"], (
        [s, t, _fmt(baseline[s][t]), _fmt(bilevel[s][t])] for s in seeds for t in tasks
    ))
    _write_json(out / "report.json", report.as_dict())
    return report


# ---------------------------------------------------------------- diagnostics


def read_lambda_csv(path: Path) -> dict[tuple[str, str], list[float]]:
    traj: dict[tuple[str, str], list[tuple[int, float]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LAMBDA_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            traj.setdefault((row["source"], row["target"]), []).append((int(row["epoch"]), float(row["lambda"])))
    return {p: [v for _, v in sorted(vals)] for p, vals in traj.items()}


def report_lambda(run_dir: str | Path, threshold: float = 0.1, out: str | Path | None = None) -> dict:
    """Per-pair quadratic variation of λ and the fraction of pairs below ``threshold``."""
    run_dir = Path(run_dir)
    out = Path(out) if out is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    path = run_dir / "lambda.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: run has no λ snapshots")
    traj = read_lambda_csv(path)
    if not traj:
        raise ValueError(f"{path}: no λ snapshots (single-task run?)")
    qv = {p: quadratic_variation(v) for p, v in traj.items()}
    under = sum(q < threshold for q in qv.values())
    _write_csv(out / "lambda_qv.csv", ["source", "target", "quadratic_variation", "under_threshold"], (
        [s, t, _fmt(q), int(q < threshold)] for (s, t), q in qv.items()
    ))
    pairs = list(traj)
    n = len(next(iter(traj.values())))
    _write_csv(out / "lambda_trajectories.csv", ["epoch", *[f"{s}->{t}" for s, t in pairs]], (
        [e, *(_fmt(traj[p][e]) for p in pairs)] for e in range(n)
    ))
    result = {"threshold": threshold, "n_pairs": len(qv), "fraction_under": under / len(qv),
              "max_quadratic_variation": max(qv.values())}
    _write_json(out / "lambda_report.json", result)
    return result


def emit_curves(run_dirs: Sequence[str | Path], out: str | Path) -> Path:
    """Long-format validation-loss curves plus per-epoch cross-task mean and std."""
    if not run_dirs:
        raise ValueError("curves: need at least one run directory")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    long_rows, summary_rows = [], []
    for rd in run_dirs:
        rd = Path(rd)
        name = rd.as_posix()
        with (rd / "metrics.csv").open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != METRICS_HEADER:
                raise ValueError(f"{rd}: metrics schema mismatch {reader.fieldnames}")
            by_epoch: dict[int, list[tuple[str, float]]] = {}
            for row in reader:
                by_epoch.setdefault(int(row["epoch"]), []).append((row["task"], float(row["val_rmse"]) ** 2))
        for e in sorted(by_epoch):
            vals = sorted(by_epoch[e])
            for task, loss in vals:
                long_rows.append([name, e, task, _fmt(loss)])
            losses = np.array([v for _, v in vals])
            summary_rows.append([name, e, _fmt(losses.mean()), _fmt(losses.std())])
    long_rows.sort(key=lambda r: (r[0], r[1], r[2]))
    summary_rows.sort(key=lambda r: (r[0], r[1]))
    _write_csv(out / "curves.csv", ["run", "epoch", "task", "val_loss"], long_rows)
    _write_csv(out / "curves_summary.csv", ["run", "epoch", "mean_val_loss", "std_val_loss"], summary_rows)
    return out / "curves.csv"


def write_synthetic(cfg: RunConfig, out: str | Path) -> list[Path]:
    """Emit each task of a synthetic config as a task CSV plus a manifest."""
    spec = synthetic_spec(cfg)
    if spec is None:
        raise ConfigError("synth: config has no synthetic data section")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    datasets = generate_synthetic(spec, cfg.data.data_seed)
    for ds in datasets:
        p = out / f"{ds.task}.csv"
        write_task_csv(ds, p)
        paths.append(p)
    _write_json(out / "manifest.json", [
        {"name": f"synthetic {ds.task}", "abbreviation": ds.task, "count": len(ds)} for ds in datasets
    ])
    _write_json(out / "synthetic_spec.json", {**spec.to_dict(), "seed": cfg.data.data_seed,
                                              "correlation": spec.correlation().tolist()})
    return paths
