"""Alternating inner (θ on training data) and outer (λ on validation data) updates."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import (
    TRAIN,
    VAL,
    TEST,
    SplitState,
    TaskDataset,
    group_steps,
    multi_task_batches,
    normalize_labels,
    swap_train_val,
)
from .losses import (
    COMPONENTS,
    LossBreakdown,
    PerturbationConfig,
    StepBatch,
    step_losses,
    total_loss,
    validation_mapping_loss,
)
from .model import GateModel, GateParams, ModelConfig, bind, init_params


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, breakdown: LossBreakdown | None = None):
        super().__init__(message)
        self.breakdown = breakdown


class DivergenceError(RuntimeError):
    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


# ---------------------------------------------------------------- transfer ratios


@dataclass
class TransferRatios:
    """Dense ``λ[s, t]`` over ordered task pairs; only off-diagonal allowed pairs are entries."""

    tasks: tuple[str, ...]
    values: np.ndarray
    mask: np.ndarray
    lambda_min: float = 0.0
    symmetric: bool = False

    @classmethod
    def full(
        cls,
        tasks: Sequence[str],
        init: float = 1.0,
        lambda_min: float = 0.0,
        symmetric: bool = False,
        sources: Sequence[str] | None = None,
        targets: Sequence[str] | None = None,
    ) -> "TransferRatios":
        tasks = tuple(tasks)
        if lambda_min < 0:
            raise ValueError(f"lambda_min must be >= 0, got {lambda_min}")
        src = set(tasks if sources is None else sources)
        tgt = set(tasks if targets is None else targets)
        mask = np.array([[s != t and s in src and t in tgt for t in tasks] for s in tasks], dtype=bool).reshape(
            len(tasks), len(tasks)
        )
        values = np.where(mask, max(float(init), lambda_min), 0.0)
        return cls(tasks, values, mask, lambda_min, symmetric)

    def copy(self) -> "TransferRatios":
        return replace(self, values=self.values.copy(), mask=self.mask.copy())

    def index(self, s: str, t: str) -> tuple[int, int]:
        return self.tasks.index(s), self.tasks.index(t)

    def __getitem__(self, pair: tuple[str, str]) -> float:
        s, t = pair
        if s not in self.tasks or t not in self.tasks:
            raise KeyError(pair)
        i, j = self.index(s, t)
        if not self.mask[i, j]:
            raise KeyError(pair)
        return float(self.values[i, j])

    def set(self, s: str, t: str, value: float) -> None:
        i, j = self.index(s, t)
        if not self.mask[i, j]:
            raise KeyError((s, t))
        self.values[i, j] = value
        if self.symmetric and self.mask[j, i]:
            self.values[j, i] = value

    def pairs(self) -> list[tuple[str, str]]:
        return [(s, t) for i, s in enumerate(self.tasks) for j, t in enumerate(self.tasks) if self.mask[i, j]]

    def entries(self) -> np.ndarray:
        return self.values[self.mask]

    def symmetrize(self) -> None:
        both = self.mask & self.mask.T
        avg = 0.5 * (self.values + self.values.T)
        self.values = np.where(both, avg, self.values)

    def equals(self, other: "TransferRatios") -> bool:
        return self.values.tobytes() == other.values.tobytes()


def clamp_lambda(lam: TransferRatios, lambda_min: float | None = None) -> TransferRatios:
    floor = lam.lambda_min if lambda_min is None else lambda_min
    if floor < 0:
        raise ValueError(f"lambda_min must be >= 0, got {floor}")
    out = lam.copy()
    out.values = np.where(out.mask, np.maximum(out.values, floor), 0.0)
    return out


def quadratic_variation(trajectory: Sequence[float]) -> float:
    """Sum of squared successive differences."""
    traj = np.asarray(trajectory, dtype=np.float64)
    if traj.ndim != 1 or len(traj) < 2:
        raise ValueError("quadratic variation needs a trajectory of length >= 2")
    return math.fsum(np.diff(traj) ** 2)


def skip_filter(lam: TransferRatios, threshold: float) -> set[tuple[str, str]]:
    """Pairs whose ratio is strictly above ``threshold``."""
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    return {p for p in lam.pairs() if lam[p] > threshold}


# ---------------------------------------------------------------- optimizers


@dataclass
class AdamLambdaState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta0: float = 0.9
    beta1: float = 0.999
    eta: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta0 < 1.0 and 0.0 <= self.beta1 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if not (self.eta > 0 and self.eps > 0):
            raise ValueError("eta and eps must be > 0")

    @classmethod
    def zeros(cls, shape, **hyper) -> "AdamLambdaState":
        return cls(np.zeros(shape), np.zeros(shape), **hyper)

    def copy(self) -> "AdamLambdaState":
        return replace(self, m=self.m.copy(), v=self.v.copy())

    def advance(self, lam: np.ndarray, g: np.ndarray) -> np.ndarray:
        """One bias-corrected moment update; mutates moments, returns new ratios."""
        self.step += 1
        self.m = self.beta0 * self.m + (1.0 - self.beta0) * g
        self.v = self.beta1 * self.v + (1.0 - self.beta1) * g * g
        m_hat = self.m / (1.0 - self.beta0**self.step)
        v_hat = self.v / (1.0 - self.beta1**self.step)
        return lam - self.eta * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.step_count = 0

    def step(self, params: GateParams, grads: Mapping[str, np.ndarray]) -> GateParams:
        self.step_count += 1
        return GateParams((k, v - self.lr * grads[k]) for k, v in params.items())

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "step": self.step_count, "m": {}, "v": {}}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.step_count = state["step"]


class Adam:
    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: GateParams, grads: Mapping[str, np.ndarray]) -> GateParams:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        out = GateParams()
        for k, p in params.items():
            g = grads[k]
            m = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "step": self.step_count, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.step_count = state["step"]
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown inner optimizer {kind!r}")


# ---------------------------------------------------------------- steps


def inner_step(
    model: GateModel,
    theta: GateParams,
    lam: TransferRatios,
    batch: StepBatch,
    perturb: PerturbationConfig,
    noise: np.ndarray,
    optimizer,
    sources: Sequence[str] | None = None,
    active: set[tuple[str, str]] | None = None,
):
    """One optimizer step on ∇θ of the total loss with λ held constant.

    Returns ``(new_theta, losses)`` where ``losses`` is the step's
    :class:`~gate_bilevel.losses.StepLosses`.
    """
    tape = ad.Tape()
    leaves = bind(theta, tape)
    losses = step_losses(model, leaves, ad.constant(lam.values), batch, perturb, noise, sources, active)
    bd = losses.breakdown()
    if not bd.finite():
        raise NonFiniteLossError("non-finite training loss", bd)
    grads = ad.backward(losses.total, tape)
    named = {k: grads[t] for k, t in leaves.items()}
    return optimizer.step(theta, named), losses


def outer_step(
    model: GateModel,
    theta: GateParams,
    lam: TransferRatios,
    state: AdamLambdaState,
    batch: StepBatch,
    sources: Sequence[str] | None = None,
    active: set[tuple[str, str]] | None = None,
) -> tuple[TransferRatios, AdamLambdaState, float]:
    """One λ update from the validation mapping loss with θ frozen.

    Returns the new ratios, the new moment state and the mapping loss value.
    """
    if batch.n_rows == 0:
        raise ValueError("empty validation batch")
    tape = ad.Tape()
    lam_leaf = tape.leaf(lam.values, name="lambda")
    frozen = {k: ad.constant(v) for k, v in theta.items()}
    loss = validation_mapping_loss(model, frozen, lam_leaf, batch, sources, active)
    if loss.tape is None:
        g = np.zeros_like(lam.values)
    else:
        g = ad.backward(loss, tape)[lam_leaf]
    if not np.all(np.isfinite(g)):
        raise NonFiniteLossError("non-finite λ gradient")
    g = np.where(lam.mask, g, 0.0)
    new_state = state.copy()
    new_lam = lam.copy()
    new_lam.values = np.where(lam.mask, new_state.advance(lam.values, g), 0.0)
    if new_lam.symmetric:
        new_lam.symmetrize()
    return clamp_lambda(new_lam), new_state, loss.item()


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    inner_optimizer: str = "adam"
    inner_lr: float = 1e-3
    inner_steps_per_epoch: int | None = None
    lambda_init: float = 1.0
    lambda_min: float = 0.0
    beta0: float = 0.9
    beta1: float = 0.999
    eta: float = 0.01
    eps: float = 1e-8
    outer_enabled: bool = True
    outer_cadence: str = "batch"
    symmetric: bool = False
    skip_threshold: float | None = None
    patience: int | None = 20
    swap_fraction: float | None = 0.2
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    divergence_limit: float = 1e6
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    sources: tuple[str, ...] | None = None
    targets: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.inner_steps_per_epoch is not None and self.inner_steps_per_epoch < 1:
            raise ValueError("inner_steps_per_epoch must be >= 1")
        if not (self.inner_lr > 0 and self.eta > 0 and self.eps > 0):
            raise ValueError("learning rates and eps must be > 0")
        if self.outer_cadence not in ("batch", "epoch"):
            raise ValueError(f"outer_cadence must be 'batch' or 'epoch', got {self.outer_cadence!r}")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        self.split_fractions = tuple(self.split_fractions)


@dataclass
class EpochRecord:
    epoch: int
    val_rmse: dict[str, float]
    losses: dict[str, LossBreakdown]
    lam: np.ndarray
    seconds: float


class BilevelTrainer:
    """Owns θ, λ, both optimizer states, the split and the noise stream."""

    def __init__(
        self,
        model_config: ModelConfig,
        config: TrainConfig,
        datasets: Sequence[TaskDataset],
        split: SplitState,
        fixed_lambda: float | Mapping[tuple[str, str], float] | None = None,
    ):
        tasks = tuple(ds.task for ds in datasets)
        if tasks != model_config.tasks:
            raise ValueError(f"dataset tasks {tasks} differ from model tasks {model_config.tasks}")
        self.config = config
        self.model = GateModel(model_config)
        self.split = split.copy()
        self.datasets = [normalize_labels(ds, self.split[ds.task].train) for ds in datasets]
        self.by_task = {ds.task: ds for ds in self.datasets}
        self.theta = init_params(model_config, config.seed)
        self.optimizer = make_optimizer(config.inner_optimizer, config.inner_lr)
        self.lam = TransferRatios.full(
            tasks, config.lambda_init, config.lambda_min, config.symmetric, config.sources, config.targets
        )
        self.outer_enabled = config.outer_enabled and fixed_lambda is None
        if fixed_lambda is not None:
            self.set_fixed_lambda(fixed_lambda)
        self.lam_state = AdamLambdaState.zeros(
            self.lam.values.shape, beta0=config.beta0, beta1=config.beta1, eta=config.eta, eps=config.eps
        )
        self.rng = np.random.default_rng([config.seed, 7])
        self.epoch = 0
        self.history: list[EpochRecord] = []
        self.best_val = math.inf
        self.stale = 0
        self.stopped = False
        self.sources = config.sources
        self.targets = tuple(tasks if config.targets is None else config.targets)
        self.step_log: list[float] = []

    def set_fixed_lambda(self, fixed) -> None:
        if isinstance(fixed, Mapping):
            for (s, t), v in fixed.items():
                self.lam.set(s, t, float(v))
        else:
            self.lam.values = np.where(self.lam.mask, float(fixed), 0.0)
        self.lam = clamp_lambda(self.lam)

    # -- helpers

    def _active(self):
        if self.config.skip_threshold is None:
            return None
        return skip_filter(self.lam, self.config.skip_threshold)

    def _step_batch(self, batches, restrict_targets: bool = True) -> StepBatch:
        parts = {}
        for b in batches:
            if restrict_targets and b.task not in self.targets:
                continue
            ds = self.by_task[b.task]
            parts[b.task] = (ds.x[b.index], ds.y[b.index])
        return StepBatch.from_parts(parts)

    def _steps(self, part: int, epoch: int, full: bool = False):
        size = 10**12 if full else self.config.batch_size
        yield from group_steps(multi_task_batches(self.datasets, self.split, size, self.config.seed, epoch, part))

    def rmse(self, part: int = VAL) -> dict[str, float]:
        out = {}
        theta = {k: ad.constant(v) for k, v in self.theta.items()}
        for ds in self.datasets:
            idx = self.split[ds.task].part(part)
            if len(idx) == 0:
                out[ds.task] = math.nan
                continue
            pred = self.model.predict_direct(ds.x[idx], ds.task, theta).value.reshape(-1)
            out[ds.task] = math.sqrt(float(np.mean((pred - ds.y[idx]) ** 2)))
        return out

    def _record(self, sums: dict[str, dict[str, float]], n_steps: int, seconds: float) -> EpochRecord:
        losses = {
            t: total_loss({k: sums[t][k] / max(n_steps, 1) for k in COMPONENTS}) for t in self.model.tasks
        }
        rec = EpochRecord(self.epoch, self.rmse(VAL), losses, self.lam.values.copy(), seconds)
        self.history.append(rec)
        return rec

    def _accumulate(self, sums, losses) -> None:
        for t, terms in losses.per_task.items():
            for k in COMPONENTS:
                sums[t][k] += terms[k].item()

    def _empty_sums(self):
        return {t: {k: 0.0 for k in COMPONENTS} for t in self.model.tasks}

    def _noise(self, n_rows: int) -> np.ndarray:
        return self.config.perturb.draw(self.rng, n_rows, self.model.config.d_z)

    # -- phases

    def evaluate_initial(self) -> EpochRecord:
        """Epoch-0 record: training-loss breakdown and validation RMSE before any update."""
        sums = self._empty_sums()
        n = 0
        theta = {k: ad.constant(v) for k, v in self.theta.items()}
        for steps in self._steps(TRAIN, 0):
            batch = self._step_batch(steps)
            losses = step_losses(self.model, theta, self.lam.values, batch, self.config.perturb,
                                 self._noise(batch.n_rows), self.sources, self._active())
            self._accumulate(sums, losses)
            n += 1
        return self._record(sums, n, 0.0)

    def inner_epoch(self, epoch: int):
        sums = self._empty_sums()
        n = 0
        active = self._active()
        for steps in self._steps(TRAIN, epoch):
            if self.config.inner_steps_per_epoch is not None and n >= self.config.inner_steps_per_epoch:
                break
            batch = self._step_batch(steps)
            try:
                self.theta, losses = inner_step(
                    self.model, self.theta, self.lam, batch, self.config.perturb,
                    self._noise(batch.n_rows), self.optimizer, self.sources, active,
                )
            except NonFiniteLossError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}", self.history) from exc
            self.step_log.append(losses.total.item())
            self._accumulate(sums, losses)
            n += 1
        return sums, n

    def outer_epoch(self, epoch: int) -> None:
        active = self._active()
        full = self.config.outer_cadence == "epoch"
        for steps in self._steps(VAL, epoch, full=full):
            batch = self._step_batch(steps)
            self.lam, self.lam_state, _ = outer_step(
                self.model, self.theta, self.lam, self.lam_state, batch, self.sources, active
            )

    def run_epoch(self) -> EpochRecord:
        if not self.history:
            self.evaluate_initial()
        self.epoch += 1
        start = time.perf_counter()
        if self.config.swap_fraction and self.epoch > 1:
            self.split = swap_train_val(self.split, self.config.swap_fraction, self.config.seed, self.epoch)
        sums, n = self.inner_epoch(self.epoch)
        if self.outer_enabled:
            self.outer_epoch(self.epoch)
        rec = self._record(sums, n, time.perf_counter() - start)
        total = math.fsum(b.l_tot for b in rec.losses.values())
        if not math.isfinite(total) or total > self.config.divergence_limit:
            raise DivergenceError(f"epoch {self.epoch}: training loss {total} diverged", self.history)
        val = float(np.mean([v**2 for v in rec.val_rmse.values()]))
        if val < self.best_val:
            self.best_val, self.stale = val, 0
        else:
            self.stale += 1
        if self.config.patience is not None and self.stale >= self.config.patience:
            self.stopped = True
        return rec

    def train(
        self,
        stop_after: int | None = None,
        on_epoch: Callable[["BilevelTrainer", EpochRecord], None] | None = None,
    ) -> "BilevelTrainer":
        """Run until the epoch budget, early stop, or ``stop_after`` epochs have completed."""
        if not self.history:
            rec = self.evaluate_initial()
            if on_epoch:
                on_epoch(self, rec)
        while self.epoch < self.config.epochs and not self.stopped:
            if stop_after is not None and self.epoch >= stop_after:
                break
            rec = self.run_epoch()
            if on_epoch:
                on_epoch(self, rec)
        return self

    def lambda_trajectories(self) -> dict[tuple[str, str], list[float]]:
        out = {}
        for s, t in self.lam.pairs():
            i, j = self.lam.index(s, t)
            out[(s, t)] = [float(r.lam[i, j]) for r in self.history]
        return out


def bilevel_train(
    model_config: ModelConfig,
    config: TrainConfig,
    datasets: Sequence[TaskDataset],
    split: SplitState | None = None,
    fixed_lambda=None,
) -> BilevelTrainer:
    from .data import split_all

    if split is None:
        split = split_all(datasets, config.split_fractions, config.seed)
    trainer = BilevelTrainer(model_config, config, datasets, split, fixed_lambda)
    return trainer.train()
