"""The five GATE loss terms and their aggregate.

Two routes compute the same quantities:

* small reference functions (``regression_loss``, ``mapping_loss``,
  ``reconstruction_loss``, ``consistency_loss``, ``distance_loss``) that follow
  the definitions term by term, and
* :func:`step_losses`, the fused per-step computation used by the trainer,
  which evaluates every task's encoder once on a stacked batch.

Tests hold the fused route to the reference one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import GateModel, as_theta


class MissingRatioError(KeyError):
    pass


@dataclass
class PerturbationConfig:
    """Distance-loss perturbations: ``m`` noisy copies of z with std ``sigma``."""

    m: int = 4
    sigma: float = 0.1
    c: float | Mapping[str, float] = 1.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"perturbation count must be >= 1, got {self.m}")
        if not self.sigma > 0:
            raise ValueError(f"perturbation sigma must be > 0, got {self.sigma}")
        weights = self.c.values() if isinstance(self.c, Mapping) else [self.c]
        if any(w < 0 for w in weights):
            raise ValueError("distance weights C_s must be >= 0")

    def weight(self, source: str) -> float:
        if isinstance(self.c, Mapping):
            return float(self.c.get(source, 1.0))
        return float(self.c)

    def draw(self, rng: np.random.Generator, n_rows: int, d_z: int) -> np.ndarray:
        """Standard-normal draws shaped (m, n_rows, d_z), shared by all tasks."""
        return rng.standard_normal((self.m, n_rows, d_z))


COMPONENTS = ("l_reg", "l_map", "l_ae", "l_cons", "l_dis")


@dataclass
class LossBreakdown:
    l_reg: float = 0.0
    l_map: float = 0.0
    l_ae: float = 0.0
    l_cons: float = 0.0
    l_dis: float = 0.0
    l_tot: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in (*COMPONENTS, "l_tot")}

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def total_loss(components: Mapping[str, float | Tensor] | Sequence) -> LossBreakdown:
    """Aggregate the five terms; ``l_tot`` is their exact (fsum) sum."""
    if not isinstance(components, Mapping):
        components = dict(zip(COMPONENTS, components))
    vals = {k: _value(components.get(k, 0.0)) for k in COMPONENTS}
    return LossBreakdown(**vals, l_tot=math.fsum(vals.values()))


def _column(y) -> Tensor:
    if isinstance(y, Tensor):
        return y if y.value.ndim == 2 else Tensor(y.value.reshape(-1, 1))
    return ad.constant(np.asarray(y, dtype=np.float64).reshape(-1, 1))


# ---------------------------------------------------------------- reference terms


def regression_loss(y, y_hat) -> Tensor:
    """Mean squared error over the batch."""
    y, y_hat = _column(y), _column(y_hat)
    if y.shape != y_hat.shape:
        raise ad.ShapeError(f"regression_loss: {y.shape[0]} labels vs {y_hat.shape[0]} predictions")
    if y.shape[0] == 0:
        raise ValueError("regression_loss: empty batch")
    return ad.mean_sq_diff(y_hat, y)


def _ratio(lam, s: str, t: str):
    try:
        return lam[(s, t)]
    except KeyError:
        raise MissingRatioError(f"no transfer ratio for pair {s}->{t}") from None


def weighted_mapping_loss(terms: Mapping[tuple[str, str], tuple], lam) -> Tensor:
    """``sum over (s, t) of lam[s, t] * MSE(y_t, y_hat)`` for given predictions."""
    parts = []
    for (s, t), (y, y_hat) in terms.items():
        w = _ratio(lam, s, t)
        parts.append(ad.mul(w, regression_loss(y, y_hat)))
    return ad.add_n(parts) if parts else ad.constant(0.0)


def mapping_loss(
    model: GateModel,
    theta,
    lam,
    batches: Mapping[str, tuple],
    pairs: Iterable[tuple[str, str]],
) -> Tensor:
    """Transfer-path loss; ``batches[t] = (x_t, y_t)`` supplies the target's data."""
    terms = {}
    for s, t in pairs:
        x, y = batches[t]
        terms[(s, t)] = (y, model.predict_via_source(x, t, s, theta))
    return weighted_mapping_loss(terms, lam)


def reconstruction_loss(model: GateModel, theta, latents: Mapping[str, Tensor]) -> Tensor:
    """Round trip task -> manifold -> task for each task's latent."""
    parts = [
        ad.mean_sq_diff(z, model.from_manifold(model.to_manifold(z, i, theta), i, theta))
        for i, z in latents.items()
    ]
    return ad.add_n(parts)


def consistency_loss(zm_target, zm_sources: Sequence) -> Tensor:
    parts = [ad.mean_sq_diff(zs, zm_target) for zs in zm_sources]
    return ad.add_n(parts) if parts else ad.constant(0.0)


def distance_from_displacements(
    d_target: Sequence, d_sources: Mapping[str, Sequence], perturb: PerturbationConfig
) -> Tensor:
    """``(1/M) sum_s C_s sum_p MSE(d_s[p], d_t[p])`` for per-perturbation displacement rows.

    ``d_target`` and each ``d_sources[s]`` are sequences of length M whose
    entries are the per-sample displacement norms for one perturbation.
    """
    m = len(d_target)
    parts = []
    for s, ds in d_sources.items():
        if len(ds) != m:
            raise ad.ShapeError(f"distance: {len(ds)} perturbations for {s} vs {m}")
        inner = ad.add_n([ad.mean_sq_diff(ad._as_tensor(ds[p]), ad._as_tensor(d_target[p])) for p in range(m)])
        parts.append(ad.mul(perturb.weight(s) / m, inner))
    return ad.add_n(parts) if parts else ad.constant(0.0)


def displacements(model: GateModel, theta, z, noise: np.ndarray, task: str, sigma: float) -> list[Tensor]:
    """Per-perturbation norms ``||phi(enc(z)) - phi(enc(z + sigma*eps_p))||`` by row."""
    base = model.to_manifold(model.encode(z, task, theta), task, theta)
    out = []
    for eps in noise:
        zp = ad.add(z, ad.constant(sigma * eps))
        moved = model.to_manifold(model.encode(zp, task, theta), task, theta)
        out.append(ad.row_norm(ad.sub(base, moved)))
    return out


def distance_loss(
    model: GateModel,
    theta,
    x,
    target: str,
    sources: Sequence[str],
    perturb: PerturbationConfig,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Displacement-matching loss on one target batch; the noise is shared by all tasks."""
    z = model.embed(x, theta)
    if noise is None:
        if rng is None:
            raise ValueError("distance_loss needs rng or noise")
        noise = perturb.draw(rng, z.shape[0], z.shape[1])
    d_t = displacements(model, theta, z, noise, target, perturb.sigma)
    d_s = {s: displacements(model, theta, z, noise, s, perturb.sigma) for s in sources if s != target}
    return distance_from_displacements(d_t, d_s, perturb)


# ---------------------------------------------------------------- fused step


@dataclass
class StepBatch:
    """One training or validation step: a batch per participating target task."""

    x: np.ndarray
    y: np.ndarray
    rows: dict[str, tuple[int, int]] = field(default_factory=dict)

    @classmethod
    def from_parts(cls, parts: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> "StepBatch":
        xs, ys, rows, start = [], [], {}, 0
        for t, (x, y) in parts.items():
            x = np.atleast_2d(np.asarray(x, dtype=np.float64))
            y = np.asarray(y, dtype=np.float64).reshape(-1)
            if x.shape[0] != y.shape[0] or x.shape[0] == 0:
                raise ValueError(f"batch for {t}: {x.shape[0]} inputs vs {y.shape[0]} labels")
            xs.append(x)
            ys.append(y)
            rows[t] = (start, start + x.shape[0])
            start += x.shape[0]
        return cls(np.concatenate(xs), np.concatenate(ys), rows)

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]

    def part(self, t: str) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.rows[t]
        return self.x[a:b], self.y[a:b]


@dataclass
class StepLosses:
    """Per-task component tensors for one step plus their total."""

    per_task: dict[str, dict[str, Tensor]]
    total: Tensor

    def breakdown(self) -> LossBreakdown:
        sums = {k: math.fsum(c[k].item() for c in self.per_task.values()) for k in COMPONENTS}
        return LossBreakdown(**sums, l_tot=self.total.item())

    def task_breakdown(self, task: str) -> LossBreakdown:
        return total_loss(self.per_task[task])


class TaskIndex:
    """Row-major flat positions of (source, target) entries in a K x K ratio matrix."""

    def __init__(self, tasks: Sequence[str]):
        self.tasks = tuple(tasks)
        self.pos = {t: i for i, t in enumerate(self.tasks)}

    def flat(self, s: str, t: str) -> int:
        return self.pos[s] * len(self.tasks) + self.pos[t]


def _ratio_tensor(lam) -> Tensor:
    if isinstance(lam, Tensor):
        return lam
    return ad.constant(np.asarray(getattr(lam, "values", lam), dtype=np.float64))


def _map_term(model, theta, lam_t, index, zm, t, a, b, y_col, map_srcs):
    stack = ad.concat_rows([ad.slice_rows(zm[s], a, b) for s in map_srcs])
    pred = model.head(model.from_manifold(stack, t, theta), t, theta)
    mses = ad.segment_msd(pred, ad.tile_rows(y_col, len(map_srcs)), len(map_srcs))
    weights = ad.gather(lam_t, [index.flat(s, t) for s in map_srcs])
    return ad.dot(weights, mses)


def step_losses(
    model: GateModel,
    theta,
    lam,
    batch: StepBatch,
    perturb: PerturbationConfig,
    noise: np.ndarray,
    sources: Sequence[str] | None = None,
    active: set[tuple[str, str]] | None = None,
) -> StepLosses:
    """All five terms for every target in ``batch``.

    ``noise`` has shape (M, batch.n_rows, d_z).  ``active`` restricts which
    (source, target) mapping terms are evaluated at all; ``None`` means every
    pair.  Consistency and distance terms always cover every source.
    """
    theta = as_theta(theta)
    lam_t = _ratio_tensor(lam)
    index = TaskIndex(model.tasks)
    sources = tuple(model.tasks if sources is None else sources)
    needed = list(dict.fromkeys([*batch.rows, *sources]))
    m = perturb.m
    r = batch.n_rows

    z = model.embed(batch.x, theta)
    eps = ad.constant(perturb.sigma * noise.reshape(m * r, -1))
    z_all = ad.concat_rows([z, ad.add(ad.tile_rows(z, m), eps)])

    zi, zm, disp, ae = {}, {}, {}, {}
    for i in needed:
        enc = model.encode(z_all, i, theta)
        fwd = model.to_manifold(enc, i, theta)
        zi[i] = ad.slice_rows(enc, 0, r)
        zm[i] = ad.slice_rows(fwd, 0, r)
        disp[i] = ad.row_norm(ad.sub(ad.tile_rows(zm[i], m), ad.slice_rows(fwd, r, r + m * r)))
        ae[i] = ad.mean_sq_diff(zi[i], model.from_manifold(zm[i], i, theta))

    zero = ad.constant(0.0)
    per_task: dict[str, dict[str, Tensor]] = {
        i: {"l_reg": zero, "l_map": zero, "l_ae": ae[i], "l_cons": zero, "l_dis": zero} for i in needed
    }
    for t, (a, b) in batch.rows.items():
        y_col = ad.constant(batch.y[a:b].reshape(-1, 1))
        terms = per_task[t]
        terms["l_reg"] = ad.mean_sq_diff(model.head(ad.slice_rows(zi[t], a, b), t, theta), y_col)
        srcs = [s for s in sources if s != t]
        if not srcs:
            continue
        map_srcs = srcs if active is None else [s for s in srcs if (s, t) in active]
        if map_srcs:
            terms["l_map"] = _map_term(model, theta, lam_t, index, zm, t, a, b, y_col, map_srcs)
        k = len(srcs)
        zm_t = ad.slice_rows(zm[t], a, b)
        stacked = ad.concat_rows([ad.slice_rows(zm[s], a, b) for s in srcs])
        terms["l_cons"] = ad.sum(ad.segment_msd(stacked, ad.tile_rows(zm_t, k), k))
        rows = (np.arange(m)[:, None] * r + np.arange(a, b)[None, :]).reshape(-1)
        d_t = ad.take_rows(disp[t], rows)
        d_s = ad.concat_rows([ad.take_rows(disp[s], rows) for s in srcs])
        c = ad.constant(np.array([perturb.weight(s) for s in srcs]))
        terms["l_dis"] = ad.dot(c, ad.segment_msd(d_s, ad.tile_rows(d_t, k), k))

    total = ad.add_n([v for terms in per_task.values() for v in terms.values()])
    return StepLosses(per_task, total)


def validation_mapping_loss(
    model: GateModel,
    theta,
    lam,
    batch: StepBatch,
    sources: Sequence[str] | None = None,
    active: set[tuple[str, str]] | None = None,
) -> Tensor:
    """Mapping loss alone, summed over every target in ``batch``."""
    theta = as_theta(theta)
    lam_t = _ratio_tensor(lam)
    index = TaskIndex(model.tasks)
    sources = tuple(model.tasks if sources is None else sources)
    z = model.embed(batch.x, theta)
    zm = {s: model.to_manifold(model.encode(z, s, theta), s, theta) for s in sources}
    parts = []
    for t, (a, b) in batch.rows.items():
        srcs = [s for s in sources if s != t and (active is None or (s, t) in active)]
        if srcs:
            y_col = ad.constant(batch.y[a:b].reshape(-1, 1))
            parts.append(_map_term(model, theta, lam_t, index, zm, t, a, b, y_col, srcs))
    return ad.add_n(parts) if parts else ad.constant(0.0)
