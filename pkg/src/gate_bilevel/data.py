"""Task datasets, group-pure splits, the per-epoch train/validation swap and a
synthetic correlated multi-task generator."""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

TRAIN, VAL, TEST = 0, 1, 2
PART_NAMES = ("train", "val", "test")


class DataFormatError(ValueError):
    """Malformed task file; the message carries the offending line number."""


# ---------------------------------------------------------------- datasets


@dataclass
class TaskDataset:
    task: str
    group_keys: np.ndarray
    x: np.ndarray
    y: np.ndarray
    norm: tuple[float, float] | None = None

    def __post_init__(self):
        self.group_keys = np.asarray(self.group_keys, dtype=str)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        n = len(self.y)
        if n < 1:
            raise ValueError(f"task {self.task}: dataset is empty")
        if self.x.shape[0] != n or len(self.group_keys) != n:
            raise ValueError(f"task {self.task}: {self.x.shape[0]} feature rows, {n} labels, "
                             f"{len(self.group_keys)} group keys")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def denormalize(self, y) -> np.ndarray:
        if self.norm is None:
            return np.asarray(y, dtype=np.float64)
        mean, std = self.norm
        return np.asarray(y, dtype=np.float64) * std + mean


def normalize_labels(ds: TaskDataset, train_index: Sequence[int] | None = None) -> TaskDataset:
    """Z-score labels with (population) statistics of the train rows only.

    Already-normalized datasets are first mapped back to raw labels, so the
    stored ``norm`` always refers to the original scale.
    """
    raw = ds.denormalize(ds.y)
    fit = raw if train_index is None else raw[np.asarray(train_index, dtype=np.intp)]
    if len(fit) < 2:
        raise ValueError(f"task {ds.task}: need >= 2 labels to normalize, got {len(fit)}")
    mean = float(np.mean(fit))
    std = float(np.std(fit))
    if not std > 0:
        raise ValueError(f"task {ds.task}: labels have zero variance")
    return replace(ds, y=(raw - mean) / std, norm=(mean, std))


def load_task_csv(path: str | Path, task: str) -> TaskDataset:
    """Read ``group_key,f0,...,f{d-1},label`` rows (header required)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: line 1: empty file")
        width = len(header)
        if width < 3 or header[0] != "group_key" or header[-1] != "label":
            raise DataFormatError(f"{path}: line 1: header must be group_key,f0,...,label")
        keys, xs, ys = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric value ({exc})") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError(f"{path}: line {lineno}: non-finite value")
            keys.append(row[0])
            xs.append(vals[:-1])
            ys.append(vals[-1])
    if not ys:
        raise DataFormatError(f"{path}: line 2: no data rows")
    return TaskDataset(task, np.array(keys), np.array(xs), np.array(ys))


def write_task_csv(ds: TaskDataset, path: str | Path) -> None:
    path = Path(path)
    y = ds.denormalize(ds.y)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group_key", *[f"f{j}" for j in range(ds.d_x)], "label"])
        for key, xr, yr in zip(ds.group_keys, ds.x, y):
            w.writerow([key, *(repr(float(v)) for v in xr), repr(float(yr))])


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    abbreviation: str
    count: int


def parse_manifest_rows(rows: Sequence[Sequence]) -> list[ManifestEntry]:
    out = []
    seen = set()
    for i, row in enumerate(rows, start=1):
        if len(row) != 3:
            raise DataFormatError(f"manifest row {i}: expected (name, abbreviation, count)")
        name, abbr, count = row
        try:
            count = int(count)
        except (TypeError, ValueError):
            raise DataFormatError(f"manifest row {i}: count {count!r} is not an integer") from None
        abbr = str(abbr).strip()
        if not abbr or not abbr.isascii() or count < 1:
            raise DataFormatError(f"manifest row {i}: invalid entry {row!r}")
        if abbr in seen:
            raise DataFormatError(f"manifest row {i}: duplicate abbreviation {abbr!r}")
        seen.add(abbr)
        out.append(ManifestEntry(str(name).strip(), abbr, count))
    return out


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Task registry as JSON (list of triples or objects) or CSV with a header row."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        raw = json.loads(path.read_text(encoding="utf-8"))
        rows = [
            (r["name"], r["abbreviation"], r["count"]) if isinstance(r, Mapping) else r
            for r in raw
        ]
        return parse_manifest_rows(rows)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return parse_manifest_rows([r for r in rows[1:] if r])


# ---------------------------------------------------------------- splits


@dataclass
class TaskSplit:
    """Group-level assignment of one task's records to train/val/test."""

    group_of: np.ndarray  # group id per record
    assign: np.ndarray  # part per group id

    def part(self, which: int) -> np.ndarray:
        return np.flatnonzero(self.assign[self.group_of] == which)

    @property
    def train(self) -> np.ndarray:
        return self.part(TRAIN)

    @property
    def val(self) -> np.ndarray:
        return self.part(VAL)

    @property
    def test(self) -> np.ndarray:
        return self.part(TEST)

    def copy(self) -> "TaskSplit":
        return TaskSplit(self.group_of.copy(), self.assign.copy())


@dataclass
class SplitState:
    tasks: dict[str, TaskSplit] = field(default_factory=dict)

    def __getitem__(self, task: str) -> TaskSplit:
        return self.tasks[task]

    def copy(self) -> "SplitState":
        return SplitState({t: s.copy() for t, s in self.tasks.items()})

    def equals(self, other: "SplitState") -> bool:
        return list(self.tasks) == list(other.tasks) and all(
            np.array_equal(a.group_of, b.group_of) and np.array_equal(a.assign, b.assign)
            for a, b in zip(self.tasks.values(), other.tasks.values())
        )


def _task_seed(*parts) -> np.random.Generator:
    key = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(key)


def group_split(
    ds: TaskDataset, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0
) -> TaskSplit:
    """Shuffle whole groups and hand each to the part with the largest deficit."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr <= 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"split fractions must be 3 positive values summing to 1, got {fractions}")
    keys, group_of = np.unique(ds.group_keys, return_inverse=True)
    n_groups = len(keys)
    if n_groups < 3:
        raise ValueError(f"task {ds.task}: {n_groups} groups cannot fill 3 splits")
    sizes = np.bincount(group_of, minlength=n_groups)
    order = np.random.default_rng(seed).permutation(n_groups)
    target = fr * len(ds)
    counts = np.zeros(3)
    filled = np.zeros(3, dtype=bool)
    assign = np.empty(n_groups, dtype=np.int64)
    for pos, g in enumerate(order):
        remaining = n_groups - pos
        empty = np.flatnonzero(~filled)
        if remaining <= len(empty):
            part = int(empty[0])
        else:
            part = int(np.argmax(target - counts))
        assign[g] = part
        counts[part] += sizes[g]
        filled[part] = True
    return TaskSplit(group_of.astype(np.int64), assign)


def split_all(
    datasets: Sequence[TaskDataset], fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0
) -> SplitState:
    return SplitState({ds.task: group_split(ds, fractions, seed) for ds in datasets})


def swap_train_val(split: SplitState, fraction: float, seed: int, epoch: int) -> SplitState:
    """Exchange ``fraction`` of the groups between train and validation.

    The number of exchanged groups per task is ``floor(fraction * min(n_train,
    n_val))`` counted in groups; test assignments never change.
    """
    if not 0.0 < fraction <= 0.5:
        raise ValueError(f"swap fraction must be in (0, 0.5], got {fraction}")
    out = split.copy()
    for task, ts in out.tasks.items():
        tr = np.flatnonzero(ts.assign == TRAIN)
        va = np.flatnonzero(ts.assign == VAL)
        k = int(math.floor(fraction * min(len(tr), len(va))))
        if k == 0:
            continue
        rng = _task_seed(seed, epoch, task)
        out_tr = rng.choice(tr, size=k, replace=False)
        out_va = rng.choice(va, size=k, replace=False)
        ts.assign[out_tr] = VAL
        ts.assign[out_va] = TRAIN
    return out


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class Batch:
    step: int
    task: str
    index: np.ndarray


def multi_task_batches(
    datasets: Sequence[TaskDataset],
    split: SplitState,
    batch_size: int,
    seed: int,
    epoch: int,
    part: int = TRAIN,
) -> Iterator[Batch]:
    """Shuffled batches of every task, grouped by step.

    Step ``k`` carries the ``k``-th batch of each task that still has one, so
    one step touches every target task while its data lasts.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    chunks = {}
    for ds in datasets:
        idx = split[ds.task].part(part)
        if len(idx) == 0:
            raise ValueError(f"task {ds.task}: empty {PART_NAMES[part]} split")
        idx = _task_seed(seed, epoch, "batches", part, ds.task).permutation(idx)
        chunks[ds.task] = [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
    n_steps = max(len(c) for c in chunks.values())
    for step in range(n_steps):
        for task, c in chunks.items():
            if step < len(c):
                yield Batch(step, task, c[step])


def group_steps(batches: Iterator[Batch]) -> Iterator[list[Batch]]:
    current: list[Batch] = []
    for b in batches:
        if current and b.step != current[0].step:
            yield current
            current = []
        current.append(b)
    if current:
        yield current


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Linear latent-factor tasks: ``y_j = u . W[j] + noise_j``, ``x = u A + feature noise``."""

    loadings: list[list[float]]
    noise: list[float] | float = 0.1
    samples: list[int] | int = 200
    d_x: int = 16
    feature_noise: float = 0.05
    tasks: list[str] | None = None
    groups_per_key: int = 1

    def __post_init__(self):
        w = np.asarray(self.loadings, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise ValueError("loadings must be a non-empty (n_tasks x k) matrix")
        n = w.shape[0]
        if self.tasks is None:
            self.tasks = [f"task{j}" for j in range(n)]
        if len(self.tasks) != n or len(set(self.tasks)) != n:
            raise ValueError(f"need {n} distinct task names, got {self.tasks}")
        if any(s < 0 for s in self.noise_vector):
            raise ValueError("noise std must be >= 0")
        if any(s < 3 for s in self.sample_vector):
            raise ValueError("each task needs >= 3 samples")
        if self.d_x < w.shape[1]:
            raise ValueError(f"d_x={self.d_x} smaller than latent dim {w.shape[1]}")
        if self.feature_noise < 0 or self.groups_per_key < 1:
            raise ValueError("feature_noise must be >= 0 and groups_per_key >= 1")

    @property
    def n_tasks(self) -> int:
        return len(self.loadings)

    @property
    def k(self) -> int:
        return len(self.loadings[0])

    @property
    def noise_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.noise, dtype=np.float64), (self.n_tasks,)).copy()

    @property
    def sample_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.samples, dtype=np.int64), (self.n_tasks,)).copy()

    def correlation(self) -> np.ndarray:
        """Label correlation implied by the loadings and noise levels."""
        w = np.asarray(self.loadings, dtype=np.float64)
        cov = w @ w.T + np.diag(self.noise_vector**2)
        sd = np.sqrt(np.diag(cov))
        rho = cov / np.outer(sd, sd)
        np.fill_diagonal(rho, 1.0)
        return rho

    def to_dict(self) -> dict:
        return {
            "loadings": [list(map(float, r)) for r in self.loadings],
            "noise": self.noise if isinstance(self.noise, (int, float)) else list(self.noise),
            "samples": self.samples if isinstance(self.samples, int) else list(self.samples),
            "d_x": self.d_x,
            "feature_noise": self.feature_noise,
            "tasks": list(self.tasks),
            "groups_per_key": self.groups_per_key,
        }


def generate_synthetic(spec: SyntheticSpec, seed: int) -> list[TaskDataset]:
    """Draw one shared molecule pool and label it for every task."""
    rng = np.random.default_rng(seed)
    w = np.asarray(spec.loadings, dtype=np.float64)
    k = spec.k
    samples = spec.sample_vector
    pool = int(samples.max())
    a = rng.standard_normal((k, spec.d_x)) / math.sqrt(k)
    u = rng.standard_normal((pool, k))
    x = u @ a + spec.feature_noise * rng.standard_normal((pool, spec.d_x))
    keys = np.array([f"m{i // spec.groups_per_key:06d}" for i in range(pool)])
    noise = spec.noise_vector
    out = []
    for j, task in enumerate(spec.tasks):
        eps = rng.standard_normal(pool)
        idx = np.arange(pool) if samples[j] == pool else np.sort(rng.choice(pool, samples[j], replace=False))
        y = u[idx] @ w[j] + noise[j] * eps[idx]
        out.append(TaskDataset(task, keys[idx], x[idx], y))
    return out


def three_task_spec(samples: int = 150, d_x: int = 8, rho: float = 0.95, noise: float = 0.3) -> SyntheticSpec:
    """Tasks A and B share one latent factor at label correlation ``rho``; C is independent."""
    # A and B load on factor 0 with equal weight; noise fixed, loading solves rho.
    lw = math.sqrt(rho * noise**2 / (1.0 - rho))
    return SyntheticSpec(
        loadings=[[lw, 0.0], [lw, 0.0], [0.0, lw]],
        noise=noise,
        samples=samples,
        d_x=d_x,
        tasks=["A", "B", "C"],
    )


def mixed_suite_spec(samples: Sequence[int] | int = 120, d_x: int = 12, seed: int = 0) -> SyntheticSpec:
    """Eight tasks: correlated clusters of three and two, plus three loners."""
    rng = np.random.default_rng(seed)
    clusters = [0, 0, 0, 1, 1, 2, 3, 4]
    k = 5
    rows = []
    for c in clusters:
        row = np.zeros(k)
        row[c] = 1.0
        row += 0.25 * rng.standard_normal(k)
        rows.append(row.tolist())
    return SyntheticSpec(
        loadings=rows,
        noise=0.3,
        samples=samples if isinstance(samples, int) else list(samples),
        d_x=d_x,
        tasks=[f"t{j}" for j in range(8)],
    )
