"""GATE architecture: shared embedder, per-task encoders, manifold maps and heads.

Parameters live in a flat ordered mapping ``name -> ndarray`` (:class:`GateParams`).
Model functions accept that mapping with values either as raw arrays
(evaluated as constants) or as :class:`~gate_bilevel.autodiff.Tensor` leaves
bound to a tape.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("tanh", "linear")


class UnknownTaskError(KeyError):
    pass


@dataclass(frozen=True)
class StackSpec:
    """Affine layers with tanh between them; ``out_act`` applies to the last one."""

    d_in: int
    hidden: tuple[int, ...]
    d_out: int
    out_act: str = "tanh"

    @property
    def dims(self) -> list[int]:
        return [self.d_in, *self.hidden, self.d_out]

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1


@dataclass
class ModelConfig:
    d_x: int
    tasks: tuple[str, ...]
    d_z: int = 32
    d_m: int = 32
    embed_hidden: tuple[int, ...] = (64, 64)
    enc_hidden: tuple[int, ...] = (64,)
    map_hidden: tuple[int, ...] = (64,)
    head_hidden: tuple[int, ...] = ()
    embed_out_act: str = "tanh"
    latent_out_act: str = "tanh"

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        for name in ("embed_hidden", "enc_hidden", "map_hidden", "head_hidden"):
            setattr(self, name, tuple(int(w) for w in getattr(self, name)))
        if not self.tasks:
            raise ValueError("model needs at least one task")
        if len(set(self.tasks)) != len(self.tasks):
            raise ValueError(f"duplicate task ids in {self.tasks}")
        for t in self.tasks:
            if not t or not t.isascii():
                raise ValueError(f"task id {t!r} must be nonempty ASCII")
        dims = [self.d_x, self.d_z, self.d_m, *self.embed_hidden, *self.enc_hidden,
                *self.map_hidden, *self.head_hidden]
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dims must be positive, got {dims}")
        for act in (self.embed_out_act, self.latent_out_act):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    def stacks(self) -> dict[str, StackSpec]:
        """Every parameterised stack keyed by its name prefix."""
        out = {"embed": StackSpec(self.d_x, self.embed_hidden, self.d_z, self.embed_out_act)}
        for t in self.tasks:
            out[f"enc.{t}"] = StackSpec(self.d_z, self.enc_hidden, self.d_z, self.latent_out_act)
            out[f"fwd.{t}"] = StackSpec(self.d_z, self.map_hidden, self.d_m, self.latent_out_act)
            out[f"inv.{t}"] = StackSpec(self.d_m, self.map_hidden, self.d_z, self.latent_out_act)
            out[f"head.{t}"] = StackSpec(self.d_z, self.head_hidden, 1, "linear")
        return out


class GateParams(dict):
    """Ordered ``name -> float64 array`` mapping holding every model weight (θ)."""

    def copy(self) -> "GateParams":
        return GateParams((k, v.copy()) for k, v in self.items())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def equals(self, other: Mapping[str, np.ndarray]) -> bool:
        """Bitwise equality."""
        return list(self) == list(other) and all(
            self[k].tobytes() == np.asarray(other[k]).tobytes() for k in self
        )


def init_params(config: ModelConfig, rng_seed: int) -> GateParams:
    """Glorot-uniform weights, zero biases; one generator drawn in stack order."""
    rng = np.random.default_rng(rng_seed)
    params = GateParams()
    for prefix, spec in config.stacks().items():
        dims = spec.dims
        for i in range(spec.n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{prefix}.W{i}"] = rng.uniform(-a, a, size=(fan_in, fan_out))
            params[f"{prefix}.b{i}"] = np.zeros(fan_out)
    return params


def identity_stack(params: GateParams, prefix: str) -> None:
    """Overwrite a single-layer square stack with the identity map."""
    w = params[f"{prefix}.W0"]
    if f"{prefix}.W1" in params or w.shape[0] != w.shape[1]:
        raise ValueError(f"{prefix} is not a single square layer")
    params[f"{prefix}.W0"] = np.eye(w.shape[0])
    params[f"{prefix}.b0"] = np.zeros(w.shape[0])


def bind(params: GateParams, tape: ad.Tape) -> dict[str, Tensor]:
    """Register every weight as a differentiable leaf on ``tape``."""
    return {k: tape.leaf(v, name=k) for k, v in params.items()}


def as_theta(theta: Mapping) -> Mapping[str, Tensor]:
    first = next(iter(theta.values()))
    if isinstance(first, Tensor):
        return theta
    return {k: Tensor(v) for k, v in theta.items()}


class GateModel:
    """Forward paths of the GATE network for a fixed configuration."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.specs = config.stacks()
        self.tasks = config.tasks

    def _check_task(self, task: str) -> None:
        if task not in self.tasks:
            raise UnknownTaskError(f"unknown task {task!r}")

    def _run(self, prefix: str, x, theta) -> Tensor:
        spec = self.specs[prefix]
        x = x if isinstance(x, Tensor) else ad.constant(np.atleast_2d(x))
        if x.value.ndim != 2 or x.shape[1] != spec.d_in:
            raise ad.ShapeError(f"{prefix}: expected input width {spec.d_in}, got shape {x.shape}")
        theta = as_theta(theta)
        h = x
        last = spec.n_layers - 1
        for i in range(spec.n_layers):
            h = ad.affine(h, theta[f"{prefix}.W{i}"], theta[f"{prefix}.b{i}"])
            if i < last or spec.out_act == "tanh":
                h = ad.tanh(h)
        return h

    def embed(self, x, theta) -> Tensor:
        return self._run("embed", x, theta)

    def encode(self, z, task: str, theta) -> Tensor:
        self._check_task(task)
        return self._run(f"enc.{task}", z, theta)

    def to_manifold(self, z_task, task: str, theta) -> Tensor:
        self._check_task(task)
        return self._run(f"fwd.{task}", z_task, theta)

    def from_manifold(self, z_m, task: str, theta) -> Tensor:
        self._check_task(task)
        return self._run(f"inv.{task}", z_m, theta)

    def head(self, z_task, task: str, theta) -> Tensor:
        self._check_task(task)
        return self._run(f"head.{task}", z_task, theta)

    def predict_direct(self, x, t: str, theta) -> Tensor:
        """``h_t(encoder_t(embed(x)))`` as an (N, 1) column."""
        return self.head(self.encode(self.embed(x, theta), t, theta), t, theta)

    def predict_via_source(self, x, t: str, s: str, theta) -> Tensor:
        """Target prediction routed through the source encoder and the shared manifold."""
        if s == t:
            raise ValueError(f"self-transfer {s!r} -> {t!r} is excluded")
        self._check_task(t)
        self._check_task(s)
        z_s = self.encode(self.embed(x, theta), s, theta)
        return self.head(self.from_manifold(self.to_manifold(z_s, s, theta), t, theta), t, theta)

