"""Single-file checkpoints for bit-exact resume.

Layout (all integers little-endian)::

    8 bytes   magic  b"GATECKPT"
    4 bytes   format version (uint32)
    8 bytes   payload length (uint64)
    32 bytes  sha256 of the payload
    payload:  8-byte JSON length, UTF-8 JSON document, then raw array data

Arrays inside the JSON document are replaced by ``{"__array__": i}``
references into a table of (dtype, shape, offset) records; float data is
stored as ``<f8`` and integer data as ``<i8``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from .bilevel import AdamLambdaState, BilevelTrainer, EpochRecord, TransferRatios
from .data import SplitState, TaskSplit
from .losses import LossBreakdown
from .model import GateParams

MAGIC = b"GATECKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")


class CheckpointError(RuntimeError):
    pass


def _encode(obj: Any, arrays: list[np.ndarray]) -> Any:
    if isinstance(obj, np.ndarray):
        if obj.dtype.kind == "f":
            arr = np.ascontiguousarray(obj, dtype="<f8")
        elif obj.dtype.kind in "iub":
            arr = np.ascontiguousarray(obj, dtype="<i8")
        else:
            raise TypeError(f"cannot checkpoint array of dtype {obj.dtype}")
        arrays.append(arr)
        return {"__array__": len(arrays) - 1}
    if isinstance(obj, dict):
        if not all(isinstance(k, str) for k in obj):
            raise TypeError("checkpoint dict keys must be strings")
        # sorted so the array table order matches the key-sorted JSON
        return {k: _encode(obj[k], arrays) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_encode(v, arrays) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _decode(obj: Any, arrays: list[np.ndarray]) -> Any:
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _decode(v, arrays) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, arrays) for v in obj]
    return obj


def dumps(state: dict) -> bytes:
    arrays: list[np.ndarray] = []
    doc = _encode(state, arrays)
    table, blobs, offset = [], [], 0
    for arr in arrays:
        raw = arr.tobytes()
        table.append({"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    text = json.dumps({"arrays": table, "state": doc}, sort_keys=True, allow_nan=True).encode()
    payload = struct.pack("<Q", len(text)) + text + b"".join(blobs)
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(payload), hashlib.sha256(payload).digest()) + payload


def loads(buf: bytes) -> dict:
    if len(buf) < _HEADER.size:
        raise CheckpointError("corrupt checkpoint: truncated header")
    magic, version, length, digest = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    payload = buf[_HEADER.size :]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("corrupt checkpoint: payload checksum mismatch")
    (n,) = struct.unpack_from("<Q", payload)
    meta = json.loads(payload[8 : 8 + n].decode())
    blob = payload[8 + n :]
    arrays = []
    for rec in meta["arrays"]:
        raw = blob[rec["offset"] : rec["offset"] + rec["nbytes"]]
        arrays.append(np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"]).copy())
    return _decode(meta["state"], arrays)


def save(state: dict, path: str | Path) -> None:
    """Atomic write through a temp file in the target directory."""
    path = Path(path)
    data = dumps(state)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | Path) -> dict:
    return loads(Path(path).read_bytes())


def checkpoint_path(out: str | Path, epoch: int) -> Path:
    return Path(out) / f"ckpt_{epoch}.bin"


# ---------------------------------------------------------------- trainer state


def _record_state(rec: EpochRecord, timings: bool) -> dict:
    return {
        "epoch": rec.epoch,
        "val_rmse": dict(rec.val_rmse),
        "losses": {t: b.as_dict() for t, b in rec.losses.items()},
        "lam": rec.lam,
        "seconds": rec.seconds if timings else 0.0,
    }


def trainer_state(trainer: BilevelTrainer, config_hash: str, timings: bool = True) -> dict:
    """Everything needed to continue training bit-exactly.

    With ``timings=False`` per-epoch wall-clock seconds are stored as zero so
    that reruns produce byte-identical files.
    """
    lam, ls = trainer.lam, trainer.lam_state
    return {
        "config_hash": config_hash,
        "epoch": trainer.epoch,
        "theta": dict(trainer.theta),
        "theta_order": list(trainer.theta),
        "optimizer": trainer.optimizer.state_dict(),
        "lambda": {
            "tasks": list(lam.tasks),
            "values": lam.values,
            "mask": lam.mask,
            "lambda_min": lam.lambda_min,
            "symmetric": lam.symmetric,
        },
        "lambda_adam": {
            "m": ls.m, "v": ls.v, "step": ls.step,
            "beta0": ls.beta0, "beta1": ls.beta1, "eta": ls.eta, "eps": ls.eps,
        },
        "outer_enabled": trainer.outer_enabled,
        "split": {t: {"group_of": s.group_of, "assign": s.assign} for t, s in trainer.split.tasks.items()},
        "rng": trainer.rng.bit_generator.state,
        "history": [_record_state(r, timings) for r in trainer.history],
        "early_stop": {"best": trainer.best_val, "stale": trainer.stale, "stopped": trainer.stopped},
        "step_log": trainer.step_log,
    }


def restore_trainer(trainer: BilevelTrainer, state: dict, config_hash: str | None = None) -> BilevelTrainer:
    """Load ``state`` into a freshly constructed trainer for the same config."""
    if config_hash is not None and state["config_hash"] != config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {state['config_hash'][:12]} vs run {config_hash[:12]}"
        )
    trainer.epoch = int(state["epoch"])
    trainer.theta = GateParams((k, state["theta"][k]) for k in state["theta_order"])
    trainer.optimizer.load_state_dict(state["optimizer"])
    lam = state["lambda"]
    trainer.lam = TransferRatios(
        tuple(lam["tasks"]), lam["values"], lam["mask"].astype(bool), lam["lambda_min"], lam["symmetric"]
    )
    trainer.lam_state = AdamLambdaState(**state["lambda_adam"])
    trainer.outer_enabled = state["outer_enabled"]
    trainer.split = SplitState(
        {t: TaskSplit(s["group_of"], s["assign"]) for t, s in state["split"].items()}
    )
    trainer.rng.bit_generator.state = state["rng"]
    trainer.history = [
        EpochRecord(
            r["epoch"],
            dict(r["val_rmse"]),
            {t: LossBreakdown(**b) for t, b in r["losses"].items()},
            r["lam"],
            r["seconds"],
        )
        for r in state["history"]
    ]
    es = state["early_stop"]
    trainer.best_val, trainer.stale, trainer.stopped = es["best"], es["stale"], es["stopped"]
    trainer.step_log = list(state["step_log"])
    return trainer
