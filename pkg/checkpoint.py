"""
Deterministic checkpoint files.

Layout: a magic line, one canonical-JSON header line, then the raw little-endian
tensor bytes in header order. The header holds the format version, config
snapshot, vocabulary, step, RNG state, optimizer scalars, the tensor index
(name, dtype, shape, offset, frozen flag) and the SHA-256 of the payload. No
timestamps are written, so equal states give equal bytes.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

import config
from exceptions import CheckpointChecksumError, CheckpointVersionError
from layers import Module
from utils import array_digest, canonical_json, ensure_directory

logger = logging.getLogger('vla.checkpoint')

MAGIC = b"VLA-CHECKPOINT\n"
OPTIMIZER_PREFIX = "optimizer/"


@dataclass
class CheckpointState:
    """Everything needed to resume: parameters, optimizer, RNG and bookkeeping."""

    kind: str
    config: Dict[str, Any]
    step: int = 0
    vocab: Optional[Dict[str, Any]] = None
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: Dict[str, bool] = field(default_factory=dict)
    optimizer: Optional[Dict[str, Any]] = None
    rng_state: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def frozen_digest(self) -> str:
        names = sorted(n for n, f in self.frozen.items() if f)
        return array_digest((n, self.params[n]) for n in names)

    def params_digest(self) -> str:
        return array_digest(sorted(self.params.items()))


def state_from_module(module: Module, kind: str, cfg: Dict[str, Any], step: int = 0, **kwargs) -> CheckpointState:
    params = {}
    frozen = {}
    for name, p in module.named_parameters():
        params[name] = p.data
        frozen[name] = bool(p.frozen)
    return CheckpointState(kind=kind, config=cfg, step=step, params=params, frozen=frozen, **kwargs)


def load_into_module(module: Module, state: CheckpointState, prefix: str = "", source_prefix: str = "") -> None:
    """Copy parameters into ``module``; names are matched after swapping ``prefix`` for ``source_prefix``."""
    arrays = {}
    for name, _ in module.named_parameters(prefix):
        key = source_prefix + name[len(prefix):]
        if key not in state.params:
            raise KeyError(f"Checkpoint has no parameter {key!r}")
        arrays[name] = state.params[key]
    module.load_arrays(arrays, prefix)


def _split_optimizer(optimizer: Optional[Dict[str, Any]]) -> Tuple[Optional[Dict[str, Any]], Dict[str, np.ndarray]]:
    if optimizer is None:
        return None, {}
    scalars = {k: v for k, v in optimizer.items() if k != "slots"}
    slots = {OPTIMIZER_PREFIX + k: np.asarray(v) for k, v in optimizer.get("slots", {}).items()}
    return scalars, slots


def save_checkpoint(state: CheckpointState, path: Union[str, Path]) -> Path:
    """
    Write a checkpoint atomically (temp file then rename).

    Args:
        state (CheckpointState): State to persist
        path: Destination file

    Returns:
        Path: The written file
    """
    path = Path(path)
    ensure_directory(path.parent)
    scalars, slots = _split_optimizer(state.optimizer)
    tensors: List[Tuple[str, np.ndarray, bool]] = [
        (name, np.ascontiguousarray(state.params[name]), bool(state.frozen.get(name, False)))
        for name in sorted(state.params)
    ]
    tensors += [(name, np.ascontiguousarray(arr), False) for name, arr in sorted(slots.items())]

    index = []
    chunks = []
    offset = 0
    for name, arr, frozen in tensors:
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.replace(">", "<"), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw), "frozen": frozen})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": config.CHECKPOINT_FORMAT_VERSION,
        "kind": state.kind,
        "config": state.config,
        "step": int(state.step),
        "vocab": state.vocab,
        "optimizer": scalars,
        "rng_state": state.rng_state,
        "extra": state.extra,
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(canonical_json(header).encode("utf-8") + b"\n")
        fh.write(payload)
    tmp.replace(path)
    logger.debug(f"Saved {state.kind} checkpoint at step {state.step} to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> CheckpointState:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        CheckpointVersionError: Format version differs from this build
        CheckpointChecksumError: Truncated or corrupted file
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointChecksumError(f"Checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointChecksumError(f"{path} is not a checkpoint (bad magic)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointChecksumError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointChecksumError(f"{path}: corrupt header: {e}") from e
    version = header.get("format_version")
    if version != config.CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version}, expected {config.CHECKPOINT_FORMAT_VERSION}"
        )
    payload = blob[end + 1:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointChecksumError(f"{path}: payload checksum mismatch")

    params: Dict[str, np.ndarray] = {}
    frozen: Dict[str, bool] = {}
    slots: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        arr = arr.astype(arr.dtype.newbyteorder("="), copy=False)
        name = entry["name"]
        if name.startswith(OPTIMIZER_PREFIX):
            slots[name[len(OPTIMIZER_PREFIX):]] = arr
        else:
            params[name] = arr
            frozen[name] = bool(entry["frozen"])
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = dict(header["optimizer"])
        optimizer["slots"] = slots
    return CheckpointState(
        kind=header["kind"],
        config=header["config"],
        step=int(header["step"]),
        vocab=header.get("vocab"),
        params=params,
        frozen=frozen,
        optimizer=optimizer,
        rng_state=header.get("rng_state"),
        extra=header.get("extra") or {},
    )


def checkpoint_id(path: Union[str, Path]) -> str:
    """Short content hash identifying a checkpoint file in reports."""
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]
