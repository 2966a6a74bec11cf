import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, Iterable, Tuple, Union

import numpy as np

logger = logging.getLogger('vla.utils')


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and no whitespace so equal objects give equal text."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Dict[str, Any]) -> str:
    """
    Hash a configuration tree for provenance fields.

    Args:
        config (Dict[str, Any]): Configuration dictionary

    Returns:
        str: First 16 hex digits of the SHA-256 of its canonical JSON
    """
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()[:16]


def derive_seed(master_seed: int, *parts: Union[int, str]) -> int:
    """
    Derive an independent stream seed from a master seed and an index path.

    Parallel and serial generation agree because the seed depends only on
    (master seed, parts), never on execution order.

    Args:
        master_seed (int): Experiment master seed
        *parts: Stream identifiers, e.g. ("robot", episode_index)

    Returns:
        int: 63-bit seed
    """
    key = ":".join(str(p) for p in (master_seed,) + parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def make_rng(master_seed: int, *parts: Union[int, str]) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *parts))


def array_digest(arrays: Iterable[Tuple[str, np.ndarray]]) -> str:
    """
    Hash named arrays byte-for-byte (name, dtype, shape and raw buffer).

    Args:
        arrays: (name, array) pairs, hashed in the given order

    Returns:
        str: SHA-256 hex digest
    """
    h = hashlib.sha256()
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


def ensure_directory(directory: Union[str, Path]) -> bool:
    """
    Ensure a directory exists, creating it if necessary.

    Args:
        directory (Union[str, Path]): Directory path

    Returns:
        bool: True if directory exists or was created successfully
    """
    try:
        Path(directory).mkdir(parents=True, exist_ok=True)
        return True
    except OSError as e:
        logger.error(f"Error ensuring directory {directory}: {e}")
        return False


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> Tuple[float, float]:
    """
    Wilson score interval for a binomial rate.

    Args:
        successes (int): Number of successes
        trials (int): Number of trials

    Returns:
        Tuple[float, float]: (low, high), (0, 1) when there are no trials
    """
    if trials <= 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def format_rate(rate: float) -> str:
    """Format a [0, 1] rate as a percentage with two decimals, table style."""
    return f"{100.0 * rate:.2f}"
