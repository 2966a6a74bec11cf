"""
Continuous 7-DoF actions <-> token strings.

The string codec renders each component as ordinary characters (sign, one integer
digit, a point, ``decimals`` fraction digits) so actions live in the same output
space as text answers. The bin codec maps each component to one of ``num_bins``
dedicated tokens and is kept as the baseline.
"""

import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal
from typing import Dict, List, Sequence, Tuple

import numpy as np

import config
from exceptions import BinDecodeError, ChunkParseError, CodecRangeError, ConfigError, ParseError

logger = logging.getLogger('vla.action_codec')

COMPONENTS = ("dx", "dy", "dz", "roll", "pitch", "yaw", "gripper")
TRANSLATION_RANGE = (-1.0, 1.0)
ROTATION_RANGE = (-math.pi, math.pi)
DIGITS = frozenset("0123456789")
SIGN = "-"
POINT = "."
COMPONENT_SEPARATOR = "|"
ACTION_SEPARATOR = ";"


@dataclass(frozen=True)
class ActionVector:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    gripper: int = 0

    def __post_init__(self):
        for name in COMPONENTS[:6]:
            value = getattr(self, name)
            lo, hi = component_range(name)
            if not math.isfinite(value) or not lo <= value <= hi:
                raise CodecRangeError(f"{name}={value} outside [{lo}, {hi}]")
        if self.gripper not in (0, 1):
            raise CodecRangeError(f"gripper must be 0 or 1, got {self.gripper}")

    def as_tuple(self) -> Tuple[float, ...]:
        return tuple(getattr(self, name) for name in COMPONENTS)

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> "ActionVector":
        values = list(values)
        return cls(*[float(v) for v in values[:6]], gripper=int(round(values[6])))


@dataclass(frozen=True)
class ActionChunk:
    actions: Tuple[ActionVector, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        if not 1 <= len(self.actions) <= config.MAX_HORIZON:
            raise CodecRangeError(
                f"chunk length {len(self.actions)} outside [1, {config.MAX_HORIZON}]"
            )

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def as_array(self) -> np.ndarray:
        return np.array([a.as_tuple() for a in self.actions], dtype=np.float64)

    @classmethod
    def from_array(cls, rows) -> "ActionChunk":
        return cls(tuple(ActionVector.from_sequence(r) for r in rows))


@dataclass(frozen=True)
class CodecConfig:
    decimals: int = config.ACTION_DECIMALS
    component_order: Tuple[str, ...] = COMPONENTS
    component_separator: str = COMPONENT_SEPARATOR
    action_separator: str = ACTION_SEPARATOR
    max_horizon: int = config.MAX_HORIZON

    def __post_init__(self):
        if self.decimals < 1:
            raise ConfigError(f"decimals must be >= 1, got {self.decimals}")
        if sorted(self.component_order) != sorted(COMPONENTS):
            raise ConfigError(f"component_order must permute {COMPONENTS}")
        if self.component_separator == self.action_separator:
            raise ConfigError("component and action separators must differ")

    def scalar_length(self, negative: bool) -> int:
        return self.decimals + 2 + (1 if negative else 0)


def _default_ranges() -> Dict[str, Tuple[float, float]]:
    return {name: component_range(name) for name in COMPONENTS}


@dataclass(frozen=True)
class BinCodecConfig:
    num_bins: int = 256
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=_default_ranges)

    def __post_init__(self):
        if self.num_bins < 2:
            raise ConfigError(f"num_bins must be >= 2, got {self.num_bins}")
        for name in COMPONENTS:
            lo, hi = self.ranges[name]
            if not lo < hi:
                raise ConfigError(f"range for {name} must have min < max, got {(lo, hi)}")

    def width(self, name: str) -> float:
        lo, hi = self.ranges[name]
        return (hi - lo) / self.num_bins


def component_range(name: str) -> Tuple[float, float]:
    if name in ("dx", "dy", "dz"):
        return TRANSLATION_RANGE
    if name in ("roll", "pitch", "yaw"):
        return ROTATION_RANGE
    if name == "gripper":
        return (0.0, 1.0)
    raise KeyError(name)


# ---------------------------------------------------------------------------
# String codec
# ---------------------------------------------------------------------------

def quantize(value: float, decimals: int = config.ACTION_DECIMALS) -> float:
    """
    Round half away from zero to ``decimals`` fractional digits.

    Args:
        value (float): Finite real
        decimals (int): Fraction digits kept

    Returns:
        float: Nearest double to the rounded decimal; never negative zero
    """
    if not math.isfinite(value):
        raise CodecRangeError(f"cannot quantize non-finite value {value}")
    step = Decimal(1).scaleb(-decimals)
    q = float(Decimal(repr(float(value))).quantize(step, rounding=ROUND_HALF_UP))
    return q + 0.0


def _inner_bound(limit: float, decimals: int) -> float:
    # Largest representable magnitude that stays inside +/-limit after quantization
    step = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(limit))).quantize(step, rounding=ROUND_DOWN))


def quantize_action(action: ActionVector, decimals: int = config.ACTION_DECIMALS) -> ActionVector:
    values = []
    for name in COMPONENTS[:6]:
        lo, hi = component_range(name)
        v = quantize(getattr(action, name), decimals)
        values.append(min(max(v, -_inner_bound(-lo, decimals)), _inner_bound(hi, decimals)))
    return ActionVector(*values, gripper=action.gripper)


def quantize_chunk(chunk: ActionChunk, decimals: int = config.ACTION_DECIMALS) -> ActionChunk:
    return ActionChunk(tuple(quantize_action(a, decimals) for a in chunk))


def encode_scalar(value: float, cfg: CodecConfig = CodecConfig()) -> List[str]:
    """
    Render one real as character tokens: optional ``-``, one digit, ``.``, fraction digits.

    Args:
        value (float): Finite real with magnitude below 10 after quantization
        cfg (CodecConfig): Codec settings

    Returns:
        List[str]: Character tokens, e.g. ``['0', '.', '0', '3', '1', '2']`` for 0.0312
    """
    q = quantize(value, cfg.decimals)
    if abs(q) >= 10:
        raise CodecRangeError(f"|{value}| >= 10 cannot be encoded with one integer digit")
    text = f"{abs(q):.{cfg.decimals}f}"
    return ([SIGN] if q < 0 else []) + list(text)


def decode_scalar(tokens: Sequence[str], cfg: CodecConfig = CodecConfig()) -> float:
    """
    Parse ``sign? digit '.' digit{decimals}`` back to a real.

    Raises:
        ParseError: With the index of the first offending token
    """
    tokens = list(tokens)
    pos = 0
    negative = False
    if tokens and tokens[0] == SIGN:
        negative = True
        pos = 1
    if len(tokens) <= pos:
        raise ParseError("sequence too short: expected integer digit", pos)
    if tokens[pos] not in DIGITS:
        raise ParseError(f"expected digit, got {tokens[pos]!r}", pos)
    if len(tokens) <= pos + 1:
        raise ParseError("sequence too short: expected '.'", pos + 1)
    if tokens[pos + 1] != POINT:
        raise ParseError(f"expected '.', got {tokens[pos + 1]!r}", pos + 1)
    for i in range(cfg.decimals):
        idx = pos + 2 + i
        if idx >= len(tokens):
            raise ParseError("sequence too short: expected fraction digit", idx)
        if tokens[idx] not in DIGITS:
            raise ParseError(f"expected digit, got {tokens[idx]!r}", idx)
    end = pos + 2 + cfg.decimals
    if len(tokens) > end:
        raise ParseError(f"unexpected trailing token {tokens[end]!r}", end)
    magnitude = int(tokens[pos] + "".join(tokens[pos + 2:end])) / (10 ** cfg.decimals)
    value = -magnitude if negative else magnitude
    return value + 0.0


def encode_chunk(chunk: ActionChunk, cfg: CodecConfig = CodecConfig()) -> List[str]:
    """
    Encode a chunk: components in ``component_order`` joined by the component
    separator, actions joined by the action separator, gripper as one digit.
    """
    if len(chunk) > cfg.max_horizon:
        raise CodecRangeError(f"chunk length {len(chunk)} exceeds max horizon {cfg.max_horizon}")
    out: List[str] = []
    for a_idx, action in enumerate(chunk):
        if a_idx:
            out.append(cfg.action_separator)
        for c_idx, name in enumerate(cfg.component_order):
            if c_idx:
                out.append(cfg.component_separator)
            if name == "gripper":
                out.append(str(int(action.gripper)))
            else:
                out.extend(encode_scalar(getattr(action, name), cfg))
    return out


def _split(tokens: List[str], separator: str, offset: int) -> List[Tuple[int, List[str]]]:
    parts: List[Tuple[int, List[str]]] = []
    start = 0
    for i, tok in enumerate(tokens):
        if tok == separator:
            parts.append((offset + start, tokens[start:i]))
            start = i + 1
    parts.append((offset + start, tokens[start:]))
    return parts


def decode_chunk(tokens: Sequence[str], cfg: CodecConfig = CodecConfig()) -> ActionChunk:
    """
    Parse an encoded chunk; exact inverse of ``encode_chunk`` on quantized chunks.

    Raises:
        ChunkParseError: Wrong component count, separator misuse, malformed scalar,
            or a value outside its component range
    """
    tokens = list(tokens)
    if not tokens:
        raise ChunkParseError("empty action sequence", 0)
    groups = _split(tokens, cfg.action_separator, 0)
    if len(groups) > cfg.max_horizon:
        raise ChunkParseError(
            f"{len(groups)} actions exceed max horizon {cfg.max_horizon}", groups[cfg.max_horizon][0]
        )
    actions = []
    for a_idx, (a_start, group) in enumerate(groups):
        parts = _split(group, cfg.component_separator, a_start)
        if len(parts) != len(cfg.component_order):
            raise ChunkParseError(
                f"expected {len(cfg.component_order)} components, got {len(parts)}",
                a_start, action_index=a_idx,
            )
        values: Dict[str, float] = {}
        for c_idx, ((p_start, part), name) in enumerate(zip(parts, cfg.component_order)):
            if name == "gripper":
                if len(part) != 1 or part[0] not in ("0", "1"):
                    raise ChunkParseError(
                        "gripper must be a single '0' or '1' token", p_start,
                        action_index=a_idx, component_index=c_idx,
                    )
                values[name] = int(part[0])
                continue
            try:
                value = decode_scalar(part, cfg)
            except ParseError as e:
                raise ChunkParseError(
                    str(e).rsplit(" (position", 1)[0], p_start + e.position,
                    action_index=a_idx, component_index=c_idx,
                ) from e
            lo, hi = component_range(name)
            if not lo <= value <= hi:
                raise ChunkParseError(
                    f"{name}={value} outside [{lo}, {hi}]", p_start,
                    action_index=a_idx, component_index=c_idx,
                )
            values[name] = value
        actions.append(ActionVector(**values))
    return ActionChunk(tuple(actions))


# ---------------------------------------------------------------------------
# Bin codec (baseline)
# ---------------------------------------------------------------------------

def bin_token(index: int) -> str:
    return f"<bin_{index}>"


def bin_index(token: str) -> int:
    if not (token.startswith("<bin_") and token.endswith(">")):
        raise BinDecodeError(f"not a bin token: {token!r}")
    try:
        return int(token[5:-1])
    except ValueError:
        raise BinDecodeError(f"not a bin token: {token!r}")


def bin_encode(action: ActionVector, cfg: BinCodecConfig = BinCodecConfig()) -> List[int]:
    """
    Uniformly bin each component; the minimum maps to bin 0, the maximum to ``num_bins - 1``.

    Returns:
        List[int]: One bin index per component, in ``COMPONENTS`` order
    """
    out = []
    for name in COMPONENTS:
        lo, hi = cfg.ranges[name]
        value = float(getattr(action, name))
        if not lo <= value <= hi:
            raise CodecRangeError(f"{name}={value} outside bin range [{lo}, {hi}]")
        idx = int(math.floor((value - lo) / (hi - lo) * cfg.num_bins))
        out.append(min(max(idx, 0), cfg.num_bins - 1))
    return out


def bin_decode(ids: Sequence[int], cfg: BinCodecConfig = BinCodecConfig()) -> ActionVector:
    """Map bin indices back to bin centers (gripper snapped to {0, 1})."""
    ids = list(ids)
    if len(ids) != len(COMPONENTS):
        raise BinDecodeError(f"expected {len(COMPONENTS)} bin ids, got {len(ids)}")
    values = {}
    for name, idx in zip(COMPONENTS, ids):
        if not 0 <= int(idx) < cfg.num_bins:
            raise BinDecodeError(f"bin id {idx} out of range [0, {cfg.num_bins})")
        lo, _ = cfg.ranges[name]
        center = lo + (int(idx) + 0.5) * cfg.width(name)
        values[name] = int(center >= 0.5) if name == "gripper" else center
    return ActionVector(**values)


def bin_encode_chunk(chunk: ActionChunk, cfg: BinCodecConfig = BinCodecConfig()) -> List[str]:
    return [bin_token(i) for action in chunk for i in bin_encode(action, cfg)]


def bin_decode_chunk(tokens: Sequence[str], cfg: BinCodecConfig = BinCodecConfig()) -> ActionChunk:
    ids = [bin_index(t) for t in tokens]
    n = len(COMPONENTS)
    if not ids or len(ids) % n or len(ids) // n > config.MAX_HORIZON:
        raise BinDecodeError(f"bin sequence length {len(ids)} is not a whole chunk")
    return ActionChunk(tuple(bin_decode(ids[i:i + n], cfg) for i in range(0, len(ids), n)))


def quantization_error_report(
    codec_cfg: CodecConfig = CodecConfig(),
    bin_cfg: BinCodecConfig = BinCodecConfig(),
    points: int = 20001,
) -> Dict[str, Dict[str, float]]:
    """
    Sweep a dense grid over the translation range and measure round-trip error of both codecs.

    Returns:
        Dict[str, Dict[str, float]]: ``{"string": {...}, "bin": {...}}`` with
        ``max_abs_error``, ``mean_abs_error`` and the analytic ``bound``
    """
    lo, hi = TRANSLATION_RANGE
    grid = np.linspace(lo, hi, points)
    string_err = np.array([abs(decode_scalar(encode_scalar(v, codec_cfg), codec_cfg) - v) for v in grid])
    bin_err = []
    for v in grid:
        action = ActionVector(dx=float(v))
        bin_err.append(abs(bin_decode(bin_encode(action, bin_cfg), bin_cfg).dx - v))
    bin_err = np.array(bin_err)
    report = {
        "string": {
            "max_abs_error": float(string_err.max()),
            "mean_abs_error": float(string_err.mean()),
            "bound": 0.5 * 10.0 ** (-codec_cfg.decimals),
        },
        "bin": {
            "max_abs_error": float(bin_err.max()),
            "mean_abs_error": float(bin_err.mean()),
            "bound": 0.5 * bin_cfg.width("dx"),
        },
    }
    logger.debug(f"Quantization error report: {report}")
    return report
