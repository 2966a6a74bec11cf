import math

import numpy as np
import pytest

from action_codec import (
    ActionChunk,
    ActionVector,
    BinCodecConfig,
    CodecConfig,
    bin_decode,
    bin_decode_chunk,
    bin_encode,
    bin_encode_chunk,
    bin_index,
    decode_chunk,
    decode_scalar,
    encode_chunk,
    encode_scalar,
    quantization_error_report,
    quantize,
    quantize_chunk,
)
from exceptions import BinDecodeError, ChunkParseError, CodecRangeError, ConfigError, ParseError


def _random_chunk(rng, horizon):
    rows = []
    for _ in range(horizon):
        t = rng.uniform(-1.0, 1.0, size=3)
        r = rng.uniform(-math.pi, math.pi, size=3)
        rows.append([*t, *r, int(rng.integers(0, 2))])
    return ActionChunk.from_array(rows)


def test_encode_scalar_examples():
    assert encode_scalar(0.0312) == ["0", ".", "0", "3", "1", "2"]
    assert encode_scalar(-0.5) == ["-", "0", ".", "5", "0", "0", "0"]
    assert encode_scalar(3.14159) == ["3", ".", "1", "4", "1", "6"]
    assert encode_scalar(0.0312, CodecConfig(decimals=2)) == ["0", ".", "0", "3"]


def test_quantize_rounds_half_away_from_zero():
    assert quantize(0.00005) == 0.0001
    assert quantize(-0.00005) == -0.0001
    assert quantize(0.12344) == 0.1234


def test_tiny_negative_encodes_without_sign():
    q = quantize(-0.00004)
    assert q == 0.0 and math.copysign(1.0, q) == 1.0
    assert encode_scalar(-0.00004)[0] != "-"


def test_encode_scalar_rejects_two_integer_digits():
    with pytest.raises(CodecRangeError):
        encode_scalar(12.5)


def test_chunk_roundtrip_on_quantized_chunks():
    rng = np.random.default_rng(0)
    for _ in range(10000):
        chunk = quantize_chunk(_random_chunk(rng, int(rng.integers(1, 5))))
        assert decode_chunk(encode_chunk(chunk)) == chunk


def test_roundtrip_with_permuted_component_order():
    cfg = CodecConfig(component_order=("gripper", "yaw", "dx", "dy", "dz", "roll", "pitch"))
    chunk = quantize_chunk(_random_chunk(np.random.default_rng(3), 2))
    tokens = encode_chunk(chunk, cfg)
    assert tokens[0] in ("0", "1")
    assert decode_chunk(tokens, cfg) == chunk


def test_extreme_rotation_stays_in_range():
    chunk = quantize_chunk(ActionChunk((ActionVector(yaw=math.pi, roll=-math.pi),)))
    assert abs(chunk.actions[0].yaw) <= math.pi
    assert decode_chunk(encode_chunk(chunk)) == chunk


def test_decode_scalar_reports_offending_position():
    with pytest.raises(ParseError) as err:
        decode_scalar(["0", ",", "1", "2", "3", "4"])
    assert err.value.position == 1
    with pytest.raises(ParseError) as err:
        decode_scalar(["-", "0", ".", "1"])
    assert err.value.position == 4
    with pytest.raises(ParseError) as err:
        decode_scalar(["0", ".", "1", "2", "3", "4", "5"])
    assert err.value.position == 6


def test_decode_chunk_locates_malformed_component():
    tokens = encode_chunk(ActionChunk((ActionVector(),)))
    # second component starts after six tokens and one separator
    tokens[8] = "5"
    with pytest.raises(ChunkParseError) as err:
        decode_chunk(tokens)
    assert err.value.position == 8
    assert err.value.action_index == 0
    assert err.value.component_index == 1


def test_decode_chunk_component_count_and_gripper():
    tokens = encode_chunk(ActionChunk((ActionVector(),)))
    with pytest.raises(ChunkParseError, match="expected 7 components"):
        decode_chunk(tokens[:-2])
    tokens[-1] = "2"
    with pytest.raises(ChunkParseError, match="gripper"):
        decode_chunk(tokens)
    with pytest.raises(ChunkParseError):
        decode_chunk([])


def test_decode_chunk_rejects_out_of_range_translation():
    tokens = encode_chunk(ActionChunk((ActionVector(),)))
    tokens[0] = "2"
    with pytest.raises(ChunkParseError, match="outside"):
        decode_chunk(tokens)


def test_decode_chunk_rejects_too_many_actions():
    chunk = ActionChunk(tuple(ActionVector() for _ in range(4)))
    tokens = encode_chunk(chunk) + [";"] + encode_chunk(ActionChunk((ActionVector(),)))
    with pytest.raises(ChunkParseError, match="max horizon"):
        decode_chunk(tokens)


def test_codec_config_validation():
    with pytest.raises(ConfigError):
        CodecConfig(decimals=0)
    with pytest.raises(ConfigError):
        CodecConfig(component_separator=";")
    with pytest.raises(ConfigError):
        BinCodecConfig(num_bins=1)


def test_action_vector_range_checks():
    with pytest.raises(CodecRangeError):
        ActionVector(dx=1.5)
    with pytest.raises(CodecRangeError):
        ActionVector(gripper=2)
    with pytest.raises(CodecRangeError):
        ActionChunk(())


def test_bin_edges_and_centers():
    cfg = BinCodecConfig(num_bins=256)
    assert bin_encode(ActionVector(dx=-1.0, dy=1.0, gripper=1), cfg)[:2] == [0, 255]
    assert bin_encode(ActionVector(gripper=1), cfg)[-1] == 255
    decoded = bin_decode(bin_encode(ActionVector(dx=0.3, gripper=1), cfg), cfg)
    assert abs(decoded.dx - 0.3) <= 0.5 * cfg.width("dx")
    assert decoded.gripper == 1


@pytest.mark.parametrize("seed", range(5))
def test_bin_chunk_roundtrip_error_is_bounded(seed):
    cfg = BinCodecConfig(num_bins=64)
    chunk = _random_chunk(np.random.default_rng(seed), 3)
    tokens = bin_encode_chunk(chunk, cfg)
    assert len(tokens) == 21
    decoded = bin_decode_chunk(tokens, cfg)
    for a, b in zip(chunk, decoded):
        for name, x, y in zip(("dx", "dy", "dz", "roll", "pitch", "yaw"), a.as_tuple(), b.as_tuple()):
            assert abs(x - y) <= 0.5 * cfg.width(name) + 1e-12
        assert a.gripper == b.gripper


def test_bin_decode_errors():
    with pytest.raises(BinDecodeError):
        bin_index("0")
    with pytest.raises(BinDecodeError):
        bin_decode([0] * 6)
    with pytest.raises(BinDecodeError):
        bin_decode([0, 0, 0, 0, 0, 0, 300])
    with pytest.raises(BinDecodeError, match="whole chunk"):
        bin_decode_chunk(["<bin_0>"] * 8)


def test_quantization_error_report_within_bounds():
    report = quantization_error_report(points=2001)
    for codec in ("string", "bin"):
        assert report[codec]["max_abs_error"] <= report[codec]["bound"] + 1e-9
    assert report["string"]["max_abs_error"] < report["bin"]["max_abs_error"]
