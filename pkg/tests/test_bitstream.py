import numpy as np
import pytest
from bitarray import bitarray

from cpri_compression.bitstream import (
    Bitstream,
    Scheme,
    pack_indices,
    read_stream_file,
    unpack_indices,
    write_stream_file,
)
from cpri_compression.exceptions import CorruptStreamError, InputShapeError


def _stream(scheme=Scheme.SCALAR, **fields) -> Bitstream:
    defaults = dict(
        scheme=scheme,
        scenario="downlink",
        n_prime=40,
        q_s=8,
        scaling=(3, 255),
        payload=bitarray("1011001110001"),
    )
    defaults.update(fields)
    return Bitstream(**defaults)


def test_indices_are_packed_msb_first():
    packed = pack_indices(np.array([5, 0, 3]), 3)

    assert packed == bitarray("101000011")
    np.testing.assert_array_equal(unpack_indices(packed, 3, 3), [5, 0, 3])


def test_indices_must_fit_their_width():
    with pytest.raises(InputShapeError) as error:
        pack_indices(np.array([8]), 3)

    assert str(error.value) == "Indices do not fit in 3 bits"


def test_short_payload_is_corrupt():
    with pytest.raises(CorruptStreamError) as error:
        unpack_indices(bitarray("101"), 3, 2)

    assert str(error.value) == "Payload holds 3 bits, 6 needed"


def test_body_bits_count_scaling_segment_and_payload():
    stream = _stream()

    assert stream.n_t == 2
    assert stream.payload_bits == 13
    assert stream.body_bits == 2 * 8 + 13


@pytest.mark.parametrize(
    "fields",
    [
        {"scheme": Scheme.SCALAR},
        {"scheme": Scheme.VECTOR, "scenario": "uplink"},
        {"scheme": Scheme.NEURAL, "symbol_counts": (40, 40)},
        {"scheme": Scheme.NEURAL, "symbol_counts": (40, 40), "rate_index": 2},
        {"scheme": Scheme.REFINEMENT, "symbol_counts": (40, 40), "layer_index": 3},
    ],
)
def test_header_fields_survive_serialization(fields):
    stream = _stream(**fields)

    assert Bitstream.from_bytes(stream.to_bytes()) == stream


def test_fixed_header_is_big_endian():
    data = _stream().to_bytes()

    assert data[:4] == b"CPRZ"
    assert data[4:7] == bytes([1, 0, 0])
    assert data[7:9] == (40).to_bytes(2, "big")
    assert data[9:11] == (2).to_bytes(2, "big")
    assert data[11] == 8
    assert data[12:16] == (13).to_bytes(4, "big")
    assert data[16:18] == bytes([3, 255])


@pytest.mark.parametrize(
    "mangle, message",
    [
        (lambda data: b"CPRX" + data[4:], "Bad magic b'CPRX'"),
        (lambda data: data[:4] + bytes([2]) + data[5:], "Unsupported stream version 2, expected 1"),
        (lambda data: data[:10], "Stream of 10 bytes is shorter than the header"),
        (lambda data: data[:-1], "Stream body too short for 2 factors and 13 payload bits"),
        (lambda data: data[:5] + bytes([9]) + data[6:], "Unknown scheme 9 or scenario 0"),
    ],
)
def test_rejects_damaged_streams(mangle, message):
    with pytest.raises(CorruptStreamError) as error:
        Bitstream.from_bytes(mangle(_stream().to_bytes()))

    assert str(error.value) == message


def test_truncated_symbol_counts_are_corrupt():
    data = _stream(Scheme.NEURAL, symbol_counts=(40, 40)).to_bytes()

    with pytest.raises(CorruptStreamError):
        Bitstream.from_bytes(data[:18])


def test_stream_files_hold_length_prefixed_records(tmp_path):
    streams = [
        _stream(Scheme.REFINEMENT, symbol_counts=(40, 40), layer_index=1),
        _stream(Scheme.REFINEMENT, symbol_counts=(40, 40), layer_index=2, payload=bitarray("1")),
    ]
    path = tmp_path / "frames.cprz"

    write_stream_file(path, streams)

    assert read_stream_file(path) == streams


def test_truncated_stream_file_is_corrupt(tmp_path):
    path = tmp_path / "frames.cprz"
    write_stream_file(path, [_stream()])
    path.write_bytes(path.read_bytes() + b"\x00\x00")

    with pytest.raises(CorruptStreamError) as error:
        read_stream_file(path)

    assert "truncated record length" in str(error.value)
