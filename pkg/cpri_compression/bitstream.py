"""
CPRZ framing: a fixed header, the scaling-factor segment, then the byte-aligned payload.

Header layout (big-endian): magic "CPRZ", version u8, scheme u8, scenario u8, N' u16, N_t u16, Q_s u8,
payload bit length u32; entropy-coded schemes add a channel count u8 and one u32 symbol count per channel;
refinement adds a layer-index byte and variable-rate a rate-index byte.
"""

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Tuple

import numpy as np
from bitarray import bitarray

from cpri_compression.exceptions import CorruptStreamError, InputShapeError

MAGIC = b"CPRZ"
VERSION = 1
_FIXED_HEADER = struct.Struct(">4sBBBHHBI")
_FILE_RECORD = struct.Struct(">I")


class Scheme(IntEnum):
    SCALAR = 0
    VECTOR = 1
    LATENT_UNIFORM = 2
    LATENT_VQ = 3
    NEURAL = 4
    REFINEMENT = 5


SCENARIO_IDS = {"downlink": 0, "uplink": 1}
SCENARIO_NAMES = {v: k for k, v in SCENARIO_IDS.items()}


def pack_indices(indices: np.ndarray, width: int) -> bitarray:
    """Fixed-width unsigned fields, MSB-first"""
    indices = np.asarray(indices, dtype=np.int64).ravel()
    if indices.size and (indices.min() < 0 or indices.max() >= 1 << width):
        raise InputShapeError(f"Indices do not fit in {width} bits")
    bits = ((indices[:, None] >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8).ravel()
    packed = bitarray(endian="big")
    packed.frombytes(np.packbits(bits).tobytes())
    del packed[bits.size :]
    return packed


def unpack_indices(bits: bitarray, width: int, count: int) -> np.ndarray:
    if len(bits) < width * count:
        raise CorruptStreamError(f"Payload holds {len(bits)} bits, {width * count} needed")
    raw = np.unpackbits(np.frombuffer(bits.tobytes(), dtype=np.uint8))[: width * count]
    weights = 1 << np.arange(width - 1, -1, -1)
    return raw.reshape(count, width).astype(np.int64) @ weights


@dataclass
class Bitstream:
    scheme: Scheme
    scenario: str
    n_prime: int
    q_s: int
    scaling: Tuple[int, ...]
    payload: bitarray
    symbol_counts: Tuple[int, ...] = ()
    layer_index: Optional[int] = None
    rate_index: Optional[int] = None

    @property
    def n_t(self) -> int:
        return len(self.scaling)

    @property
    def payload_bits(self) -> int:
        return len(self.payload)

    @property
    def body_bits(self) -> int:
        """Scaling segment plus payload; this is what the compression ratio accounts for"""
        return self.q_s * self.n_t + self.payload_bits

    def _has_counts(self) -> bool:
        return self.scheme in (Scheme.NEURAL, Scheme.REFINEMENT)

    def to_bytes(self) -> bytes:
        header = _FIXED_HEADER.pack(
            MAGIC,
            VERSION,
            int(self.scheme),
            SCENARIO_IDS[self.scenario],
            self.n_prime,
            self.n_t,
            self.q_s,
            self.payload_bits,
        )
        if self._has_counts():
            header += struct.pack(f">B{len(self.symbol_counts)}I", len(self.symbol_counts), *self.symbol_counts)
        if self.scheme == Scheme.REFINEMENT:
            header += struct.pack(">B", self.layer_index or 0)
        if self.scheme == Scheme.NEURAL and self.rate_index is not None:
            header += struct.pack(">B", self.rate_index + 1)
        elif self.scheme == Scheme.NEURAL:
            header += struct.pack(">B", 0)
        scaling = pack_indices(np.asarray(self.scaling), self.q_s)
        scaling.fill()
        payload = self.payload.copy()
        payload.fill()
        return header + scaling.tobytes() + payload.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _FIXED_HEADER.size:
            raise CorruptStreamError(f"Stream of {len(data)} bytes is shorter than the header")
        magic, version, scheme_id, scenario_id, n_prime, n_t, q_s, payload_bits = _FIXED_HEADER.unpack_from(data)
        if magic != MAGIC:
            raise CorruptStreamError(f"Bad magic {magic!r}")
        if version != VERSION:
            raise CorruptStreamError(f"Unsupported stream version {version}, expected {VERSION}")
        try:
            scheme = Scheme(scheme_id)
            scenario = SCENARIO_NAMES[scenario_id]
        except (ValueError, KeyError) as e:
            raise CorruptStreamError(f"Unknown scheme {scheme_id} or scenario {scenario_id}") from e
        offset = _FIXED_HEADER.size
        counts: Tuple[int, ...] = ()
        layer_index = rate_index = None
        try:
            if scheme in (Scheme.NEURAL, Scheme.REFINEMENT):
                (channels,) = struct.unpack_from(">B", data, offset)
                counts = struct.unpack_from(f">{channels}I", data, offset + 1)
                offset += 1 + 4 * channels
                (tag,) = struct.unpack_from(">B", data, offset)
                offset += 1
                if scheme == Scheme.REFINEMENT:
                    layer_index = tag
                elif tag:
                    rate_index = tag - 1
        except struct.error as e:
            raise CorruptStreamError(f"Truncated header: {e}") from e
        scaling_bytes = -(-(n_t * q_s) // 8)
        body = bitarray(endian="big")
        body.frombytes(data[offset:])
        if len(body) < scaling_bytes * 8 + payload_bits:
            raise CorruptStreamError(f"Stream body too short for {n_t} factors and {payload_bits} payload bits")
        scaling = tuple(int(v) for v in unpack_indices(body[: n_t * q_s], q_s, n_t))
        payload = body[scaling_bytes * 8 : scaling_bytes * 8 + payload_bits]
        return cls(scheme, scenario, n_prime, q_s, scaling, payload, counts, layer_index, rate_index)


def write_stream_file(path, streams: List[Bitstream]) -> None:
    with open(path, "wb") as f:
        for stream in streams:
            data = stream.to_bytes()
            f.write(_FILE_RECORD.pack(len(data)))
            f.write(data)


def read_stream_file(path) -> List[Bitstream]:
    with open(path, "rb") as f:
        data = f.read()
    streams, offset = [], 0
    while offset < len(data):
        if offset + _FILE_RECORD.size > len(data):
            raise CorruptStreamError(f"{path}: truncated record length at byte {offset}")
        (length,) = _FILE_RECORD.unpack_from(data, offset)
        offset += _FILE_RECORD.size
        streams.append(Bitstream.from_bytes(data[offset : offset + length]))
        offset += length
    return streams
