"""
32-bit integer arithmetic coder with carry (underflow) handling.

Frequency tables are cumulative: `cumulative[s]` is the total frequency of symbols 0..s,
so `cumulative[-1]` is the table total, which must not exceed `MAXIMUM_TOTAL`.
"""

from bisect import bisect_right
from typing import List, Sequence

from bitarray import bitarray

from cpri_compression.exceptions import CorruptStreamError, InputShapeError

STATE_BITS = 32
_FULL_RANGE = 1 << STATE_BITS
_HALF_RANGE = _FULL_RANGE >> 1
_QUARTER_RANGE = _HALF_RANGE >> 1
_STATE_MASK = _FULL_RANGE - 1
MAXIMUM_TOTAL = _QUARTER_RANGE + 2


def _check_table(cumulative: Sequence[int]) -> None:
    if not cumulative or cumulative[-1] > MAXIMUM_TOTAL:
        raise InputShapeError(f"Frequency total must be within (0, {MAXIMUM_TOTAL}]")


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.high = _STATE_MASK
        self.pending = 0
        self.output = bitarray(endian="big")

    def _emit(self, bit: int) -> None:
        self.output.append(bit)
        if self.pending:
            self.output.extend([bit ^ 1] * self.pending)
            self.pending = 0

    def write(self, cumulative: Sequence[int], symbol: int) -> None:
        span = self.high - self.low + 1
        total = cumulative[-1]
        symbol_low = cumulative[symbol - 1] if symbol > 0 else 0
        symbol_high = cumulative[symbol]
        if symbol_high == symbol_low:
            raise InputShapeError(f"Symbol {symbol} has zero frequency")
        low = self.low + symbol_low * span // total
        high = self.low + symbol_high * span // total - 1
        while ((low ^ high) & _HALF_RANGE) == 0:
            self._emit(low >> (STATE_BITS - 1))
            low = (low << 1) & _STATE_MASK
            high = ((high << 1) & _STATE_MASK) | 1
        while low & ~high & _QUARTER_RANGE:
            self.pending += 1
            low = (low << 1) ^ _HALF_RANGE
            high = ((high ^ _HALF_RANGE) << 1) | _HALF_RANGE | 1
        self.low, self.high = low, high

    def finish(self) -> bitarray:
        self._emit(1)
        return self.output


class RangeDecoder:
    """Reads past the end of the payload as zeros, up to one state width; further reads mean a corrupt payload"""

    def __init__(self, payload: bitarray):
        self.payload = payload
        self.position = 0
        self.low = 0
        self.high = _STATE_MASK
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._read_bit()

    def _read_bit(self) -> int:
        position = self.position
        self.position += 1
        if position < len(self.payload):
            return self.payload[position]
        if position >= len(self.payload) + STATE_BITS:
            raise CorruptStreamError(f"Payload exhausted after {len(self.payload)} bits")
        return 0

    def read(self, cumulative: Sequence[int]) -> int:
        span = self.high - self.low + 1
        total = cumulative[-1]
        value = ((self.code - self.low + 1) * total - 1) // span
        if not 0 <= value < total:
            raise CorruptStreamError("Decoder state left the coding interval")
        symbol = bisect_right(cumulative, value)
        symbol_low = cumulative[symbol - 1] if symbol > 0 else 0
        low = self.low + symbol_low * span // total
        high = self.low + cumulative[symbol] * span // total - 1
        code = self.code
        while ((low ^ high) & _HALF_RANGE) == 0:
            code = ((code << 1) & _STATE_MASK) | self._read_bit()
            low = (low << 1) & _STATE_MASK
            high = ((high << 1) & _STATE_MASK) | 1
        while low & ~high & _QUARTER_RANGE:
            code = (code & _HALF_RANGE) | ((code << 1) & (_STATE_MASK >> 1)) | self._read_bit()
            low = (low << 1) ^ _HALF_RANGE
            high = ((high ^ _HALF_RANGE) << 1) | _HALF_RANGE | 1
        self.low, self.high, self.code = low, high, code
        return symbol


def encode_symbols(symbols: Sequence[int], cumulative: Sequence[int]) -> bitarray:
    _check_table(cumulative)
    encoder = RangeEncoder()
    for symbol in symbols:
        encoder.write(cumulative, symbol)
    return encoder.finish()


def decode_symbols(payload: bitarray, count: int, cumulative: Sequence[int]) -> List[int]:
    _check_table(cumulative)
    decoder = RangeDecoder(payload)
    return [decoder.read(cumulative) for _ in range(count)]
