import numpy as np
import pytest
from bitarray import bitarray

from cpri_compression.exceptions import CorruptStreamError, InputShapeError
from cpri_compression.range_coder import MAXIMUM_TOTAL, decode_symbols, encode_symbols


def test_decodes_what_it_encodes():
    cumulative = [3, 4, 10, 16]
    symbols = np.random.default_rng(0).choice(4, size=500, p=[3 / 16, 1 / 16, 6 / 16, 6 / 16]).tolist()

    payload = encode_symbols(symbols, cumulative)

    assert decode_symbols(payload, len(symbols), cumulative) == symbols


def test_skewed_sources_approach_their_entropy():
    probabilities = np.array([0.9, 0.05, 0.05])
    cumulative = [900, 950, 1000]
    symbols = np.random.default_rng(1).choice(3, size=4000, p=probabilities).tolist()

    payload = encode_symbols(symbols, cumulative)

    ideal = -sum(np.log2(probabilities[s]) for s in symbols)
    assert ideal - 2 <= len(payload) <= ideal * 1.01 + 32


def test_single_symbol_alphabet_costs_almost_nothing():
    payload = encode_symbols([0] * 1000, [1])

    assert len(payload) <= 2
    assert decode_symbols(payload, 1000, [1]) == [0] * 1000


def test_zero_frequency_symbols_cannot_be_coded():
    with pytest.raises(InputShapeError) as error:
        encode_symbols([1], [2, 2, 4])

    assert str(error.value) == "Symbol 1 has zero frequency"


def test_frequency_total_is_bounded():
    with pytest.raises(InputShapeError):
        encode_symbols([0], [MAXIMUM_TOTAL + 1])


def test_reading_past_the_payload_is_corrupt():
    with pytest.raises(CorruptStreamError):
        decode_symbols(bitarray(), 200, [1, 2])
