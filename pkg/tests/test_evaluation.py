import logging

import numpy as np
import pytest
import torch

from cpri_compression.advanced_modes import RefinementStack, train_refinement_layer
from cpri_compression.classical_codecs import train_scalar, train_vector
from cpri_compression.codecs import NeuralCodec, RefinementCodec, ScalarCodec, VectorCodec, neural_model
from cpri_compression.entropy_codec import build_table
from cpri_compression.evaluation import (
    EvmAccumulator,
    evaluate_codec,
    filter_floor,
    rate_fidelity,
    simulate_link_drops,
)
from cpri_compression.latent_codecs import stack_real
from cpri_compression.pipeline import prepare_frames
from cpri_compression.signal_chain import EVM_DB_SATURATION, to_frequency_domain
from cpri_compression.training import TensorData, collect_symbols


def _interleaved(s):
    return stack_real(s).swapaxes(-1, -2).reshape(-1)


@pytest.fixture()
def scalar_codec(ctx, frames) -> ScalarCodec:
    return ScalarCodec(ctx, train_scalar(_interleaved(prepare_frames(frames, ctx).s), q_bits=4))


def test_evm_is_aggregated_over_the_dataset(ctx, frames):
    accumulator = EvmAccumulator(ctx)
    accumulator.add(frames[0], frames[0] * 0.9)
    accumulator.add(frames[1], frames[1])

    reference = [
        np.sum(np.abs(to_frequency_domain(frame, ctx.frame)[ctx.frame.occupied]) ** 2) for frame in frames[:2]
    ]
    expected = 100 * np.sqrt(0.01 * reference[0] / sum(reference))
    assert accumulator.result()[0] == pytest.approx(expected)
    assert accumulator.per_frame == [pytest.approx(10.0), 0.0]


def test_missing_reconstructions_count_as_silence(ctx, frames):
    accumulator = EvmAccumulator(ctx)

    accumulator.add(frames[0], None)

    assert accumulator.result() == (pytest.approx(100.0), pytest.approx(0.0))


def test_scalar_results_account_for_rate_and_ratio(ctx, frames, scalar_codec, caplog):
    result = evaluate_codec(scalar_codec, frames[:5], tag="check")

    assert result.frames == 5
    assert result.payload_bits == 5 * 2 * 40 * 4
    assert result.body_bits == result.payload_bits + 5 * 2 * 8
    assert result.bits_per_element == 4.0
    assert result.alpha == 1.0
    assert result.cr == pytest.approx(ctx.compression_ratio(2 * 40 * 4 + 16))
    assert 0 < result.evm_pct_p50 <= result.evm_pct_p95
    assert caplog.record_tuples[-1][2].startswith("scalar @ 4 [check]: 4.0000 bits/element")


def test_serialization_does_not_change_results(frames, scalar_codec):
    through_bytes = evaluate_codec(scalar_codec, frames[:3])
    in_memory = evaluate_codec(scalar_codec, frames[:3], through_bytes=False)

    assert (through_bytes.evm_pct, through_bytes.body_bits) == (in_memory.evm_pct, in_memory.body_bits)


def test_more_scalar_bits_lower_the_evm(ctx, frames):
    samples = _interleaved(prepare_frames(frames, ctx).s)

    coarse = evaluate_codec(ScalarCodec(ctx, train_scalar(samples, 2)), frames[:8])
    fine = evaluate_codec(ScalarCodec(ctx, train_scalar(samples, 5)), frames[:8])

    assert fine.evm_db > coarse.evm_db


def test_vector_alpha_is_the_entropy_coded_fraction(ctx, frames):
    codebook = train_vector(_interleaved(prepare_frames(frames, ctx).s), b=2, q_bits=2, seed=1)

    coded = evaluate_codec(VectorCodec(ctx, codebook, entropy_coded=True), frames[:4])
    fixed = evaluate_codec(VectorCodec(ctx, codebook, entropy_coded=False), frames[:4])

    assert fixed.alpha == pytest.approx(1.0)
    assert 0 < coded.alpha < 1.05
    assert coded.evm_pct == pytest.approx(fixed.evm_pct)


def test_filter_floor_of_the_resampler(ctx, frames):
    evm_pct, evm_db = filter_floor(frames, ctx)

    assert evm_pct < 2.0
    assert evm_db < EVM_DB_SATURATION


def test_rate_estimate_tracks_the_coded_rate(ctx, options, frames):
    torch.manual_seed(0)
    model = neural_model(options["model"])
    train = TensorData.from_prepared(prepare_frames(frames, ctx), ctx)
    codec = NeuralCodec(ctx, model, build_table(model.prior, collect_symbols(model, train)), 10.0, options["model"])

    estimated, realized = rate_fidelity(codec, frames[:6])

    assert estimated > 0
    assert realized == pytest.approx(estimated, abs=1.0)


def test_link_drops_decode_the_intact_prefix(ctx, options, frames, caplog):
    torch.manual_seed(0)
    train = TensorData.from_prepared(prepare_frames(frames[:16], ctx), ctx)
    validation = TensorData.from_prepared(prepare_frames(frames[16:], ctx), ctx)
    stack = RefinementStack([10.0, 100.0], 2, 4, 1, [3, 3])
    for layer in (1, 2):
        train_refinement_layer(stack, layer, ctx, train, validation, options["training"])
    codec = RefinementCodec(ctx, stack, options["model"])

    reliable = simulate_link_drops(codec, frames[:4], [0.0, 0.0])
    no_refinement = simulate_link_drops(codec, frames[:4], [0.0, 1.0])
    no_base = simulate_link_drops(codec, frames[:4], [1.0, 0.0])

    assert reliable.layers_decoded == {2: 4}
    assert no_refinement.layers_decoded == {1: 4}
    assert no_base.layers_decoded == {0: 4}
    assert no_base.evm_pct == pytest.approx(100.0)
    assert reliable.evm_pct == pytest.approx(evaluate_codec(codec, frames[:4]).evm_pct)
    assert any(message.startswith("Link drops [0.0, 1.0]") for _, level, message in caplog.record_tuples)
