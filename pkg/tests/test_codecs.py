import numpy as np
import pytest
import torch

from cpri_compression.advanced_modes import RefinementStack, VariableRateSet, train_refinement_layer, train_vr_entropy
from cpri_compression.bitstream import Bitstream, Scheme
from cpri_compression.bundle import ModelBundle
from cpri_compression.classical_codecs import train_scalar, train_vector
from cpri_compression.codecs import (
    CODECS,
    LatentUniformCodec,
    LatentVqCodec,
    NeuralCodec,
    RefinementCodec,
    ScalarCodec,
    VariableRateCodec,
    VectorCodec,
    load_codec,
    neural_model,
)
from cpri_compression.entropy_codec import build_table, clamp_to_support
from cpri_compression.exceptions import (
    BundleFormatError,
    CorruptStreamError,
    ImproperlyConfigured,
    UntrainedLayerError,
)
from cpri_compression.latent_codecs import LatentUniformModel, LatentVqModel, stack_real, unstack_real
from cpri_compression.pipeline import SignalContext, encode_side, prepare_frames, reconstruct_frames
from cpri_compression.training import TensorData, collect_symbols


def _interleaved(s: np.ndarray) -> np.ndarray:
    return stack_real(s).swapaxes(-1, -2).reshape(-1)


@pytest.fixture()
def tensors(ctx, frames):
    return (
        TensorData.from_prepared(prepare_frames(frames[:16], ctx), ctx),
        TensorData.from_prepared(prepare_frames(frames[16:], ctx), ctx),
    )


@pytest.fixture()
def scalar_codec(ctx, frames) -> ScalarCodec:
    return ScalarCodec(ctx, train_scalar(_interleaved(prepare_frames(frames, ctx).s), q_bits=3))


@pytest.fixture()
def neural_codec(ctx, options, tensors) -> NeuralCodec:
    torch.manual_seed(0)
    model = neural_model(options["model"])
    table = build_table(model.prior, collect_symbols(model, tensors[0]))
    return NeuralCodec(ctx, model, table, 10.0, options["model"])


@pytest.fixture()
def refinement_stack(ctx, options, tensors) -> RefinementStack:
    torch.manual_seed(0)
    model = options["model"]
    stack = RefinementStack([10.0, 100.0], model["latent_channels"], model["hidden"], model["layers"], [3, 3])
    train_refinement_layer(stack, 1, ctx, *tensors, options["training"])
    return stack


def _reloaded(codec, tmp_path, ctx, **selection):
    path = codec.to_bundle({"seed": 1}).save(tmp_path / f"{codec.name}.npz")
    return load_codec(ModelBundle.load(path), ctx, **selection)


def _wire(streams):
    return [stream.to_bytes() for stream in streams]


def test_every_scheme_has_a_codec():
    assert sorted(CODECS) == [
        "latent-uniform",
        "latent-vq",
        "neural",
        "refinement",
        "scalar",
        "variable-rate",
        "vector",
    ]


def test_scalar_codec_accounts_for_every_bit(ctx, frames, scalar_codec):
    (stream,) = scalar_codec.encode_frame(frames[0])

    assert stream.scheme == Scheme.SCALAR
    assert stream.payload_bits == 2 * 40 * 3
    assert stream.body_bits == 2 * 40 * 3 + 2 * 8
    assert len(stream.to_bytes()) == 16 + 2 + 30


def test_scalar_codec_decodes_through_bytes(ctx, frames, scalar_codec):
    streams = [Bitstream.from_bytes(data) for data in _wire(scalar_codec.encode_frame(frames[0]))]

    decoded = scalar_codec.decode_frame(streams)

    scaled = encode_side(frames[0], ctx)
    levels = scalar_codec.codebook.levels
    assert decoded.shape == (64,)
    assert set(np.round(stack_real(scalar_codec.decode_scaled(streams)).ravel(), 12)) <= set(np.round(levels, 12))
    np.testing.assert_allclose(
        decoded, reconstruct_frames(scalar_codec.decode_scaled(streams), scaled.t, ctx), atol=1e-12
    )


def test_vector_codec_survives_a_bundle(tmp_path, ctx, frames):
    s = prepare_frames(frames, ctx).s
    codec = VectorCodec(ctx, train_vector(_interleaved(s), b=2, q_bits=2, seed=1))

    restored = _reloaded(codec, tmp_path, ctx)

    assert isinstance(restored, VectorCodec)
    assert restored.entropy_coded
    assert _wire(restored.encode_frame(frames[3])) == _wire(codec.encode_frame(frames[3]))
    np.testing.assert_array_equal(
        restored.decode_frame(codec.encode_frame(frames[3])), codec.decode_frame(codec.encode_frame(frames[3]))
    )


def test_latent_uniform_codec_sends_q_bits_per_latent_element(tmp_path, ctx, options, frames):
    torch.manual_seed(0)
    codec = LatentUniformCodec(ctx, LatentUniformModel(q_bits=3, hidden=4, layers=1), options["model"])

    (stream,) = codec.encode_frame(frames[0])
    restored = _reloaded(codec, tmp_path, ctx)

    assert stream.payload_bits == 2 * 40 * 3
    assert _wire(restored.encode_frame(frames[0])) == _wire([stream])
    np.testing.assert_array_equal(restored.decode_frame([stream]), codec.decode_frame([stream]))


def test_latent_vq_codec_sends_one_index_per_block(tmp_path, ctx, options, frames):
    torch.manual_seed(0)
    codec = LatentVqCodec(ctx, LatentVqModel(q_bits=1, block=2, hidden=4, layers=1), options["model"])

    (stream,) = codec.encode_frame(frames[0])
    restored = _reloaded(codec, tmp_path, ctx)

    assert stream.payload_bits == (2 * 40 // 2) * 2
    assert _wire(restored.encode_frame(frames[0])) == _wire([stream])
    assert restored.decode_frame([stream]).shape == (64,)


def test_neural_codec_decodes_the_clamped_symbols(ctx, frames, neural_codec):
    (stream,) = neural_codec.encode_frame(frames[2])
    decoded = neural_codec.decode_frame([Bitstream.from_bytes(stream.to_bytes())])

    scaled = encode_side(frames[2], ctx)
    rows = torch.from_numpy(np.ascontiguousarray(stack_real(scaled.s))).unsqueeze(0)
    symbols, _ = clamp_to_support(neural_codec.model.encode_symbols(rows).squeeze(0).numpy(), neural_codec.table)
    with torch.no_grad():
        expected_rows = neural_codec.model.decode_symbols(torch.from_numpy(symbols.astype(np.float64)).unsqueeze(0))
    expected = reconstruct_frames(unstack_real(expected_rows.squeeze(0).numpy()), scaled.t, ctx)
    assert stream.symbol_counts == (40, 40)
    np.testing.assert_allclose(decoded, expected, atol=1e-12)


def test_neural_codec_survives_a_bundle(tmp_path, ctx, frames, neural_codec):
    restored = _reloaded(neural_codec, tmp_path, ctx)

    assert restored.rate_param == 10.0
    assert _wire(restored.encode_frame(frames[5])) == _wire(neural_codec.encode_frame(frames[5]))


def test_decoder_checks_the_stream_header(frames, scalar_codec):
    streams = scalar_codec.encode_frame(frames[0])
    streams[0].n_prime = 41

    with pytest.raises(CorruptStreamError) as error:
        scalar_codec.decode_frame(streams)

    assert "does not match codec" in str(error.value)


def test_decoder_needs_a_stream(scalar_codec):
    with pytest.raises(CorruptStreamError) as error:
        scalar_codec.decode_frame([])

    assert str(error.value) == "No bitstream to decode"


def test_bundles_are_checked_against_the_context(uplink_options, scalar_codec):
    bundle = scalar_codec.to_bundle()

    with pytest.raises(BundleFormatError) as error:
        load_codec(bundle, SignalContext.from_options(uplink_options))

    assert "was trained for downlink frames with N'=40" in str(error.value)
    with pytest.raises(BundleFormatError):
        VectorCodec.from_bundle(bundle, scalar_codec.ctx)


def test_unknown_schemes_cannot_be_loaded(ctx):
    with pytest.raises(BundleFormatError) as error:
        load_codec(ModelBundle("wavelet"), ctx)

    assert str(error.value) == "Bundle <memory> holds unknown scheme 'wavelet'"


def test_refinement_sends_one_stream_per_layer(ctx, options, tensors, frames, refinement_stack):
    train_refinement_layer(refinement_stack, 2, ctx, *tensors, options["training"])
    codec = RefinementCodec(ctx, refinement_stack, options["model"])

    streams = codec.encode_frame(frames[1])

    assert [stream.layer_index for stream in streams] == [1, 2]
    assert all(stream.scheme == Scheme.REFINEMENT for stream in streams)
    assert codec.rate_param == 100.0
    assert codec.decode_prefix(streams)[0] == 2
    layers, base_only = codec.decode_prefix(streams[:1])
    assert layers == 1
    np.testing.assert_allclose(base_only, codec.decode_frame(streams[:1]), atol=1e-12)
    assert codec.decode_prefix(streams[1:]) == (0, None)


def test_refinement_layers_must_be_trained_in_order(ctx, options, frames, refinement_stack):
    codec = RefinementCodec(ctx, refinement_stack, options["model"], layers=2)

    with pytest.raises(UntrainedLayerError) as error:
        codec.encode_frame(frames[0])

    assert str(error.value) == "RefinementStack entries [2] are not trained"


def test_refinement_rejects_unknown_layers(ctx, options, frames, refinement_stack):
    codec = RefinementCodec(ctx, refinement_stack, options["model"], layers=1)
    streams = codec.encode_frame(frames[0])
    streams[0].layer_index = 3

    with pytest.raises(CorruptStreamError) as error:
        codec.decode_frame(streams)

    assert str(error.value) == "Layer index 3 outside 1..2"


def test_refinement_bundle_keeps_the_trained_prefix(tmp_path, ctx, options, frames, refinement_stack):
    codec = RefinementCodec(ctx, refinement_stack, options["model"], layers=1)

    restored = _reloaded(codec, tmp_path, ctx, layers=1)

    assert restored.stack.trained == [True, False]
    assert _wire(restored.encode_frame(frames[4])) == _wire(codec.encode_frame(frames[4]))


def test_variable_rate_codec_carries_the_rate_index(tmp_path, ctx, options, tensors, frames, neural_codec):
    vr_set = VariableRateSet(neural_codec.model, neural_codec.table, scales=(0.5, 1.0), prior_filters=(3, 3))
    codec = VariableRateCodec(ctx, vr_set, 0, 10.0, options["model"])
    with pytest.raises(UntrainedLayerError) as error:
        codec.encode_frame(frames[0])
    assert str(error.value) == "VariableRateSet entries [1] are not trained"

    train_vr_entropy(vr_set, 0, *tensors, options["training"])
    streams = codec.encode_frame(frames[0])
    restored = _reloaded(codec, tmp_path, ctx)

    assert streams[0].rate_index == 0
    assert codec.rate_param == 0.5
    assert restored.rate == 1
    np.testing.assert_allclose(restored.decode_frame(streams), codec.decode_frame(streams), atol=1e-12)
    assert _wire(restored.at_rate(0).encode_frame(frames[0])) == _wire(streams)


def test_variable_rate_index_is_bounded(ctx, options, neural_codec):
    vr_set = VariableRateSet(neural_codec.model, neural_codec.table, scales=(0.5, 1.0), prior_filters=(3, 3))

    with pytest.raises(ImproperlyConfigured):
        VariableRateCodec(ctx, vr_set, 2, 10.0, options["model"])
