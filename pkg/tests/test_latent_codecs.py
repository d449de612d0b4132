import logging

import numpy as np
import pytest
import torch

from cpri_compression.exceptions import InputShapeError, UndefinedMetricError
from cpri_compression.latent_codecs import (
    LatentTensor,
    LatentTransform,
    LatentUniformModel,
    LatentVqCodebook,
    LatentVqModel,
    from_latent_blocks,
    latent_blocks,
    loss_uq,
    loss_vq,
    nearest_rows,
    normalized_error,
    stack_real,
    transform_encode,
    uniform_latent_quantize,
    unstack_real,
    vq_latent_quantize,
)


@pytest.fixture()
def vq_model() -> LatentVqModel:
    torch.manual_seed(0)
    return LatentVqModel(q_bits=1, block=2, hidden=4, layers=1)


def test_uniform_quantizer_clamps_to_the_unit_interval():
    z_hat = uniform_latent_quantize(torch.tensor([-0.7, 0.5, 1.3], dtype=torch.float64), q_bits=2)

    np.testing.assert_allclose(z_hat.numpy(), [0.0, 2 / 3, 1.0])


def test_uniform_quantizer_passes_gradients_straight_through():
    z = torch.tensor([0.1, 0.4, 0.8], dtype=torch.float64, requires_grad=True)

    uniform_latent_quantize(z, q_bits=2, training=True).sum().backward()

    np.testing.assert_array_equal(z.grad.numpy(), [1.0, 1.0, 1.0])


def test_inference_quantization_is_detached():
    z = torch.tensor([0.1], dtype=torch.float64, requires_grad=True)

    assert not uniform_latent_quantize(z, q_bits=2).requires_grad


def test_latent_flattening_interleaves_channels_per_time_step():
    latent = LatentTensor(np.array([[1.0, 2.0], [3.0, 4.0]]))

    assert latent.channels == 2
    np.testing.assert_array_equal(latent.flat, [1.0, 3.0, 2.0, 4.0])
    np.testing.assert_array_equal(
        latent_blocks(torch.from_numpy(latent.z).unsqueeze(0), 2)[0].numpy(), [[1.0, 3.0], [2.0, 4.0]]
    )


def test_blocks_are_inverted():
    z = torch.rand(2, 3, 4, dtype=torch.float64)

    assert torch.equal(from_latent_blocks(latent_blocks(z, 2), 3), z)


def test_blocks_must_divide_the_latent():
    with pytest.raises(InputShapeError) as error:
        latent_blocks(torch.zeros(1, 3, 3), 2)

    assert str(error.value) == "V*N' = 9 is not divisible by block size 2"


def test_latent_must_be_a_finite_matrix():
    with pytest.raises(InputShapeError):
        LatentTensor(np.array([[1.0, np.inf]]))
    with pytest.raises(InputShapeError):
        LatentTensor(np.zeros(4))


def test_real_stacking_is_inverted():
    s = np.array([0.5 - 0.25j, -1.0 + 1.0j])

    rows = stack_real(s)

    np.testing.assert_array_equal(rows, [[0.5, -1.0], [-0.25, 1.0]])
    np.testing.assert_array_equal(unstack_real(rows), s)


def test_transform_encode_returns_a_latent():
    torch.manual_seed(0)
    encoder = LatentTransform(2, 3, hidden=4, layers=1)

    latent = transform_encode(np.random.default_rng(0).uniform(-1, 1, (2, 10)), encoder)

    assert latent.z.shape == (3, 10)
    with pytest.raises(InputShapeError):
        transform_encode(np.zeros((3, 10)), encoder)


def test_nearest_rows_prefer_the_lower_index_on_ties():
    embedding = torch.tensor([[0.0, 0.0], [2.0, 0.0]], dtype=torch.float64)

    indices, distances = nearest_rows(torch.tensor([[1.0, 0.0], [1.5, 0.0]], dtype=torch.float64), embedding, chunk=1)

    assert indices.tolist() == [0, 1]
    np.testing.assert_allclose(distances.numpy(), [1.0, 0.25])


def test_vector_quantized_latents_are_codebook_rows():
    codebook = LatentVqCodebook(block=2, q_bits=1)
    with torch.no_grad():
        codebook.embedding.copy_(torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64))
    z = torch.tensor([[[0.9, 0.1], [0.2, 0.8]]], dtype=torch.float64)

    z_st, z_q, indices = vq_latent_quantize(z, codebook)

    assert codebook.size == 4
    assert codebook.index_bits == 2
    assert indices.tolist() == [[1, 2]]
    np.testing.assert_array_equal(z_q.numpy(), [[[1.0, 0.0], [0.0, 1.0]]])
    np.testing.assert_allclose(z_st.detach().numpy(), z_q.numpy())


def test_normalized_error_is_relative_to_the_reference():
    x_f = torch.tensor([[2.0 + 0j, 0.0]], dtype=torch.complex128)
    x_hat_f = torch.tensor([[1.0 + 0j, 0.0]], dtype=torch.complex128)

    assert float(normalized_error(x_f, x_hat_f)[0]) == pytest.approx(0.25)
    assert float(loss_uq(x_f, x_hat_f)) == pytest.approx(0.25)


def test_zero_reference_energy_is_undefined():
    with pytest.raises(UndefinedMetricError):
        normalized_error(torch.zeros(1, 4, dtype=torch.complex128), torch.ones(1, 4, dtype=torch.complex128))


def test_vq_loss_adds_codebook_and_commitment_terms():
    x_f = torch.ones(1, 4, dtype=torch.complex128)
    z = torch.zeros(1, 2, 2, dtype=torch.float64)
    z_q = torch.ones(1, 2, 2, dtype=torch.float64)

    assert float(loss_vq(x_f, x_f, z, z, beta=0.5)) == pytest.approx(0.0)
    assert float(loss_vq(x_f, x_f, z, z_q, beta=0.5)) == pytest.approx(1.5)


def test_uniform_model_trains_through_the_quantizer():
    torch.manual_seed(0)
    model = LatentUniformModel(q_bits=2, hidden=4, layers=1)
    s_rows = torch.rand(2, 2, 8, dtype=torch.float64)

    s_hat, z = model(s_rows)
    (s_hat - s_rows).pow(2).mean().backward()

    assert s_hat.shape == (2, 2, 8)
    assert z.shape == (2, 2, 8)
    assert all(parameter.grad is not None for parameter in model.encoder.parameters())


def test_codebook_is_seeded_from_latent_blocks(vq_model, caplog):
    latents = torch.rand(4, 2, 8, dtype=torch.float64)

    vq_model.initialize_codebook(latents, seed=1)

    blocks = latent_blocks(latents, 2).reshape(-1, 2)
    for row in vq_model.codebook.embedding.detach():
        assert bool(((blocks - row).abs().sum(dim=1) == 0).any())
    assert (
        "cpri-compression",
        logging.INFO,
        "Initialized 4-entry latent codebook from 32 blocks",
    ) in caplog.record_tuples


def test_dead_codewords_move_to_the_worst_represented_blocks(vq_model, caplog):
    with torch.no_grad():
        vq_model.codebook.embedding.copy_(torch.tensor([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.1, 0.1]]))
    latents = torch.tensor([[[0.0, 5.0], [0.0, 5.0]]], dtype=torch.float64)

    moved = vq_model.reseed_dead_codewords(latents, torch.tensor([3, 0, 1, 1]))

    assert moved == 1
    assert vq_model.codebook.embedding[1].tolist() == [5.0, 5.0]
    assert (
        "cpri-compression",
        logging.WARNING,
        "Re-seeded 1 dead codewords from high-error latents",
    ) in caplog.record_tuples


def test_no_dead_codewords_leaves_the_codebook(vq_model):
    before = vq_model.codebook.embedding.detach().clone()

    assert vq_model.reseed_dead_codewords(torch.rand(1, 2, 4, dtype=torch.float64), torch.ones(4)) == 0
    assert torch.equal(vq_model.codebook.embedding.detach(), before)


def test_vq_model_returns_indices_only_when_quantizing(vq_model):
    s_rows = torch.rand(3, 2, 8, dtype=torch.float64)

    _, _, z_q, indices = vq_model(s_rows)
    _, _, no_z_q, no_indices = vq_model(s_rows, quantize=False)

    assert z_q.shape == (3, 2, 8)
    assert indices.shape == (3, 8)
    assert no_z_q is None and no_indices is None


def test_uniform_latent_loss_gradients_are_exact():
    torch.manual_seed(0)
    x_f = torch.randn(2, 6, dtype=torch.complex128)
    real = torch.rand(2, 6, dtype=torch.float64, requires_grad=True)
    imag = torch.rand(2, 6, dtype=torch.float64, requires_grad=True)

    def objective(real, imag):
        return loss_uq(x_f, torch.complex(real, imag))

    assert torch.autograd.gradcheck(objective, (real, imag), eps=1e-6, atol=1e-5)


def test_vq_loss_stops_gradients_on_each_side():
    x_f = torch.ones(1, 4, dtype=torch.complex128)
    z = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]], dtype=torch.float64, requires_grad=True)
    z_q = torch.tensor([[[1.0, 1.0], [1.0, 1.0]]], dtype=torch.float64, requires_grad=True)

    loss_vq(x_f, x_f, z, z_q, beta=0.25).backward()

    difference = (z - z_q).detach()
    torch.testing.assert_close(z.grad, 0.25 * 2 * difference / 4)
    torch.testing.assert_close(z_q.grad, -2 * difference / 4)
