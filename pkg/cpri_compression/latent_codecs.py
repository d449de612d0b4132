"""Learned transforms and fixed-rate latent quantizers (uniform with straight-through gradients, and VQ-VAE style)."""

from dataclasses import dataclass
from logging import getLogger
from typing import Tuple

import numpy as np
import torch
from sklearn.cluster import kmeans_plusplus
from torch import nn

from cpri_compression.exceptions import InputShapeError, UndefinedMetricError
from cpri_compression.neural_core import TimeDistributedTransform

logger = getLogger("cpri-compression")


@dataclass(frozen=True)
class LatentTensor:
    z: np.ndarray

    def __post_init__(self):
        if self.z.ndim != 2 or not np.all(np.isfinite(self.z)):
            raise InputShapeError(f"Latent must be a finite (V, N') matrix, got shape {self.z.shape}")

    @property
    def channels(self) -> int:
        return self.z.shape[0]

    @property
    def flat(self) -> np.ndarray:
        """Per-time-step concatenation z_1, z_2, ... of the V-dimensional latents"""
        return self.z.T.reshape(-1)


class LatentTransform(TimeDistributedTransform):
    """Encoder f_s: (batch, rows, N') real stack of Re/Im rows -> (batch, V, N') latent"""

    def __init__(self, input_rows: int = 2, latent_channels: int = 2, hidden: int = 32, layers: int = 2):
        super().__init__(input_rows, latent_channels, hidden, layers)


class LatentSynthesis(TimeDistributedTransform):
    """Decoder g_d: (batch, V, N') latent -> (batch, 2, N') estimate of the scaled signal"""

    def __init__(self, latent_channels: int = 2, hidden: int = 32, layers: int = 2):
        super().__init__(latent_channels, 2, hidden, layers)


def stack_real(s: np.ndarray) -> np.ndarray:
    """(..., N') complex -> (..., 2, N') rows [Re; Im]"""
    return np.stack([np.real(s), np.imag(s)], axis=-2)


def unstack_real(rows) -> np.ndarray:
    return rows[..., 0, :] + 1j * rows[..., 1, :]


def transform_encode(s_rows: np.ndarray, encoder: LatentTransform) -> LatentTensor:
    s_rows = np.asarray(s_rows, dtype=np.float64)
    if s_rows.ndim != 2 or s_rows.shape[0] != encoder.recurrent.input_dim:
        raise InputShapeError(f"Expected ({encoder.recurrent.input_dim}, N') input, got {s_rows.shape}")
    with torch.no_grad():
        z = encoder(torch.from_numpy(s_rows).unsqueeze(0)).squeeze(0)
    return LatentTensor(z.numpy())


def straight_through(z: torch.Tensor, z_hat: torch.Tensor) -> torch.Tensor:
    """Forward value z_hat, gradient passed to z unchanged"""
    return z + (z_hat - z).detach()


def uniform_latent_indices(z: torch.Tensor, q_bits: int) -> torch.Tensor:
    levels = 2**q_bits - 1
    return torch.floor(levels * torch.clamp(z, 0.0, 1.0) + 0.5)


def uniform_latent_quantize(z: torch.Tensor, q_bits: int, training: bool = False) -> torch.Tensor:
    z_hat = uniform_latent_indices(z, q_bits) / (2**q_bits - 1)
    return straight_through(z, z_hat) if training else z_hat.detach()


class LatentVqCodebook(nn.Module):
    def __init__(self, block: int = 2, q_bits: int = 4, beta: float = 1.0):
        super().__init__()
        self.block = block
        self.q_bits = q_bits
        self.beta = beta
        size = 2 ** (block * q_bits)
        self.embedding = nn.Parameter(torch.empty(size, block, dtype=torch.float64).uniform_(-1 / size, 1 / size))

    @property
    def size(self) -> int:
        return self.embedding.shape[0]

    @property
    def index_bits(self) -> int:
        return self.block * self.q_bits


def latent_blocks(z: torch.Tensor, block: int) -> torch.Tensor:
    """(batch, V, N') -> (batch, V*N'/b, b), grouping consecutive entries of the per-time-step flattening"""
    batch, channels, length = z.shape
    if (channels * length) % block:
        raise InputShapeError(f"V*N' = {channels * length} is not divisible by block size {block}")
    return z.transpose(1, 2).reshape(batch, -1, block)


def from_latent_blocks(blocks: torch.Tensor, channels: int) -> torch.Tensor:
    batch = blocks.shape[0]
    return blocks.reshape(batch, -1, channels).transpose(1, 2)


def nearest_rows(
    blocks: torch.Tensor, embedding: torch.Tensor, chunk: int = 4096
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Indices (lowest on ties) and squared distances of the closest embedding rows, for (n, b) blocks"""
    indices, distances = [], []
    with torch.no_grad():
        for piece in blocks.split(chunk):
            squared = ((piece[:, None, :] - embedding[None, :, :]) ** 2).sum(dim=-1)
            best = torch.argmin(squared, dim=1)
            indices.append(best)
            distances.append(squared.gather(1, best[:, None]).squeeze(1))
    return torch.cat(indices), torch.cat(distances)


def vq_latent_quantize(z: torch.Tensor, cb: LatentVqCodebook) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (decoder input with straight-through gradients, codebook rows z_q, indices (batch, n_blocks))"""
    blocks = latent_blocks(z, cb.block)
    flat_indices, _ = nearest_rows(blocks.reshape(-1, cb.block), cb.embedding)
    indices = flat_indices.reshape(blocks.shape[:2])
    z_q = from_latent_blocks(cb.embedding[indices], z.shape[1])
    return straight_through(z, z_q), z_q, indices


def normalized_error(x_f: torch.Tensor, x_hat_f: torch.Tensor) -> torch.Tensor:
    """Per-frame squared error over the occupied subcarriers, normalized by the reference energy"""
    reference = (x_f.abs() ** 2).sum(dim=-1)
    if bool((reference == 0).any()):
        raise UndefinedMetricError("Reference energy on the occupied subcarriers is zero")
    return ((x_f - x_hat_f).abs() ** 2).sum(dim=-1) / reference


def loss_uq(x_f: torch.Tensor, x_hat_f: torch.Tensor) -> torch.Tensor:
    return normalized_error(x_f, x_hat_f).mean()


def loss_vq(x_f: torch.Tensor, x_hat_f: torch.Tensor, z: torch.Tensor, z_q: torch.Tensor, beta: float) -> torch.Tensor:
    codebook = ((z.detach() - z_q) ** 2).mean()
    commitment = ((z - z_q.detach()) ** 2).mean()
    return loss_uq(x_f, x_hat_f) + codebook + beta * commitment


class LatentUniformModel(nn.Module):
    def __init__(self, q_bits: int, latent_channels: int = 2, hidden: int = 32, layers: int = 2):
        super().__init__()
        self.q_bits = q_bits
        self.encoder = LatentTransform(2, latent_channels, hidden, layers)
        self.decoder = LatentSynthesis(latent_channels, hidden, layers)

    def forward(self, s_rows: torch.Tensor, quantize: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
        z = self.encoder(s_rows)
        z_hat = uniform_latent_quantize(z, self.q_bits, training=self.training) if quantize else z
        return self.decoder(z_hat), z


class LatentVqModel(nn.Module):
    def __init__(
        self,
        q_bits: int,
        block: int = 2,
        beta: float = 1.0,
        latent_channels: int = 2,
        hidden: int = 32,
        layers: int = 2,
    ):
        super().__init__()
        self.encoder = LatentTransform(2, latent_channels, hidden, layers)
        self.decoder = LatentSynthesis(latent_channels, hidden, layers)
        self.codebook = LatentVqCodebook(block, q_bits, beta)

    def forward(self, s_rows: torch.Tensor, quantize: bool = True):
        """Returns (S_hat, z, z_q, indices); without quantization z_q and indices are None"""
        z = self.encoder(s_rows)
        if not quantize:
            return self.decoder(z), z, None, None
        z_st, z_q, indices = vq_latent_quantize(z, self.codebook)
        return self.decoder(z_st), z, z_q, indices

    def initialize_codebook(self, latents: torch.Tensor, seed: int = 0) -> None:
        """k-means++ seeding over (batch, V, N') latents"""
        blocks = latent_blocks(latents.detach(), self.codebook.block).reshape(-1, self.codebook.block).numpy()
        unique = np.unique(blocks, axis=0)
        if len(unique) < self.codebook.size:
            logger.warning(f"Only {len(unique)} distinct latent blocks for {self.codebook.size} codewords")
        centers, _ = kmeans_plusplus(blocks, n_clusters=min(self.codebook.size, len(blocks)), random_state=seed)
        with torch.no_grad():
            self.codebook.embedding[: len(centers)] = torch.from_numpy(centers)
        logger.info(f"Initialized {self.codebook.size}-entry latent codebook from {len(blocks)} blocks")

    def reseed_dead_codewords(self, latents: torch.Tensor, usage: torch.Tensor) -> int:
        """Moves unused codewords onto the worst-represented latent blocks; returns how many moved"""
        dead = torch.nonzero(usage == 0).flatten()
        if dead.numel() == 0:
            return 0
        blocks = latent_blocks(latents.detach(), self.codebook.block).reshape(-1, self.codebook.block)
        _, distances = nearest_rows(blocks, self.codebook.embedding)
        worst = torch.argsort(distances, descending=True, stable=True)[: dead.numel()]
        with torch.no_grad():
            self.codebook.embedding[dead[: worst.numel()]] = blocks[worst]
        logger.warning(f"Re-seeded {worst.numel()} dead codewords from high-error latents")
        return int(worst.numel())
