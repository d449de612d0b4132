"""
Layered and variable-rate operation on top of the entropy-coded neural transform.

A refinement stack sends layer 1 over the most reliable link and one residual layer per additional link;
any contiguous prefix of layers decodes on its own. A variable-rate set reuses one trained transform at
several rate points by scaling the latent before rounding, with one probability model per scale.
"""

from dataclasses import replace
from logging import getLogger
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from bitarray import bitarray
from torch import nn

from cpri_compression._decorators import _requires_trained
from cpri_compression.bundle import module_digest
from cpri_compression.entropy_codec import (
    EntropyTable,
    FactorizedPrior,
    NeuralCompressionModel,
    ac_decode,
    ac_encode,
    add_uniform_noise,
    build_table,
    clamp_to_support,
    rate_estimate,
    rd_loss,
)
from cpri_compression.exceptions import (
    CorruptStreamError,
    CpriCompressionError,
    ImproperlyConfigured,
    InputShapeError,
    NumericalFailure,
)
from cpri_compression.latent_codecs import normalized_error
from cpri_compression.options import TrainingOptions
from cpri_compression.pipeline import SignalContext
from cpri_compression.training import TensorData, Trainer, rd_objective

logger = getLogger("cpri-compression")

LayerPayload = Tuple[bitarray, Tuple[int, ...]]
RESCALE_TOLERANCE = 1e-15


def _clamp_batch(symbols: np.ndarray, table: EntropyTable) -> np.ndarray:
    """(batch, V, n) symbols clamped to the table support"""
    batch, channels, length = symbols.shape
    flat = symbols.transpose(1, 0, 2).reshape(channels, -1)
    clamped, _ = clamp_to_support(flat, table)
    return clamped.reshape(channels, batch, length).transpose(1, 0, 2)


class RefinementStack(nn.Module):
    def __init__(
        self,
        lambdas: Sequence[float] = (1e2, 1e3, 1e4),
        latent_channels: int = 2,
        hidden: int = 32,
        layers: int = 2,
        prior_filters: Sequence[int] = (4, 4, 4),
        prior_init_scale: float = 10.0,
    ):
        super().__init__()
        if not lambdas:
            raise ImproperlyConfigured("A refinement stack needs at least one layer")
        self.lambdas = [float(lam) for lam in lambdas]
        self.stages = nn.ModuleList(
            NeuralCompressionModel(
                2 if i == 0 else 4, latent_channels, hidden, layers, prior_filters, prior_init_scale
            )
            for i in range(len(self.lambdas))
        )
        self.tables: List[Optional[EntropyTable]] = [None] * len(self.lambdas)
        self.trained = [False] * len(self.lambdas)

    @property
    def depth(self) -> int:
        return len(self.stages)

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer <= self.depth:
            raise ImproperlyConfigured(f"Layer {layer} outside 1..{self.depth}")

    @staticmethod
    def layer_input(s_rows: torch.Tensor, previous: Optional[torch.Tensor]) -> torch.Tensor:
        return s_rows if previous is None else torch.cat([s_rows, previous], dim=1)

    @_requires_trained("layer")
    def encode_batch(self, layer: int, s_rows: torch.Tensor) -> Tuple[List[np.ndarray], Optional[torch.Tensor]]:
        """
        Symbols of layers 1..layer for a (batch, 2, N') input, and the reconstruction after `layer` layers.
        The encoder rebuilds each lower reconstruction from the clamped symbols, the same inputs the decoder sees.
        """
        self._check_layer(layer)
        previous: Optional[torch.Tensor] = None
        symbols = []
        for stage, table in zip(self.stages[:layer], self.tables[:layer]):
            raw = stage.encode_symbols(self.layer_input(s_rows, previous)).numpy().astype(np.int64)
            clamped = _clamp_batch(raw, table)
            symbols.append(clamped)
            residual = stage.decode_symbols(torch.from_numpy(clamped.astype(np.float64)))
            previous = residual if previous is None else previous + residual
        return symbols, previous

    def prefix_reconstruction(self, layer: int, s_rows: torch.Tensor) -> Optional[torch.Tensor]:
        return self.encode_batch(layer, s_rows)[1]

    @_requires_trained("layer")
    def encode(self, layer: int, s_rows: np.ndarray) -> List[LayerPayload]:
        s_rows = np.asarray(s_rows, dtype=np.float64)
        if s_rows.ndim != 2 or s_rows.shape[0] != 2:
            raise InputShapeError(f"Expected a (2, N') input, got {s_rows.shape}")
        symbols, _ = self.encode_batch(layer, torch.from_numpy(s_rows).unsqueeze(0))
        payloads = []
        for per_layer, table in zip(symbols, self.tables):
            payload, _ = ac_encode(per_layer[0], table)
            payloads.append((payload, (int(per_layer.shape[2]),) * per_layer.shape[1]))
        return payloads

    @_requires_trained("layer")
    def decode(self, layer: int, payloads: Sequence[Optional[LayerPayload]]) -> np.ndarray:
        self._check_layer(layer)
        if layer < 1:
            raise ImproperlyConfigured("Decoding needs at least the base layer")
        gaps = [i + 1 for i in range(layer) if i >= len(payloads) or payloads[i] is None]
        if gaps:
            raise CorruptStreamError(f"Layer payloads {gaps} missing below layer {layer}")
        reconstruction: Optional[torch.Tensor] = None
        for stage, table, entry in zip(self.stages[:layer], self.tables[:layer], payloads):
            payload, counts = entry  # type: ignore[misc]
            symbols = ac_decode(payload, counts, table)
            residual = stage.decode_symbols(torch.from_numpy(symbols.astype(np.float64)).unsqueeze(0))
            reconstruction = residual if reconstruction is None else reconstruction + residual
        return reconstruction.squeeze(0).numpy()  # type: ignore[union-attr]

    def decode_longest_prefix(self, payloads: Sequence[Optional[LayerPayload]]) -> Tuple[int, Optional[np.ndarray]]:
        """Decodes the layers before the first missing payload; (0, None) when the base layer is lost"""
        intact = 0
        while intact < min(len(payloads), self.depth) and payloads[intact] is not None:
            intact += 1
        if intact == 0:
            return 0, None
        return intact, self.decode(intact, payloads[:intact])


def refine_encode(s_rows: np.ndarray, stack: RefinementStack, up_to_layer: int) -> List[LayerPayload]:
    return stack.encode(up_to_layer, s_rows)


def refine_decode(payloads: Sequence[Optional[LayerPayload]], stack: RefinementStack) -> np.ndarray:
    return stack.decode(len(payloads), payloads)


def refinement_objective(stack: RefinementStack, layer: int, ctx: SignalContext):
    """Rate-distortion loss of one layer; the input rows carry [S; S_hat of the frozen lower layers]"""
    stage = stack.stages[layer - 1]
    base = rd_objective(stage, ctx, stack.lambdas[layer - 1])
    if layer == 1:
        return base

    def loss(batch: TensorData):
        residual, _, likelihoods = stage(batch.s_rows, noisy=True)
        rate = -torch.log2(likelihoods).mean()
        s_hat = batch.s_rows[:, 2:, :] + residual
        x_hat_f = ctx.projector.apply_rows(s_hat, batch.scale)
        return (
            rd_loss(batch.x_f, x_hat_f, rate, stack.lambdas[layer - 1]),
            {"rate": float(rate), "nmse": float(normalized_error(batch.x_f, x_hat_f).mean())},
        )

    return loss


def layer_inputs(stack: RefinementStack, layer: int, data: TensorData, batch_size: int = 256) -> TensorData:
    """Training rows for `layer`: the frame rows stacked with the frozen lower-layer reconstruction"""
    if layer == 1:
        return data
    rows = []
    for batch in data.batches(batch_size):
        previous = stack.prefix_reconstruction(layer - 1, batch.s_rows)
        rows.append(torch.cat([batch.s_rows, previous], dim=1))
    return replace(data, s_rows=torch.cat(rows))


def train_refinement_layer(
    stack: RefinementStack,
    layer: int,
    ctx: SignalContext,
    train: TensorData,
    validation: TensorData,
    options: TrainingOptions,
    lambda_ell: Optional[float] = None,
    seed: int = 0,
    checkpoint_path: Optional[Path] = None,
):
    """Trains layer `layer` with every lower layer frozen, then fixes its entropy table"""
    stack._check_layer(layer)
    if lambda_ell is not None:
        stack.lambdas[layer - 1] = float(lambda_ell)
    train_rows = layer_inputs(stack, layer, train)
    validation_rows = layer_inputs(stack, layer, validation)
    frozen = {i: module_digest(stack.stages[i]) for i in range(layer - 1)}
    for i, stage in enumerate(stack.stages):
        stage.requires_grad_(i == layer - 1)
    stage = stack.stages[layer - 1]
    trainer = Trainer({f"layer{layer}": stage}, list(stage.parameters()), options, seed, checkpoint_path)
    trainer.resume()
    history = trainer.fit(train_rows, validation_rows, refinement_objective(stack, layer, ctx))
    stack.requires_grad_(True)
    changed = [i + 1 for i, digest in frozen.items() if module_digest(stack.stages[i]) != digest]
    if changed:
        raise CpriCompressionError(f"Training layer {layer} modified frozen layers {changed}")
    symbols = np.concatenate(
        [stage.encode_symbols(batch.s_rows).numpy() for batch in train_rows.batches(256)]
    ).astype(np.int64)
    stack.tables[layer - 1] = build_table(stage.prior, symbols)
    stack.trained[layer - 1] = True
    logger.info(f"Refinement layer {layer} trained with lambda {stack.lambdas[layer - 1]:g}")
    return history


def rescaled_latent(z: np.ndarray, a: float) -> Tuple[np.ndarray, np.ndarray]:
    """Integer symbols floor(a z + 1/2) and their reconstruction b * symbol with b = 1/a"""
    b = 1.0 / a
    if abs(a * b - 1.0) > RESCALE_TOLERANCE:
        raise NumericalFailure(f"Rescale factor 1/{a} does not invert the scale within {RESCALE_TOLERANCE}")
    z = np.asarray(z, dtype=np.float64)
    symbols = np.floor(a * z + 0.5)
    reconstructed = b * symbols
    if np.any(np.abs(reconstructed - z) > b / 2 * (1 + 1e-12)):
        raise NumericalFailure(f"Rescaled latent error exceeds {b / 2} at scale {a}")
    return symbols.astype(np.int64), reconstructed


class VariableRateSet(nn.Module):
    """One shared transform; scale a_w and its probability model select the rate point"""

    def __init__(
        self,
        base: NeuralCompressionModel,
        base_table: EntropyTable,
        scales: Sequence[float] = (0.1, 0.25, 0.5, 0.9, 1.0),
        prior_filters: Sequence[int] = (4, 4, 4),
        prior_init_scale: float = 10.0,
    ):
        super().__init__()
        scales = tuple(float(a) for a in scales)
        if not scales or scales[-1] != 1.0 or any(not 0 < a <= 1 for a in scales):
            raise ImproperlyConfigured(f"Rate scales must lie in (0, 1] and end at 1, got {list(scales)}")
        if any(later <= earlier for earlier, later in zip(scales, scales[1:])):
            raise ImproperlyConfigured(f"Rate scales must be strictly increasing, got {list(scales)}")
        self.base = base
        self.scales = scales
        channels = base.prior.channels
        self.priors = nn.ModuleList(FactorizedPrior(channels, prior_filters, prior_init_scale) for _ in scales[:-1])
        self.tables: List[Optional[EntropyTable]] = [None] * (len(scales) - 1) + [base_table]
        self.trained = [False] * (len(scales) - 1) + [True]

    @property
    def rates(self) -> int:
        return len(self.scales)

    def rescale_factor(self, rate: int) -> float:
        return 1.0 / self.scales[rate]

    def prior(self, rate: int) -> FactorizedPrior:
        return self.base.prior if rate == self.rates - 1 else self.priors[rate]  # type: ignore[return-value]

    def latents(self, s_rows: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.base.encoder(s_rows)

    @_requires_trained("rate", prefix=False)
    def encode(self, rate: int, s_rows: np.ndarray) -> LayerPayload:
        s_rows = np.asarray(s_rows, dtype=np.float64)
        z = self.latents(torch.from_numpy(s_rows).unsqueeze(0)).squeeze(0).numpy()
        symbols, _ = rescaled_latent(z, self.scales[rate])
        payload, _ = ac_encode(symbols, self.tables[rate])
        return payload, tuple([z.shape[1]] * z.shape[0])

    @_requires_trained("rate", prefix=False)
    def decode(self, rate: int, payload: bitarray, counts: Sequence[int]) -> np.ndarray:
        symbols = ac_decode(payload, counts, self.tables[rate])
        z_hat = self.rescale_factor(rate) * symbols.astype(np.float64)
        return self.base.decode_symbols(torch.from_numpy(z_hat).unsqueeze(0)).squeeze(0).numpy()


def vr_encode(s_rows: np.ndarray, vr_set: VariableRateSet, w: int) -> LayerPayload:
    return vr_set.encode(w, s_rows)


def vr_decode(payload: bitarray, counts: Sequence[int], vr_set: VariableRateSet, w: int) -> np.ndarray:
    return vr_set.decode(w, payload, counts)


def _latent_data(vr_set: VariableRateSet, data: TensorData, batch_size: int = 256) -> TensorData:
    """Shared-transform latents computed once; they stand in for the frame rows while only a prior trains"""
    latents = torch.cat([vr_set.latents(batch.s_rows) for batch in data.batches(batch_size)])
    return replace(data, s_rows=latents)


def train_vr_entropy(
    vr_set: VariableRateSet,
    w: int,
    train: TensorData,
    validation: TensorData,
    options: TrainingOptions,
    seed: int = 0,
    checkpoint_path: Optional[Path] = None,
):
    """Fits the probability model of rate `w` to the scaled shared latents; the transform stays frozen"""
    if w == vr_set.rates - 1:
        logger.info("Rate scale 1 reuses the base probability model and table")
        return []
    a = vr_set.scales[w]
    prior = vr_set.prior(w)
    vr_set.base.requires_grad_(False)
    train_latents = _latent_data(vr_set, train)
    validation_latents = _latent_data(vr_set, validation)

    def loss(batch: TensorData):
        rate = rate_estimate(add_uniform_noise(a * batch.s_rows), prior)
        return rate, {"rate": float(rate)}

    trainer = Trainer({f"prior{w}": prior}, list(prior.parameters()), options, seed, checkpoint_path)
    trainer.resume()
    history = trainer.fit(train_latents, validation_latents, loss)
    vr_set.base.requires_grad_(True)
    symbols, _ = rescaled_latent(train_latents.s_rows.numpy(), a)
    vr_set.tables[w] = build_table(prior, symbols)
    vr_set.trained[w] = True
    table = vr_set.tables[w]
    logger.info(f"Rate scale {a:g}: table supports {table.lower.tolist()}..{table.upper.tolist()}")
    return history
