"""Integer-rounded latents, a learned factorized prior, PMF lookup tables, and table-driven arithmetic coding."""

from dataclasses import dataclass
from logging import getLogger
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from bitarray import bitarray
from torch import nn

from cpri_compression.exceptions import StatisticsError
from cpri_compression.latent_codecs import LatentSynthesis, LatentTransform, normalized_error
from cpri_compression.range_coder import RangeDecoder, RangeEncoder

logger = getLogger("cpri-compression")

LIKELIHOOD_FLOOR = 2.0**-30
TABLE_PROBABILITY_FLOOR = 2.0**-16
FREQUENCY_TOTAL = 1 << 16


class FactorizedPrior(nn.Module):
    """
    One monotone cumulative distribution per latent channel, composed of stages x -> g(H x + b) with
    g(x) = x + tanh(a) * tanh(x) and H kept positive through softplus; the last stage is squashed by a logistic.
    """

    def __init__(self, channels: int = 2, filters: Sequence[int] = (4, 4, 4), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(int(f) for f in filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1 / (len(self.filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(self.filters) + 1):
            init = float(np.log(np.expm1(1 / scale / dims[i + 1])))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init, dtype=torch.float64)))
            self.biases.append(
                nn.Parameter(torch.empty(channels, dims[i + 1], 1, dtype=torch.float64).uniform_(-0.5, 0.5))
            )
            if i < len(self.filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1, dtype=torch.float64)))

    def logits_cumulative(self, values: torch.Tensor) -> torch.Tensor:
        """(channels, 1, n) -> (channels, 1, n)"""
        logits = values
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, values: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cumulative(values))

    def likelihood(self, z: torch.Tensor) -> torch.Tensor:
        """(batch, channels, n) -> probability mass of the unit interval centered on each value, floored"""
        batch, channels, length = z.shape
        values = z.permute(1, 0, 2).reshape(channels, 1, -1)
        lower = self.logits_cumulative(values - 0.5)
        upper = self.logits_cumulative(values + 0.5)
        sign = -torch.sign(lower + upper).detach()
        mass = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        floored = int((mass < LIKELIHOOD_FLOOR).sum())
        if floored:
            logger.debug(f"Flooring {floored} likelihoods below 2^-30")
        mass = torch.clamp(mass, min=LIKELIHOOD_FLOOR)
        return mass.reshape(channels, batch, length).permute(1, 0, 2)


def round_latent(z: Union[np.ndarray, torch.Tensor]):
    if isinstance(z, torch.Tensor):
        return torch.floor(z + 0.5)
    return np.floor(np.asarray(z) + 0.5)


def add_uniform_noise(z: torch.Tensor) -> torch.Tensor:
    return z + torch.empty_like(z).uniform_(-0.5, 0.5)


def pmf(z_hat_val: float, channel: int, model: FactorizedPrior) -> float:
    with torch.no_grad():
        values = torch.tensor([z_hat_val - 0.5, z_hat_val + 0.5], dtype=torch.float64)
        grid = values.expand(model.channels, 1, 2).contiguous()
        cdf = model.cdf(grid)[channel, 0]
    return float(torch.clamp(cdf[1] - cdf[0], 0.0, 1.0))


def rate_estimate(z_noisy: torch.Tensor, model) -> torch.Tensor:
    """Average bits per latent element: -mean log2 p(z~); `model` is anything exposing `likelihood`"""
    return -torch.log2(model.likelihood(z_noisy)).mean()


def rd_loss(x_f: torch.Tensor, x_hat_f: torch.Tensor, rate: torch.Tensor, lam: float) -> torch.Tensor:
    return lam * normalized_error(x_f, x_hat_f).mean() + rate


@dataclass(frozen=True)
class EntropyTable:
    lower: np.ndarray
    upper: np.ndarray
    probabilities: Tuple[np.ndarray, ...]
    frequencies: Tuple[np.ndarray, ...]

    @property
    def channels(self) -> int:
        return len(self.lower)

    def width(self, channel: int) -> int:
        return int(self.upper[channel] - self.lower[channel] + 1)

    def cumulative(self, channel: int) -> List[int]:
        if not hasattr(self, "_cumulative"):
            object.__setattr__(self, "_cumulative", [np.cumsum(f).tolist() for f in self.frequencies])
        return self._cumulative[channel]  # type: ignore[attr-defined]

    def code_length(self, symbols: np.ndarray) -> float:
        """Ideal code length -sum log2 C[i, symbol] for a (V, n) integer array of in-support symbols"""
        bits = 0.0
        for channel, row in enumerate(symbols):
            bits -= float(np.sum(np.log2(self.probabilities[channel][row - self.lower[channel]])))
        return bits


def _quantize_frequencies(probabilities: np.ndarray) -> np.ndarray:
    frequencies = np.maximum(1, np.round(probabilities * FREQUENCY_TOTAL)).astype(np.int64)
    excess = int(frequencies.sum()) - FREQUENCY_TOTAL
    for index in np.argsort(-frequencies, kind="stable"):
        if excess == 0:
            break
        change = min(excess, int(frequencies[index]) - 1) if excess > 0 else excess
        frequencies[index] -= change
        excess -= change
    return frequencies


def _channel_table(model: FactorizedPrior, channel: int, low: int, high: int) -> np.ndarray:
    values = torch.arange(low, high + 2, dtype=torch.float64) - 0.5
    with torch.no_grad():
        grid = values.expand(model.channels, 1, values.numel()).contiguous()
        cdf = model.cdf(grid)[channel, 0].numpy()
    probabilities = np.diff(cdf)
    probabilities[0] += cdf[0]
    probabilities[-1] += 1 - cdf[-1]
    probabilities = np.maximum(probabilities, TABLE_PROBABILITY_FLOOR)
    return probabilities / probabilities.sum()


def build_table(model: FactorizedPrior, training_latents: np.ndarray) -> EntropyTable:
    """`training_latents` is (..., V, n) of rounded latents; support spans the observed range widened by 2"""
    latents = np.asarray(training_latents)
    if latents.size == 0:
        raise StatisticsError("Cannot build an entropy table without latents")
    per_channel = np.moveaxis(latents, -2, 0).reshape(model.channels, -1)
    lower = per_channel.min(axis=1).astype(np.int64) - 2
    upper = per_channel.max(axis=1).astype(np.int64) + 2
    probabilities, frequencies = [], []
    for channel in range(model.channels):
        width = int(upper[channel] - lower[channel] + 1)
        if width >= FREQUENCY_TOTAL:
            raise StatisticsError(f"Channel {channel} support of {width} symbols exceeds the 16-bit frequency range")
        p = _channel_table(model, channel, int(lower[channel]), int(upper[channel]))
        probabilities.append(p)
        frequencies.append(_quantize_frequencies(p))
    logger.debug(f"Built entropy table with supports {list(zip(lower.tolist(), upper.tolist()))}")
    return EntropyTable(lower, upper, tuple(probabilities), tuple(frequencies))


def clamp_to_support(symbols: np.ndarray, table: EntropyTable) -> Tuple[np.ndarray, int]:
    symbols = np.asarray(symbols, dtype=np.int64)
    clamped = np.clip(symbols, table.lower[:, None], table.upper[:, None])
    outside = int(np.count_nonzero(clamped != symbols))
    if outside:
        logger.warning(f"Clamped {outside} out-of-support latent symbols to the table edges")
    return clamped, outside


def ac_encode(symbols: np.ndarray, table: EntropyTable) -> Tuple[bitarray, int]:
    """Codes a (V, n) integer array channel by channel with one coder; returns the payload and the clamp count"""
    clamped, outside = clamp_to_support(symbols, table)
    encoder = RangeEncoder()
    for channel, row in enumerate(clamped):
        cumulative = table.cumulative(channel)
        for symbol in (row - table.lower[channel]).tolist():
            encoder.write(cumulative, symbol)
    return encoder.finish(), outside


def ac_decode(payload: bitarray, counts: Sequence[int], table: EntropyTable) -> np.ndarray:
    decoder = RangeDecoder(payload)
    rows = []
    for channel, count in enumerate(counts):
        cumulative = table.cumulative(channel)
        rows.append(np.array([decoder.read(cumulative) for _ in range(count)], dtype=np.int64) + table.lower[channel])
    return np.stack(rows)


class NeuralCompressionModel(nn.Module):
    """
    Nonlinear transform coding of the scaled frame. With `noisy=True` the latents are relaxed with uniform noise
    (the training surrogate); otherwise they are hard-rounded exactly as the coder sees them.
    """

    def __init__(
        self,
        input_rows: int = 2,
        latent_channels: int = 2,
        hidden: int = 32,
        layers: int = 2,
        prior_filters: Sequence[int] = (4, 4, 4),
        prior_init_scale: float = 10.0,
    ):
        super().__init__()
        self.encoder = LatentTransform(input_rows, latent_channels, hidden, layers)
        self.decoder = LatentSynthesis(latent_channels, hidden, layers)
        self.prior = FactorizedPrior(latent_channels, prior_filters, prior_init_scale)

    def forward(self, s_rows: torch.Tensor, noisy: bool = True) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (decoder output, latents fed to the decoder, their likelihoods)"""
        z = self.encoder(s_rows)
        z_tilde = add_uniform_noise(z) if noisy else round_latent(z)
        return self.decoder(z_tilde), z_tilde, self.prior.likelihood(z_tilde)

    def encode_symbols(self, s_rows: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return round_latent(self.encoder(s_rows))

    def decode_symbols(self, symbols: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.decoder(symbols)
