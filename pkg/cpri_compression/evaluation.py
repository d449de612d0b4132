"""Dataset-level EVM of a codec over test frames, rate-estimate fidelity and the per-link drop scenario."""

import time
from dataclasses import dataclass
from logging import getLogger
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from cpri_compression.bitstream import Bitstream
from cpri_compression.codecs import Codec, NeuralCodec, RefinementCodec, ScalarCodec, VectorCodec
from cpri_compression.latent_codecs import stack_real
from cpri_compression.multirate import decimate, interpolate
from cpri_compression.pipeline import SignalContext, encode_side
from cpri_compression.signal_chain import evm_components, evm_from_components, to_frequency_domain

logger = getLogger("cpri-compression")


@dataclass(frozen=True)
class EvaluationResult:
    scheme: str
    rate_param: float
    frames: int
    payload_bits: int
    body_bits: int
    bits_per_element: float
    cr: float
    evm_pct: float
    evm_db: float
    evm_pct_p50: float
    evm_pct_p95: float
    alpha: Optional[float]
    wall_s: float
    tag: str = ""


class EvmAccumulator:
    """Sums error and reference energies over frames; the ratio is taken once at the end"""

    def __init__(self, ctx: SignalContext):
        self.ctx = ctx
        self.error = 0.0
        self.reference = 0.0
        self.per_frame: List[float] = []

    def add(self, original: np.ndarray, reconstructed: Optional[np.ndarray]) -> None:
        original_fd = to_frequency_domain(original, self.ctx.frame)
        reconstructed_fd = (
            np.zeros_like(original_fd) if reconstructed is None else to_frequency_domain(reconstructed, self.ctx.frame)
        )
        error, reference = evm_components(original_fd, reconstructed_fd, self.ctx.frame.occupied)
        self.error += error
        self.reference += reference
        self.per_frame.append(evm_from_components(error, reference)[0])

    def result(self) -> Tuple[float, float]:
        return evm_from_components(self.error, self.reference)

    def percentiles(self) -> Tuple[float, float]:
        if not self.per_frame:
            return float("nan"), float("nan")
        p50, p95 = np.percentile(self.per_frame, [50, 95])
        return float(p50), float(p95)


def _alpha(codec: Codec, payload_bits: int, frames: int) -> Optional[float]:
    if isinstance(codec, ScalarCodec):
        return 1.0
    if isinstance(codec, VectorCodec):
        return payload_bits / (frames * 2 * codec.ctx.n_prime * codec.codebook.q_bits)
    return None


def evaluate_codec(codec: Codec, frames: np.ndarray, tag: str = "", through_bytes: bool = True) -> EvaluationResult:
    """
    Encodes and decodes every frame through serialized CPRZ streams (the path `encode` / `decode` take on disk)
    and aggregates EVM over the whole set.
    """
    ctx = codec.ctx
    accumulator = EvmAccumulator(ctx)
    payload_bits = body_bits = 0
    started = time.perf_counter()
    for frame in frames:
        streams = codec.encode_frame(frame)
        if through_bytes:
            streams = [Bitstream.from_bytes(stream.to_bytes()) for stream in streams]
        payload_bits += sum(stream.payload_bits for stream in streams)
        body_bits += sum(stream.body_bits for stream in streams)
        accumulator.add(frame, codec.decode_frame(streams))
    wall_s = time.perf_counter() - started
    count = len(frames)
    evm_pct, evm_db = accumulator.result()
    p50, p95 = accumulator.percentiles()
    result = EvaluationResult(
        scheme=codec.name,
        rate_param=float(codec.rate_param),
        frames=count,
        payload_bits=payload_bits,
        body_bits=body_bits,
        bits_per_element=payload_bits / (count * 2 * ctx.n_prime),
        cr=ctx.compression_ratio(body_bits / count),
        evm_pct=evm_pct,
        evm_db=evm_db,
        evm_pct_p50=p50,
        evm_pct_p95=p95,
        alpha=_alpha(codec, payload_bits, count),
        wall_s=wall_s,
        tag=tag,
    )
    logger.info(
        f"{codec.name} @ {codec.rate_param:g}{' [' + tag + ']' if tag else ''}: "
        f"{result.bits_per_element:.4f} bits/element, CR {result.cr:.4f}, EVM {evm_pct:.3f}% ({evm_db:.2f} dB)"
    )
    return result


def filter_floor(frames: np.ndarray, ctx: SignalContext) -> Tuple[float, float]:
    """EVM of the decimate/interpolate round trip alone"""
    accumulator = EvmAccumulator(ctx)
    reconstructed = interpolate(decimate(frames, ctx.resampler), ctx.resampler)
    for original, estimate in zip(frames, reconstructed):
        accumulator.add(original, estimate)
    return accumulator.result()


def rate_fidelity(codec: NeuralCodec, frames: np.ndarray) -> Tuple[float, float]:
    """(model rate estimate, realized coded rate), both in bits per latent element"""
    estimated = realized = 0.0
    elements = 0
    for frame in frames:
        scaled = encode_side(frame, codec.ctx)
        s_rows = torch.from_numpy(np.ascontiguousarray(stack_real(scaled.s), dtype=np.float64)).unsqueeze(0)
        symbols = codec.model.encode_symbols(s_rows)
        with torch.no_grad():
            estimated += float(-torch.log2(codec.model.prior.likelihood(symbols)).sum())
        realized += sum(stream.payload_bits for stream in codec.encode_frame(frame))
        elements += symbols.numel()
    return estimated / elements, realized / elements


@dataclass(frozen=True)
class LinkDropResult:
    probabilities: Tuple[float, ...]
    evm_pct: float
    evm_db: float
    layers_decoded: Dict[int, int]


def simulate_link_drops(
    codec: RefinementCodec, frames: np.ndarray, probabilities: Sequence[float], seed: int = 0
) -> LinkDropResult:
    """
    Drops the payload of layer l with probability probabilities[l-1] independently per frame and decodes the
    longest intact prefix; a lost base layer reconstructs as silence.
    """
    rng = np.random.default_rng([seed, 3])
    accumulator = EvmAccumulator(codec.ctx)
    decoded: Dict[int, int] = {}
    for frame in frames:
        streams = codec.encode_frame(frame)
        kept = [s for s, p in zip(streams, probabilities) if rng.random() >= p] + list(streams[len(probabilities) :])
        layers, reconstruction = codec.decode_prefix(kept)
        decoded[layers] = decoded.get(layers, 0) + 1
        accumulator.add(frame, reconstruction)
    evm_pct, evm_db = accumulator.result()
    logger.info(f"Link drops {list(probabilities)}: expected EVM {evm_pct:.3f}% ({evm_db:.2f} dB), layers {decoded}")
    return LinkDropResult(tuple(probabilities), evm_pct, evm_db, decoded)
