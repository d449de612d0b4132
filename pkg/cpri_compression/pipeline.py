"""
The fronthaul signal path around a codec: decimate and scale at the encoder, rescale and interpolate at the
decoder, and the linear map from a decoded decimated-domain estimate to the occupied subcarriers.
"""

from dataclasses import dataclass
from logging import getLogger

import numpy as np
import torch

from cpri_compression.block_scaling import ScaledFrame, ScalingConfig, compute_and_apply_scaling, rescale
from cpri_compression.exceptions import InputShapeError
from cpri_compression.multirate import ResamplerSpec, decimate, interpolate
from cpri_compression.options import RunOptions
from cpri_compression.signal_chain import FrameSpec, append_cyclic_prefix, to_frequency_domain

logger = getLogger("cpri-compression")


@dataclass(frozen=True)
class SignalContext:
    frame: FrameSpec
    resampler: ResamplerSpec
    scaling: ScalingConfig

    @classmethod
    def from_options(cls, opts: RunOptions, **frame_overrides) -> "SignalContext":
        return cls(
            frame=FrameSpec.from_options(opts["frame"], **frame_overrides),
            resampler=ResamplerSpec.from_options(opts["resampler"]),
            scaling=ScalingConfig.from_options(opts["scaling"]),
        )

    @property
    def n_prime(self) -> int:
        return self.resampler.decimated_length(self.frame.time_length)

    @property
    def n_t(self) -> int:
        return self.scaling.block_count(self.n_prime)

    @property
    def projector(self) -> "FrequencyProjector":
        if not hasattr(self, "_projector"):
            object.__setattr__(self, "_projector", FrequencyProjector(self))
        return self._projector  # type: ignore[attr-defined]

    def compression_ratio(self, body_bits: float) -> float:
        return body_bits * self.resampler.k / self.resampler.m / (30 * self.n_prime)


@dataclass(frozen=True)
class PreparedFrames:
    """Encoder-side view of a batch: scaled decimated frames, their factors and the occupied-subcarrier targets"""

    s: np.ndarray
    t: np.ndarray
    x_f: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]

    def subset(self, index) -> "PreparedFrames":
        return PreparedFrames(self.s[index], self.t[index], self.x_f[index])


def occupied_spectrum(frames: np.ndarray, ctx: SignalContext) -> np.ndarray:
    return to_frequency_domain(frames, ctx.frame)[..., ctx.frame.occupied]


def encode_side(frames: np.ndarray, ctx: SignalContext) -> ScaledFrame:
    frames = np.asarray(frames)
    if frames.shape[-1] != ctx.frame.time_length:
        raise InputShapeError(f"Expected frames of {ctx.frame.time_length} samples, got {frames.shape[-1]}")
    return compute_and_apply_scaling(decimate(frames, ctx.resampler), ctx.scaling)


def prepare_frames(frames: np.ndarray, ctx: SignalContext) -> PreparedFrames:
    frames = np.atleast_2d(frames)
    scaled = encode_side(frames, ctx)
    return PreparedFrames(s=scaled.s, t=scaled.t, x_f=occupied_spectrum(frames, ctx))


def reconstruct_frames(s_hat: np.ndarray, t: np.ndarray, ctx: SignalContext) -> np.ndarray:
    """Decoded scaled samples back to time-domain frames of the stored length"""
    return interpolate(rescale(s_hat, t, ctx.scaling), ctx.resampler)


def with_cyclic_prefix(frames: np.ndarray, ctx: SignalContext) -> np.ndarray:
    """Downlink frames are compressed without their CP; the radio unit re-inserts it"""
    if ctx.frame.scenario == "downlink":
        return append_cyclic_prefix(frames, ctx.frame.n_cp)
    return frames


class FrequencyProjector:
    """
    Rescaling, interpolation, CP removal and the DFT are all linear, so the decoder output reaches the
    occupied subcarriers through one fixed (N', |O|) matrix. Training differentiates through it directly.
    """

    def __init__(self, ctx: SignalContext):
        basis = np.eye(ctx.n_prime, dtype=np.complex128)
        self.matrix = occupied_spectrum(interpolate(basis, ctx.resampler), ctx)
        self._tensor = torch.from_numpy(self.matrix)
        logger.debug(f"Built {self.matrix.shape} frequency projector for the {ctx.frame.scenario} path")

    def apply(self, x_hat_prime: np.ndarray) -> np.ndarray:
        return np.asarray(x_hat_prime) @ self.matrix

    def apply_rows(self, s_hat_rows: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
        """(batch, 2, N') real decoder output and (batch, N') per-sample factors -> (batch, |O|) complex"""
        x_hat_prime = torch.complex(s_hat_rows[:, 0, :] * scale, s_hat_rows[:, 1, :] * scale)
        return x_hat_prime @ self._tensor


def sample_factors(t: np.ndarray, ctx: SignalContext) -> np.ndarray:
    """Per-sample scaling factor (batch, N') expanded from the per-block factors"""
    return np.repeat(np.asarray(t, dtype=np.float64), ctx.scaling.n_s, axis=-1)[..., : ctx.n_prime]
