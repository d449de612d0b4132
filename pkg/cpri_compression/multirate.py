from dataclasses import dataclass
from functools import lru_cache
from logging import getLogger
from typing import Union, overload

import numpy as np
from scipy import signal

from cpri_compression.exceptions import ImproperlyConfigured, InputShapeError
from cpri_compression.options import ResamplerOptions
from cpri_compression.signal_chain import ComplexFrame

Samples = Union[ComplexFrame, np.ndarray]

logger = getLogger("cpri-compression")


@dataclass(frozen=True)
class ResamplerSpec:
    """Rational K/M resampler. `diagnostics` admits k >= m (for identity checks); `bypass` skips filtering."""

    k: int
    m: int
    taps: int = 641
    kaiser_beta: float = 8.0
    bypass: bool = False
    diagnostics: bool = False

    def __post_init__(self):
        if self.k < 1 or self.m < 1:
            raise ImproperlyConfigured(f"k and m must be positive, got k={self.k}, m={self.m}")
        if self.m <= self.k and not self.diagnostics:
            raise ImproperlyConfigured(f"Decimation needs m > k, got k={self.k}, m={self.m}")
        if self.taps < 1 or self.taps % 2 == 0:
            raise ImproperlyConfigured(f"taps must be an odd positive integer, not {self.taps}")
        if self.kaiser_beta < 0:
            raise ImproperlyConfigured(f"kaiser_beta must be >= 0, not {self.kaiser_beta}")
        if self.bypass and self.k != self.m:
            raise ImproperlyConfigured("bypass is only meaningful when k == m")

    @classmethod
    def from_options(cls, opts: ResamplerOptions) -> "ResamplerSpec":
        return cls(**opts, diagnostics=opts["k"] >= opts["m"])

    @property
    def gain(self) -> int:
        return self.k

    def decimated_length(self, n: int) -> int:
        if (n * self.k) % self.m:
            raise ImproperlyConfigured(f"Length {n}*{self.k}/{self.m} is not an integer")
        return n * self.k // self.m

    def interpolated_length(self, n_prime: int) -> int:
        if (n_prime * self.m) % self.k:
            raise ImproperlyConfigured(f"Length {n_prime}*{self.m}/{self.k} is not an integer")
        return n_prime * self.m // self.k


@lru_cache(maxsize=32)
def lowpass_taps(up: int, down: int, taps: int, kaiser_beta: float) -> np.ndarray:
    """Kaiser-windowed sinc with cutoff pi/max(up, down) at the upsampled rate and passband gain `up`"""
    h = signal.firwin(taps, 1.0 / max(up, down), window=("kaiser", kaiser_beta)) * up
    h.setflags(write=False)
    return h


@lru_cache(maxsize=32)
def _circular_kernel_spectrum(length: int, up: int, down: int, taps: int, kaiser_beta: float) -> np.ndarray:
    h = lowpass_taps(up, down, taps, kaiser_beta)
    delay = (taps - 1) // 2
    kernel = np.zeros(length)
    np.add.at(kernel, (np.arange(taps) - delay) % length, h)
    spectrum = np.fft.fft(kernel)
    spectrum.setflags(write=False)
    return spectrum


def resample(samples: np.ndarray, up: int, down: int, taps: int, kaiser_beta: float) -> np.ndarray:
    """
    Zero-insert by `up`, filter circularly over the frame with zero group delay, keep every `down`-th sample.
    Operates on the last axis so whole batches resample in one call.
    """
    samples = np.asarray(samples)
    length = samples.shape[-1] * up
    if length % down:
        raise ImproperlyConfigured(f"Length {samples.shape[-1]}*{up}/{down} is not an integer")
    upsampled = np.zeros(samples.shape[:-1] + (length,), dtype=np.result_type(samples, np.complex128))
    upsampled[..., ::up] = samples
    spectrum = _circular_kernel_spectrum(length, up, down, taps, kaiser_beta)
    filtered = np.fft.ifft(np.fft.fft(upsampled, axis=-1) * spectrum, axis=-1)
    return filtered[..., ::down]


def _samples_of(frame: Samples) -> np.ndarray:
    samples = frame.samples if isinstance(frame, ComplexFrame) else np.asarray(frame)
    if samples.ndim < 1 or samples.shape[-1] == 0:
        raise InputShapeError("Cannot resample an empty frame")
    return samples


def _like(frame: Samples, samples: np.ndarray) -> Samples:
    if isinstance(frame, ComplexFrame):
        return ComplexFrame(samples, frame.spec, frame.domain_tag)
    return samples


@overload
def decimate(frame: ComplexFrame, spec: ResamplerSpec) -> ComplexFrame: ...


@overload
def decimate(frame: np.ndarray, spec: ResamplerSpec) -> np.ndarray: ...


def decimate(frame: Samples, spec: ResamplerSpec) -> Samples:
    """K/M resampling along the last axis

    A ComplexFrame comes back as a ComplexFrame of the same numerology holding N' samples; a bare array, including a
    (batch, N) stack of frames, comes back as an array.
    """
    samples = _samples_of(frame)
    spec.decimated_length(samples.shape[-1])
    if spec.bypass:
        return _like(frame, samples.copy())
    return _like(frame, resample(samples, spec.k, spec.m, spec.taps, spec.kaiser_beta))


@overload
def interpolate(frame: ComplexFrame, spec: ResamplerSpec) -> ComplexFrame: ...


@overload
def interpolate(frame: np.ndarray, spec: ResamplerSpec) -> np.ndarray: ...


def interpolate(frame: Samples, spec: ResamplerSpec) -> Samples:
    """M/K resampling back to the frame length, with the same frame-or-array contract as `decimate`"""
    samples = _samples_of(frame)
    spec.interpolated_length(samples.shape[-1])
    if spec.bypass:
        return _like(frame, samples.copy())
    return _like(frame, resample(samples, spec.m, spec.k, spec.taps, spec.kaiser_beta))
