"""Baseband OFDM / SC-FDMA frame generation, the multipath channel, EVM, and decimated-signal statistics."""

from dataclasses import dataclass, field
from logging import getLogger
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from typing_extensions import Literal

from cpri_compression.exceptions import ImproperlyConfigured, InputShapeError, StatisticsError, UndefinedMetricError
from cpri_compression.options import ChannelOptions, FrameOptions

logger = getLogger("cpri-compression")

EVM_DB_SATURATION = 200.0
SUPPORTED_MOD_ORDERS = (4, 16, 64)


@dataclass(frozen=True)
class FrameSpec:
    scenario: Literal["downlink", "uplink"]
    n_fft: int
    n_sym: int
    n_cp: int
    mod_order: int
    occupied_set: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.scenario not in ("downlink", "uplink"):
            raise ImproperlyConfigured(f"Unknown scenario '{self.scenario}'")
        if self.mod_order not in SUPPORTED_MOD_ORDERS:
            raise ImproperlyConfigured(f"Unsupported mod_order {self.mod_order}, expected {SUPPORTED_MOD_ORDERS}")
        if not 0 < self.n_sym <= self.n_fft:
            raise ImproperlyConfigured(f"n_sym={self.n_sym} must be in (0, n_fft={self.n_fft}]")
        if not 0 <= self.n_cp < self.n_fft:
            raise ImproperlyConfigured(f"n_cp={self.n_cp} must be in [0, n_fft={self.n_fft})")
        if not self.occupied_set:
            object.__setattr__(self, "occupied_set", centered_occupied_set(self.n_fft, self.n_sym))
        occupied = self.occupied_set
        if len(occupied) != self.n_sym or len(set(occupied)) != self.n_sym:
            raise ImproperlyConfigured(f"occupied_set must hold {self.n_sym} distinct indices")
        if min(occupied) < 0 or max(occupied) >= self.n_fft:
            raise ImproperlyConfigured(f"occupied_set indices must lie within [0, {self.n_fft})")

    @classmethod
    def from_options(cls, opts: FrameOptions, **overrides) -> "FrameSpec":
        return cls(**{**opts, **overrides})  # type: ignore[arg-type]

    @property
    def guard(self) -> int:
        return (self.n_fft - self.n_sym) // 2

    @property
    def bits_per_frame(self) -> int:
        return self.n_sym * int(np.log2(self.mod_order))

    @property
    def time_length(self) -> int:
        """Samples per stored time-domain frame: the CP is removed before downlink compression"""
        return self.n_fft + self.n_cp if self.scenario == "uplink" else self.n_fft

    @property
    def occupied(self) -> np.ndarray:
        return np.asarray(self.occupied_set, dtype=np.int64)


@dataclass(frozen=True)
class ComplexFrame:
    samples: np.ndarray
    spec: FrameSpec
    domain_tag: Literal["time", "frequency"] = "time"

    def __post_init__(self):
        if not np.all(np.isfinite(self.samples)):
            raise InputShapeError("Frame samples must be finite")


@dataclass(frozen=True)
class ChannelSpec:
    n_taps: int
    snr_db: float
    seed: int
    fixed_taps: Optional[Tuple[complex, ...]] = None
    noise_only: bool = False

    def __post_init__(self):
        if self.n_taps < 1:
            raise ImproperlyConfigured(f"n_taps must be at least 1, not {self.n_taps}")
        if self.fixed_taps is not None and len(self.fixed_taps) != self.n_taps:
            raise ImproperlyConfigured(f"fixed_taps must hold exactly {self.n_taps} coefficients")

    @classmethod
    def from_options(cls, opts: ChannelOptions, seed: int) -> "ChannelSpec":
        return cls(n_taps=opts["n_taps"], snr_db=opts["snr_db"], seed=seed)


@dataclass(frozen=True)
class CovarianceReport:
    analytic: np.ndarray
    empirical: np.ndarray
    rel_frobenius_error: float
    circulant_rel_error: float
    mean_deviation_rms: float
    excess_kurtosis: float
    neighbour_correlation: float
    frames: int


def centered_occupied_set(n_fft: int, n_sym: int) -> Tuple[int, ...]:
    """Natural DFT indices of a contiguous block centered on DC, listed in frequency order"""
    k_star = (n_fft - n_sym) // 2
    return tuple(int((p - n_fft // 2) % n_fft) for p in range(k_star, k_star + n_sym))


def qam_modulate(bits: np.ndarray, mod_order: int) -> np.ndarray:
    """Gray-mapped square QAM with unit average power; the first half of each symbol's bits drives I"""
    if mod_order not in SUPPORTED_MOD_ORDERS:
        raise ImproperlyConfigured(f"Unsupported mod_order {mod_order}")
    bits_per_symbol = int(np.log2(mod_order))
    half = bits_per_symbol // 2
    groups = np.asarray(bits, dtype=np.int64).reshape(-1, bits_per_symbol)
    weights = 1 << np.arange(half - 1, -1, -1)

    def _gray_axis(gray_bits: np.ndarray) -> np.ndarray:
        binary = np.bitwise_xor.accumulate(gray_bits, axis=1)
        index = binary @ weights
        return 2 * index - (2**half - 1)

    scale = np.sqrt(2 * (mod_order - 1) / 3)
    return (_gray_axis(groups[:, :half]) + 1j * _gray_axis(groups[:, half:])) / scale


def _check_bits(bits: np.ndarray, spec: FrameSpec, scenario: str) -> np.ndarray:
    if spec.scenario != scenario:
        raise ImproperlyConfigured(f"Frame spec is for {spec.scenario}, not {scenario}")
    bits = np.asarray(bits)
    if bits.ndim != 1 or bits.size != spec.bits_per_frame:
        raise InputShapeError(f"Expected {spec.bits_per_frame} bits, got shape {bits.shape}")
    return bits


def build_downlink_frame(bits: np.ndarray, spec: FrameSpec) -> ComplexFrame:
    bits = _check_bits(bits, spec, "downlink")
    spectrum = np.zeros(spec.n_fft, dtype=np.complex128)
    spectrum[spec.occupied] = qam_modulate(bits, spec.mod_order)
    return ComplexFrame(np.fft.ifft(spectrum, norm="ortho"), spec)


def build_uplink_tx_frame(bits: np.ndarray, spec: FrameSpec) -> ComplexFrame:
    bits = _check_bits(bits, spec, "uplink")
    precoded = np.fft.fftshift(np.fft.fft(qam_modulate(bits, spec.mod_order), norm="ortho"))
    spectrum = np.zeros(spec.n_fft, dtype=np.complex128)
    spectrum[spec.occupied] = precoded
    return ComplexFrame(append_cyclic_prefix(np.fft.ifft(spectrum, norm="ortho"), spec.n_cp), spec)


def append_cyclic_prefix(symbol: np.ndarray, n_cp: int) -> np.ndarray:
    if n_cp == 0:
        return symbol.copy()
    return np.concatenate([symbol[..., -n_cp:], symbol], axis=-1)


def remove_cyclic_prefix(frame: np.ndarray, n_cp: int) -> np.ndarray:
    return frame[..., n_cp:]


def to_frequency_domain(samples: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """Unitary DFT of the CP-less symbol; accepts a batch along the leading axes"""
    if spec.scenario == "uplink":
        samples = remove_cyclic_prefix(samples, spec.n_cp)
    if samples.shape[-1] != spec.n_fft:
        raise InputShapeError(f"Expected {spec.n_fft} samples after CP removal, got {samples.shape[-1]}")
    return np.fft.fft(samples, axis=-1, norm="ortho")


def channel_taps(ch: ChannelSpec) -> np.ndarray:
    if ch.fixed_taps is not None:
        return np.asarray(ch.fixed_taps, dtype=np.complex128)
    rng = np.random.default_rng([ch.seed, 0])
    return (rng.standard_normal(ch.n_taps) + 1j * rng.standard_normal(ch.n_taps)) / np.sqrt(2)


def apply_channel_components(frame: ComplexFrame, ch: ChannelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Returns the faded signal and the noise realization separately"""
    if frame.domain_tag != "time":
        raise InputShapeError("Channel applies to time-domain frames only")
    samples = frame.samples
    faded = np.convolve(samples, channel_taps(ch))[: samples.size]
    if np.isinf(ch.snr_db) and ch.snr_db > 0:
        return faded, np.zeros_like(faded)
    signal_power = float(np.mean(np.abs(faded) ** 2))
    noise_power = signal_power / 10 ** (ch.snr_db / 10)
    rng = np.random.default_rng([ch.seed, 1])
    noise = np.sqrt(noise_power / 2) * (rng.standard_normal(samples.size) + 1j * rng.standard_normal(samples.size))
    if ch.noise_only:
        faded = np.zeros_like(faded)
    return faded, noise


def apply_channel(frame: ComplexFrame, ch: ChannelSpec) -> ComplexFrame:
    faded, noise = apply_channel_components(frame, ch)
    return ComplexFrame(faded + noise, frame.spec, frame.domain_tag)


def evm_components(
    original_fd: np.ndarray, reconstructed_fd: np.ndarray, occupied: Sequence[int]
) -> Tuple[float, float]:
    """Numerator and denominator of the EVM ratio, for dataset-level aggregation"""
    if original_fd.shape != reconstructed_fd.shape:
        raise InputShapeError(f"Shape mismatch {original_fd.shape} vs {reconstructed_fd.shape}")
    index = np.asarray(occupied, dtype=np.int64)
    reference = original_fd[..., index]
    error = reference - reconstructed_fd[..., index]
    return float(np.sum(np.abs(error) ** 2)), float(np.sum(np.abs(reference) ** 2))


def evm_from_components(error_energy: float, reference_energy: float) -> Tuple[float, float]:
    if reference_energy == 0:
        raise UndefinedMetricError("Reference energy on the occupied subcarriers is zero")
    percent = 100 * np.sqrt(error_energy / reference_energy)
    if error_energy == 0:
        return 0.0, EVM_DB_SATURATION
    return float(percent), float(min(10 * np.log10(reference_energy / error_energy), EVM_DB_SATURATION))


def evm(original_fd: ComplexFrame, reconstructed_fd: ComplexFrame, occupied: Sequence[int]) -> Tuple[float, float]:
    if original_fd.domain_tag != "frequency" or reconstructed_fd.domain_tag != "frequency":
        raise InputShapeError("EVM compares frequency-domain frames")
    return evm_from_components(*evm_components(original_fd.samples, reconstructed_fd.samples, occupied))


def analytic_covariance(n_prime: int, k_star: int, power: float) -> np.ndarray:
    if not 0 <= 2 * k_star < n_prime:
        raise ImproperlyConfigured(f"k_star={k_star} must satisfy 0 <= 2*k_star < n_prime={n_prime}")
    beta = 2 * np.pi / n_prime
    steering = np.exp(1j * beta * np.outer(np.arange(n_prime), np.arange(k_star, n_prime - k_star)))
    return (power / n_prime) * steering @ steering.conj().T


def empirical_covariance(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 2:
        raise StatisticsError(f"Need at least 2 frames of equal length, got shape {frames.shape}")
    centered = frames - frames.mean(axis=0)
    return centered.T @ centered.conj() / frames.shape[0]


def circulant_average(covariance: np.ndarray) -> np.ndarray:
    """Projects a covariance estimate onto circulant matrices by averaging each cyclic diagonal"""
    n = covariance.shape[0]
    rows = np.arange(n)
    lags = np.array([covariance[rows, (rows - lag) % n].mean() for lag in range(n)])
    return lags[(rows[:, None] - rows[None, :]) % n]


def center_spectrum(frames: np.ndarray) -> np.ndarray:
    """Shifts a DC-centered band to be Nyquist-centered (multiplication by (-1)^n)"""
    signs = np.where(np.arange(frames.shape[-1]) % 2 == 0, 1.0, -1.0)
    return frames * signs


def covariance_report(decimated: np.ndarray, k_star: int, power: float) -> CovarianceReport:
    """Compares decimated downlink frames with the closed-form covariance of a band-limited OFDM signal"""
    frames = center_spectrum(np.asarray(decimated))
    n_frames, n_prime = frames.shape
    analytic = analytic_covariance(n_prime, k_star, power)
    empirical = empirical_covariance(frames)
    norm = np.linalg.norm(analytic)
    standard_error = np.sqrt(np.real(np.diag(analytic)) / n_frames)
    normalized_mean = np.abs(frames.mean(axis=0)) / standard_error
    standardized = np.real(frames).ravel() / np.sqrt(np.mean(np.real(frames) ** 2))
    neighbour = np.corrcoef(np.real(frames[:, 0]), np.real(frames[:, 1]))[0, 1]
    report = CovarianceReport(
        analytic=analytic,
        empirical=empirical,
        rel_frobenius_error=float(np.linalg.norm(empirical - analytic) / norm),
        circulant_rel_error=float(np.linalg.norm(circulant_average(empirical) - analytic) / norm),
        mean_deviation_rms=float(np.sqrt(np.mean(normalized_mean**2))),
        excess_kurtosis=float(stats.kurtosis(standardized, fisher=True)),
        neighbour_correlation=float(neighbour),
        frames=n_frames,
    )
    logger.info(
        f"Covariance check over {n_frames} frames: relative error {report.rel_frobenius_error:.4f} "
        f"(circulant {report.circulant_rel_error:.4f}), mean deviation rms {report.mean_deviation_rms:.3f}"
    )
    return report
