from dataclasses import dataclass

import numpy as np

from cpri_compression.exceptions import ImproperlyConfigured, InputShapeError
from cpri_compression.options import ScalingOptions


@dataclass(frozen=True)
class ScalingConfig:
    n_s: int
    q_s: int

    def __post_init__(self):
        if self.n_s < 1:
            raise ImproperlyConfigured(f"n_s must be >= 1, not {self.n_s}")
        if not 1 <= self.q_s <= 15:
            raise ImproperlyConfigured(f"q_s must be within [1, 15], not {self.q_s}")

    @classmethod
    def from_options(cls, opts: ScalingOptions) -> "ScalingConfig":
        return cls(n_s=opts["n_s"], q_s=opts["q_s"])

    @property
    def max_factor(self) -> int:
        return 2**self.q_s - 1

    def block_count(self, n_prime: int) -> int:
        return -(-n_prime // self.n_s)


@dataclass(frozen=True)
class ScaledFrame:
    s: np.ndarray
    t: np.ndarray


def _block_factors(values: np.ndarray, cfg: ScalingConfig) -> np.ndarray:
    return np.repeat(values, cfg.n_s, axis=-1)


def compute_and_apply_scaling(x_prime: np.ndarray, cfg: ScalingConfig) -> ScaledFrame:
    """Works on a single frame or a batch (leading axes); the last axis holds the N' samples"""
    x_prime = np.asarray(x_prime)
    n_prime = x_prime.shape[-1]
    if n_prime == 0:
        raise InputShapeError("Cannot scale an empty frame")
    n_t = cfg.block_count(n_prime)
    padded = np.zeros(x_prime.shape[:-1] + (n_t * cfg.n_s,), dtype=np.complex128)
    padded[..., :n_prime] = x_prime
    blocks = padded.reshape(x_prime.shape[:-1] + (n_t, cfg.n_s))
    peak = np.maximum(np.abs(blocks.real), np.abs(blocks.imag)).max(axis=-1)
    t = np.clip(np.ceil(peak), 1, cfg.max_factor).astype(np.int64)
    s = x_prime / _block_factors(t, cfg)[..., :n_prime]
    return ScaledFrame(s=s, t=t)


def rescale(s_hat: np.ndarray, t: np.ndarray, cfg: ScalingConfig) -> np.ndarray:
    s_hat = np.asarray(s_hat)
    t = np.asarray(t)
    n_prime = s_hat.shape[-1]
    if t.shape[-1] != cfg.block_count(n_prime):
        raise InputShapeError(f"{t.shape[-1]} scaling factors do not cover {n_prime} samples in blocks of {cfg.n_s}")
    return s_hat * _block_factors(t, cfg)[..., :n_prime]
