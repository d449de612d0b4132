"""Baseline quantizers: Lloyd-Max scalar and generalized-Lloyd vector quantization with Huffman-coded indices."""

from dataclasses import dataclass
from logging import getLogger
from typing import Dict, List, Optional, Tuple

import numpy as np
from bitarray import bitarray
from bitarray.util import canonical_decode, huffman_code
from sklearn.cluster import kmeans_plusplus

from cpri_compression.bitstream import pack_indices, unpack_indices
from cpri_compression.exceptions import CorruptStreamError, InputShapeError, NumericalFailure, StatisticsError

logger = getLogger("cpri-compression")

_DISTORTION_SLACK = 1e-12
_SEARCH_ELEMENTS = 1 << 24


@dataclass(frozen=True)
class ScalarCodebook:
    levels: np.ndarray
    q_bits: int

    def __post_init__(self):
        if self.levels.shape != (2**self.q_bits,):
            raise InputShapeError(f"Expected {2**self.q_bits} levels, got {self.levels.shape}")
        if np.any(np.diff(self.levels) <= 0):
            raise InputShapeError("Scalar codebook levels must be strictly increasing")

    @property
    def thresholds(self) -> np.ndarray:
        return (self.levels[1:] + self.levels[:-1]) / 2


@dataclass(frozen=True)
class VectorCodebook:
    vectors: np.ndarray
    block_dim: int
    q_bits: int
    code_lengths: Optional[np.ndarray] = None
    alpha: float = 1.0

    def __post_init__(self):
        size = 2 ** (self.block_dim * self.q_bits)
        if self.vectors.shape != (size, self.block_dim):
            raise InputShapeError(f"Expected a {size}x{self.block_dim} codebook, got {self.vectors.shape}")
        if self.code_lengths is not None and np.sum(2.0 ** -self.code_lengths.astype(float)) > 1 + 1e-12:
            raise InputShapeError("Huffman code lengths violate the Kraft inequality")

    @property
    def index_bits(self) -> int:
        return self.block_dim * self.q_bits

    @property
    def huffman(self) -> "CanonicalHuffman":
        if self.code_lengths is None:
            raise InputShapeError("Codebook carries no entropy code")
        if not hasattr(self, "_huffman"):
            object.__setattr__(self, "_huffman", CanonicalHuffman(self.code_lengths))
        return self._huffman  # type: ignore[attr-defined]


class CanonicalHuffman:
    """Canonical prefix code rebuilt deterministically from code lengths alone"""

    def __init__(self, code_lengths: np.ndarray):
        self.code_lengths = np.asarray(code_lengths, dtype=np.int64)
        order = sorted(range(len(self.code_lengths)), key=lambda i: (self.code_lengths[i], i))
        max_length = int(self.code_lengths.max())
        self.count = [0] * (max_length + 1)
        for length in self.code_lengths:
            self.count[length] += 1
        self.symbol = order
        self.codes: Dict[int, bitarray] = {}
        code, previous_length = 0, 0
        for i in order:
            length = int(self.code_lengths[i])
            code <<= length - previous_length
            self.codes[i] = bitarray(format(code, f"0{length}b"), endian="big")
            code += 1
            previous_length = length

    @classmethod
    def from_frequencies(cls, counts: np.ndarray) -> "CanonicalHuffman":
        if len(counts) == 1:
            return cls(np.array([1]))
        code = huffman_code({i: int(c) for i, c in enumerate(counts)})
        return cls(np.array([len(code[i]) for i in range(len(counts))]))

    def encode(self, indices: np.ndarray) -> bitarray:
        out = bitarray(endian="big")
        out.encode(self.codes, (int(i) for i in indices))
        return out

    def decode(self, bits: bitarray, count: int) -> np.ndarray:
        decoded: List[int] = []
        try:
            for symbol in canonical_decode(bits, self.count, self.symbol):
                decoded.append(symbol)
                if len(decoded) == count:
                    break
        except ValueError as e:
            raise CorruptStreamError(f"Undecodable Huffman prefix after {len(decoded)} symbols") from e
        if len(decoded) != count:
            raise CorruptStreamError(f"Payload ended after {len(decoded)} of {count} codewords")
        return np.asarray(decoded, dtype=np.int64)

    def average_length(self, counts: np.ndarray) -> float:
        counts = np.asarray(counts, dtype=float)
        return float(np.sum(counts * self.code_lengths) / counts.sum())


def _check_monotone(distortions: List[float]) -> None:
    if len(distortions) > 1 and distortions[-1] > distortions[-2] * (1 + _DISTORTION_SLACK) + _DISTORTION_SLACK:
        raise NumericalFailure(
            f"Lloyd distortion increased from {distortions[-2]} to {distortions[-1]}", step=len(distortions) - 1
        )


def nearest_level(values: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the closest level; a value on a midpoint goes to the lower index"""
    return np.searchsorted((levels[1:] + levels[:-1]) / 2, values, side="left")


def nearest_codeword(
    blocks: np.ndarray, vectors: np.ndarray, chunk: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Exhaustive Euclidean search; ties resolve to the lowest index"""
    chunk = chunk or max(1, _SEARCH_ELEMENTS // vectors.size)
    indices = np.empty(len(blocks), dtype=np.int64)
    distances = np.empty(len(blocks))
    for start in range(0, len(blocks), chunk):
        piece = blocks[start : start + chunk]
        squared = ((piece[:, None, :] - vectors[None, :, :]) ** 2).sum(axis=-1)
        indices[start : start + chunk] = np.argmin(squared, axis=1)
        distances[start : start + chunk] = squared[np.arange(len(piece)), indices[start : start + chunk]]
    return indices, distances


def _split_most_populated(centroids: np.ndarray, empty: int, assignment: np.ndarray, samples: np.ndarray) -> None:
    populated = int(np.argmax(np.bincount(assignment, minlength=len(centroids))))
    members = samples[assignment == populated]
    spread = members.std(axis=0) if len(members) > 1 else np.ones(samples.shape[1])
    offset = 1e-3 * np.where(spread > 0, spread, 1.0)
    centroids[empty] = centroids[populated] + offset
    logger.warning(f"Re-seeding empty cell {empty} by splitting cell {populated} ({len(members)} samples)")


def _lloyd(
    samples: np.ndarray, centroids: np.ndarray, assign, max_iter: int, tol: float
) -> Tuple[np.ndarray, np.ndarray, List[float]]:
    """Generalized Lloyd iteration shared by the scalar (1-D) and vector quantizers"""
    distortions: List[float] = []
    assignment, errors = assign(samples, centroids)
    for iteration in range(max_iter):
        distortions.append(float(errors.mean()))
        _check_monotone(distortions)
        if len(distortions) > 1 and distortions[-2] - distortions[-1] < tol:
            break
        populations = np.bincount(assignment, minlength=len(centroids))
        for cell in np.flatnonzero(populations):
            centroids[cell] = samples[assignment == cell].mean(axis=0)
        for cell in np.flatnonzero(populations == 0):
            _split_most_populated(centroids, int(cell), assignment, samples)
        assignment, errors = assign(samples, centroids)
        logger.debug(f"Lloyd iteration {iteration}: distortion {distortions[-1]:.6g}")
    return centroids, assignment, distortions


def _assign_scalar(samples: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(centroids[:, 0], kind="stable")
    centroids[:] = centroids[order]
    index = nearest_level(samples[:, 0], centroids[:, 0])
    return index, (samples[:, 0] - centroids[index, 0]) ** 2


def train_scalar(samples: np.ndarray, q_bits: int, max_iter: int = 100, tol: float = 1e-9) -> ScalarCodebook:
    samples = np.asarray(samples, dtype=float).ravel()
    size = 2**q_bits
    if np.unique(samples).size < size:
        raise StatisticsError(f"Need at least {size} distinct samples to train a {q_bits}-bit scalar quantizer")
    initial = np.quantile(samples, (np.arange(size) + 0.5) / size)
    levels, _, distortions = _lloyd(samples[:, None], initial[:, None].copy(), _assign_scalar, max_iter, tol)
    levels = np.sort(levels[:, 0])
    logger.info(f"Trained {q_bits}-bit scalar quantizer: distortion {distortions[-1]:.6g} in {len(distortions)} steps")
    return ScalarCodebook(levels=levels, q_bits=q_bits)


def _interleave(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s)
    return np.stack([s.real, s.imag], axis=-1).reshape(s.shape[:-1] + (-1,))


def _deinterleave(values: np.ndarray) -> np.ndarray:
    pairs = values.reshape(values.shape[:-1] + (-1, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


def apply_scalar(s: np.ndarray, cb: ScalarCodebook) -> Tuple[np.ndarray, bitarray]:
    indices = nearest_level(_interleave(s), cb.levels)
    return _deinterleave(cb.levels[indices]), pack_indices(indices, cb.q_bits)


def decode_scalar(payload: bitarray, cb: ScalarCodebook, n_prime: int) -> np.ndarray:
    return _deinterleave(cb.levels[unpack_indices(payload, cb.q_bits, 2 * n_prime)])


def _assign_vector(samples: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return nearest_codeword(samples, centroids)


def train_vector(
    samples: np.ndarray, b: int, q_bits: int, max_iter: int = 50, tol: float = 1e-9, seed: int = 0
) -> VectorCodebook:
    samples = np.asarray(samples, dtype=float).reshape(-1, b)
    size = 2 ** (b * q_bits)
    if len(samples) < size:
        raise StatisticsError(f"Need at least {size} blocks to train a {size}-entry vector quantizer")
    initial, _ = kmeans_plusplus(samples, n_clusters=size, random_state=seed)
    vectors, assignment, distortions = _lloyd(samples, initial.copy(), _assign_vector, max_iter, tol)
    counts = np.bincount(assignment, minlength=size)
    huffman = CanonicalHuffman.from_frequencies(counts + 1)
    alpha = huffman.average_length(counts) / (b * q_bits)
    logger.info(
        f"Trained {size}-entry vector quantizer (b={b}, Q={q_bits}): "
        f"distortion {distortions[-1]:.6g}, alpha {alpha:.4f}"
    )
    return VectorCodebook(vectors=vectors, block_dim=b, q_bits=q_bits, code_lengths=huffman.code_lengths, alpha=alpha)


def _blocks(s: np.ndarray, b: int) -> np.ndarray:
    values = _interleave(s)
    if values.size % b:
        raise InputShapeError(f"{values.size} real components cannot be grouped in blocks of {b}")
    return values.reshape(-1, b)


def apply_vector(s: np.ndarray, cb: VectorCodebook, entropy_coded: bool) -> Tuple[np.ndarray, bitarray]:
    indices, _ = nearest_codeword(_blocks(s, cb.block_dim), cb.vectors)
    s_hat = _deinterleave(cb.vectors[indices].reshape(-1))
    payload = cb.huffman.encode(indices) if entropy_coded else pack_indices(indices, cb.index_bits)
    return s_hat, payload


def decode_vector(payload: bitarray, cb: VectorCodebook, n_prime: int, entropy_coded: bool) -> np.ndarray:
    count = 2 * n_prime // cb.block_dim
    if entropy_coded:
        indices = cb.huffman.decode(payload, count)
    else:
        indices = unpack_indices(payload, cb.index_bits, count)
    return _deinterleave(cb.vectors[indices].reshape(-1))


def compression_ratio(payload_bits: float, n_prime: int, n_t: int, q_s: int, k: int, m: int) -> float:
    return (payload_bits + q_s * n_t) * k / m / (30 * n_prime)
