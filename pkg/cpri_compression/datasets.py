"""Seeded frame generation and the CPRF on-disk frame container."""

import struct
from concurrent.futures import ProcessPoolExecutor
from logging import getLogger
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from cpri_compression.bitstream import SCENARIO_IDS, SCENARIO_NAMES
from cpri_compression.exceptions import BundleFormatError
from cpri_compression.signal_chain import (
    ChannelSpec,
    FrameSpec,
    apply_channel,
    build_downlink_frame,
    build_uplink_tx_frame,
)

logger = getLogger("cpri-compression")

MAGIC = b"CPRF"
VERSION = 1
_HEADER = struct.Struct("<4sBBHHHBII")
SPLITS = {"train": 0, "val": 1, "test": 2}


def generate_frame(
    spec: FrameSpec, channel: Optional[Tuple[int, float]], seed: int, split: int, index: int
) -> np.ndarray:
    """One frame, reproducible from (seed, split, index) alone so parallel and serial generation agree"""
    rng = np.random.default_rng([seed, split, index])
    bits = rng.integers(0, 2, spec.bits_per_frame)
    if spec.scenario == "downlink":
        return build_downlink_frame(bits, spec).samples
    frame = build_uplink_tx_frame(bits, spec)
    if channel is None:
        return frame.samples
    n_taps, snr_db = channel
    channel_seed = int(rng.integers(0, 2**63))
    return apply_channel(frame, ChannelSpec(n_taps=n_taps, snr_db=snr_db, seed=channel_seed)).samples


def _generate_chunk(args) -> np.ndarray:
    spec, channel, seed, split, start, stop = args
    return np.stack([generate_frame(spec, channel, seed, split, i) for i in range(start, stop)])


def generate_frames(
    spec: FrameSpec,
    count: int,
    seed: int,
    split: str = "train",
    channel: Optional[Tuple[int, float]] = None,
    workers: int = 1,
    chunk: int = 500,
) -> np.ndarray:
    jobs = [(spec, channel, seed, SPLITS[split], start, min(start + chunk, count)) for start in range(0, count, chunk)]
    if not jobs:
        return np.zeros((0, spec.time_length), dtype=np.complex128)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_generate_chunk, jobs))
    else:
        chunks = [_generate_chunk(job) for job in jobs]
    logger.debug(f"Generated {count} {spec.scenario} frames for split '{split}' with {workers} worker(s)")
    return np.concatenate(chunks)


def write_frames(path: Path, frames: np.ndarray, spec: FrameSpec) -> None:
    frames = np.asarray(frames)
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        SCENARIO_IDS[spec.scenario],
        spec.n_fft,
        spec.n_sym,
        spec.n_cp,
        spec.mod_order,
        frames.shape[1],
        frames.shape[0],
    )
    interleaved = np.empty(frames.shape + (2,), dtype="<f4")
    interleaved[..., 0] = frames.real
    interleaved[..., 1] = frames.imag
    with open(path, "wb") as f:
        f.write(header)
        f.write(interleaved.tobytes())
    logger.info(f"Wrote {frames.shape[0]} frames to {path}")


def read_frames(path: Path) -> Tuple[np.ndarray, FrameSpec]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise BundleFormatError(f"{path} is too short to be a frame file")
    magic, version, scenario, n_fft, n_sym, n_cp, mod_order, length, count = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise BundleFormatError(f"{path} is not a version {VERSION} frame file")
    expected = _HEADER.size + count * length * 8
    if len(data) != expected:
        raise BundleFormatError(f"{path} holds {len(data)} bytes, expected {expected}")
    spec = FrameSpec(SCENARIO_NAMES[scenario], n_fft, n_sym, n_cp, mod_order)  # type: ignore[arg-type]
    values = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, length, 2).astype(np.float64)
    return values[..., 0] + 1j * values[..., 1], spec
