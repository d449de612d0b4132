"""
Model bundles: every trained artifact of one scheme (network weights, codebooks, entropy tables) as named
little-endian arrays in a single `.npz`, with a JSON metadata record carried alongside as a uint8 array.
"""

import io
import json
from hashlib import sha3_224 as hash
from logging import getLogger
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from torch import nn

from cpri_compression._decorators import _raise_if_missing
from cpri_compression.entropy_codec import EntropyTable
from cpri_compression.exceptions import BundleFormatError

logger = getLogger("cpri-compression")

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def _little_endian(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.dtype.kind == "f":
        return values.astype("<f8")
    if values.dtype.kind in "iub":
        return values.astype("<i8")
    raise BundleFormatError(f"Cannot store arrays of dtype {values.dtype}")


def module_digest(module: nn.Module) -> str:
    """Digest over every parameter and buffer; equal digests mean bit-identical weights"""
    digest = hash()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class ModelBundle:
    def __init__(
        self,
        scheme: str,
        metadata: Optional[Dict[str, Any]] = None,
        arrays: Optional[Dict[str, np.ndarray]] = None,
        path: Optional[Path] = None,
    ):
        self.scheme = scheme
        self.metadata = dict(metadata or {})
        self.arrays: Dict[str, np.ndarray] = dict(arrays or {})
        self.path = path

    def put(self, name: str, values: np.ndarray) -> None:
        self.arrays[name] = _little_endian(values)

    @_raise_if_missing("array")
    def array(self, name: str) -> Optional[np.ndarray]:
        return self.arrays.get(name)

    @_raise_if_missing("metadata entry")
    def meta(self, name: str) -> Any:
        return self.metadata.get(name)

    def has(self, name: str) -> bool:
        return name in self.arrays

    def add_module(self, prefix: str, module: nn.Module) -> None:
        for name, tensor in module.state_dict().items():
            self.put(f"{prefix}.{name}", tensor.detach().cpu().numpy())

    def load_module(self, prefix: str, module: nn.Module) -> nn.Module:
        state = {}
        for name, tensor in module.state_dict().items():
            values = self.array(f"{prefix}.{name}")
            if values.shape != tuple(tensor.shape):
                raise BundleFormatError(
                    f"Bundle {self.path or '<memory>'} entry '{prefix}.{name}' has shape {values.shape}, "
                    f"expected {tuple(tensor.shape)}"
                )
            state[name] = torch.from_numpy(values.astype(np.float64 if tensor.is_floating_point() else np.int64))
        module.load_state_dict(state)
        return module

    def add_table(self, prefix: str, table: EntropyTable) -> None:
        self.put(f"{prefix}.lower", table.lower)
        self.put(f"{prefix}.upper", table.upper)
        for channel in range(table.channels):
            self.put(f"{prefix}.probabilities.{channel}", table.probabilities[channel])
            self.put(f"{prefix}.frequencies.{channel}", table.frequencies[channel])

    def table(self, prefix: str) -> EntropyTable:
        lower = self.array(f"{prefix}.lower").astype(np.int64)
        upper = self.array(f"{prefix}.upper").astype(np.int64)
        channels = range(len(lower))
        return EntropyTable(
            lower,
            upper,
            tuple(self.array(f"{prefix}.probabilities.{c}") for c in channels),
            tuple(self.array(f"{prefix}.frequencies.{c}").astype(np.int64) for c in channels),
        )

    def parameter_counts(self) -> Dict[str, int]:
        """Stored scalar count per top-level component"""
        counts: Dict[str, int] = {}
        for name, values in self.arrays.items():
            component = name.split(".", 1)[0]
            counts[component] = counts.get(component, 0) + int(values.size)
        return counts

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"format_version": FORMAT_VERSION, "scheme": self.scheme, "metadata": self.metadata}
        encoded = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
        buffer = io.BytesIO()
        np.savez(buffer, **{_META_KEY: encoded}, **self.arrays)
        path.write_bytes(buffer.getvalue())
        self.path = path
        logger.info(f"Saved {self.scheme} bundle with {len(self.arrays)} arrays to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelBundle":
        path = Path(path)
        try:
            with np.load(path, allow_pickle=False) as archive:
                contents = {name: archive[name] for name in archive.files}
        except (OSError, ValueError) as e:
            raise BundleFormatError(f"Could not read bundle {path}: {e}") from e
        if _META_KEY not in contents:
            raise BundleFormatError(f"Bundle {path} carries no metadata record")
        header = json.loads(contents.pop(_META_KEY).tobytes().decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise BundleFormatError(
                f"Bundle {path} has format version {header.get('format_version')}, expected {FORMAT_VERSION}"
            )
        logger.debug(f"Loaded {header['scheme']} bundle from {path}")
        return cls(header["scheme"], header["metadata"], contents, path)
