"""Versioned binary checkpoint files.

Layout (little-endian)::

    magic 'SMCK' | u32 version | u32 stage | u64 step | u64 episodes | u32 n_blocks
    n_blocks x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dims | float64 data )

Blocks keep their insertion order, so load followed by save reproduces the
input bytes.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .errors import CheckpointError

log = logging.getLogger(__name__)

MAGIC = b"SMCK"
FORMAT_VERSION = 1
STAGES: Tuple[str, ...] = ("init", "stage1", "stage2", "direct")

_HEADER = struct.Struct("<4sIIQQI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_DATA = np.dtype("<f8")


@dataclass
class Checkpoint:
    stage: str
    step: int = 0
    episodes: int = 0
    blocks: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag '{self.stage}', expected one of {list(STAGES)}")

    def families(self) -> List[str]:
        """Network names present, e.g. ``policy`` or ``q_target``, in block order."""
        seen: List[str] = []
        for name in self.blocks:
            family = name.split(".", 1)[0]
            if family not in ("meta", "opt") and family not in seen:
                seen.append(family)
        return seen

    def family(self, prefix: str) -> Dict[str, np.ndarray]:
        """Blocks of one network with the prefix stripped."""
        head = prefix + "."
        return {name[len(head):]: data for name, data in self.blocks.items() if name.startswith(head)}

    def to_bytes(self) -> bytes:
        parts = [_HEADER.pack(MAGIC, self.version, STAGES.index(self.stage),
                              int(self.step), int(self.episodes), len(self.blocks))]
        for name, data in self.blocks.items():
            encoded = name.encode("utf-8")
            array = np.ascontiguousarray(data, dtype=_DATA)
            parts.append(_U32.pack(len(encoded)))
            parts.append(encoded)
            parts.append(_U32.pack(array.ndim))
            parts.extend(_U64.pack(dim) for dim in array.shape)
            parts.append(array.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _HEADER.size:
            raise CheckpointError("truncated checkpoint: header incomplete")
        magic, version, stage, step, episodes, n_blocks = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        if stage >= len(STAGES):
            raise CheckpointError(f"unknown stage index {stage} in header")

        offset = _HEADER.size
        blocks: Dict[str, np.ndarray] = {}
        name = "<header>"

        def take(size: int, what: str) -> memoryview:
            nonlocal offset
            if offset + size > len(raw):
                raise CheckpointError(f"truncated checkpoint: block '{name}' is missing its {what}")
            chunk = memoryview(raw)[offset:offset + size]
            offset += size
            return chunk

        for index in range(n_blocks):
            name = f"#{index}"
            (name_len,) = _U32.unpack(take(_U32.size, "name length"))
            try:
                name = bytes(take(name_len, "name")).decode("utf-8")
            except UnicodeDecodeError as err:
                raise CheckpointError(f"corrupt checkpoint: block '{name}' has an undecodable name") from err
            (rank,) = _U32.unpack(take(_U32.size, "rank"))
            dims = tuple(_U64.unpack(take(_U64.size, "dims"))[0] for _ in range(rank))
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            data = np.frombuffer(take(count * _DATA.itemsize, "data"), dtype=_DATA).reshape(dims).copy()
            blocks[name] = data
        if offset != len(raw):
            raise CheckpointError(f"checkpoint has {len(raw) - offset} trailing bytes after block '{name}'")
        return cls(stage=STAGES[stage], step=step, episodes=episodes, blocks=blocks, version=version)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint.to_bytes())
    log.info("saved %s checkpoint (%d episodes) to %s", checkpoint.stage, checkpoint.episodes, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"path: {path} does not exist, please provide correct path")
    return Checkpoint.from_bytes(path.read_bytes())
