"""Binary containers for checkpoints and embedding dumps.

Both formats share the same layout so they can be read without the training
code:

    bytes 0..7    magic (``MTAPCKPT`` or ``MTAPDUMP``)
    bytes 8..11   format version, little-endian uint32
    bytes 12..19  header length H, little-endian uint64
    bytes 20..20+H  UTF-8 JSON header
    remainder     raw array data, concatenated

Every array is little-endian IEEE-754 float32, C-order.  The header lists,
per array, its name, shape, dtype, and byte offset relative to the start of
the data block.  Checkpoint headers additionally carry the step count, the
resolved config echo and hash, and the torch RNG state for exact resume.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"MTAPCKPT"
DUMP_MAGIC = b"MTAPDUMP"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def _write_container(path: Path, magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": "<f4", "offset": offset,
             "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = dict(header)
    header["arrays"] = entries
    header_bytes = json.dumps(header).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def _read_container(path: Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        got = f.read(8)
        if got != magic:
            raise ContainerError(f"{path}: bad magic {got!r}, expected {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        data = f.read()
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]
        buf = data[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=entry["dtype"]).reshape(
            entry["shape"]
        ).copy()
    return header, arrays


@dataclass
class Checkpoint:
    step: int
    config: dict
    config_hash: str
    arrays: dict[str, np.ndarray]
    extra: dict


def save_checkpoint(
    path: str | Path,
    step: int,
    config: dict,
    config_hash: str,
    arrays: dict[str, np.ndarray],
    extra: dict | None = None,
) -> None:
    header = {
        "step": step,
        "config": config,
        "config_hash": config_hash,
        "extra": extra or {},
    }
    _write_container(Path(path), CKPT_MAGIC, header, sorted(arrays.items()))


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, arrays = _read_container(Path(path), CKPT_MAGIC)
    return Checkpoint(
        step=header["step"],
        config=header["config"],
        config_hash=header["config_hash"],
        arrays=arrays,
        extra=header.get("extra", {}),
    )


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class EmbeddingDump:
    """Per-layer token embeddings: each layer is [images, tokens, dim]."""

    layer_names: list[str]
    layers: dict[str, np.ndarray]
    grid_h: int
    grid_w: int
    source_hash: str

    @property
    def shape(self) -> tuple[int, int, int]:
        first = self.layers[self.layer_names[0]]
        return first.shape

    def validate(self) -> None:
        shape = self.shape
        for name in self.layer_names:
            arr = self.layers[name]
            if arr.shape[:2] != shape[:2]:
                raise ContainerError(f"layer {name} shape {arr.shape} mismatches {shape}")
        if shape[1] != self.grid_h * self.grid_w:
            raise ContainerError(
                f"token count {shape[1]} does not match grid {self.grid_h}x{self.grid_w}"
            )


def save_dump(path: str | Path, dump: EmbeddingDump) -> None:
    dump.validate()
    header = {
        "layer_names": dump.layer_names,
        "grid_h": dump.grid_h,
        "grid_w": dump.grid_w,
        "source_hash": dump.source_hash,
    }
    arrays = [(name, dump.layers[name]) for name in dump.layer_names]
    _write_container(Path(path), DUMP_MAGIC, header, arrays)


def load_dump(path: str | Path) -> EmbeddingDump:
    header, arrays = _read_container(Path(path), DUMP_MAGIC)
    dump = EmbeddingDump(
        layer_names=header["layer_names"],
        layers=arrays,
        grid_h=header["grid_h"],
        grid_w=header["grid_w"],
        source_hash=header.get("source_hash", ""),
    )
    dump.validate()
    return dump
