"""Binary checkpoint format.

Layout: magic ``RCON``, little-endian u32 version, u32 header length, UTF-8
JSON header, then the concatenated little-endian float32 tensor payloads.
The header carries the training config snapshot, the training-phase tag,
per-feature radiomics standardization statistics, and a tensor directory of
(name, shape, byte offset) sorted by name.  Serialization is canonical, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError

MAGIC = b"RCON"
FORMAT_VERSION = 1

PHASES = ("pretrained", "finetuned")


@dataclass
class Checkpoint:
    phase: str
    config: dict
    radiomics_mean: list
    radiomics_std: list
    tensors: dict
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.phase not in PHASES:
            raise CheckpointError(f"unknown phase {self.phase!r}; expected {PHASES}")

    def params(self) -> dict[str, Tensor]:
        """Materialise autodiff parameter tensors (float32 copies)."""
        return {name: Tensor(arr.copy()) for name, arr in self.tensors.items()}


def from_params(phase: str, config: dict, radiomics_mean, radiomics_std,
                params: dict) -> Checkpoint:
    tensors = {name: np.asarray(t.values if isinstance(t, Tensor) else t,
                                dtype=np.float32)
               for name, t in params.items()}
    return Checkpoint(phase=phase, config=dict(config),
                      radiomics_mean=[float(x) for x in radiomics_mean],
                      radiomics_std=[float(x) for x in radiomics_std],
                      tensors=tensors)


def save(ckpt: Checkpoint, path: str) -> None:
    directory = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "config": ckpt.config,
        "phase": ckpt.phase,
        "radiomics_stats": {"mean": ckpt.radiomics_mean, "std": ckpt.radiomics_std},
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", ckpt.version, len(header_bytes)))
        f.write(header_bytes)
        for name in sorted(ckpt.tensors):
            f.write(ckpt.tensors[name].astype("<f4", copy=False).tobytes())


def load(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic in {path}: not a checkpoint file")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}; this reader supports "
            f"{FORMAT_VERSION}")
    if len(blob) < 12 + header_len:
        raise CheckpointError(f"truncated header in {path}")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header in {path}: {exc}") from exc

    payload = blob[12 + header_len:]
    tensors = {}
    expected_end = 0
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if offset + nbytes > len(payload):
            raise CheckpointError(
                f"payload length mismatch for tensor '{name}' in {path}")
        tensors[name] = np.frombuffer(
            payload, dtype="<f4", count=nbytes // 4, offset=offset
        ).reshape(shape).copy()
        expected_end = max(expected_end, offset + nbytes)
    if expected_end != len(payload):
        raise CheckpointError(
            f"payload length mismatch: {len(payload) - expected_end} trailing bytes")
    stats = header.get("radiomics_stats", {})
    return Checkpoint(phase=header["phase"], config=header["config"],
                      radiomics_mean=list(stats.get("mean", [])),
                      radiomics_std=list(stats.get("std", [])),
                      tensors=tensors, version=version)
