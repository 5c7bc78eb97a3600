"""Named-tensor archive format and checkpoint loading.

Layout (all integers little-endian)::

    magic   8 bytes  b"SSDCATNS"
    version u8       1
    count   u64      number of records
    record  * count:
        name_len u32, name UTF-8 bytes
        dtype    u8 length + ASCII tag ("f32" or "f64")
        rank     u8
        shape    rank * u64
        payload  row-major little-endian values

FORMATS.md documents the same layout together with the tensor name table.
"""

from __future__ import annotations

import hashlib
import io
import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)

MAGIC = b"SSDCATNS"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class ArchiveFormatError(ValueError):
    """Archive is truncated, has a bad header or an unknown dtype."""


class CheckpointMismatchError(ValueError):
    """Archive contents do not match the model's tensor table."""

    def __init__(self, message: str, missing=(), unexpected=(), mismatched=()):
        super().__init__(message)
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        self.mismatched = list(mismatched)


def _tag_for(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f64"
    return "f32"


def write_archive(tensors: Mapping[str, torch.Tensor | np.ndarray], fh: BinaryIO | str | Path) -> None:
    """Serialize ``name -> tensor`` in insertion order."""
    if isinstance(fh, (str, Path)):
        with open(fh, "wb") as f:
            write_archive(tensors, f)
        return
    fh.write(MAGIC)
    fh.write(struct.pack("<BQ", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        tag = _tag_for(arr)
        arr = np.asarray(arr, dtype=_DTYPES[tag], order="C")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)) + raw)
        fh.write(struct.pack("<B", len(tag)) + tag.encode("ascii"))
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ArchiveFormatError(f"truncated archive while reading {what}")
    return buf


def read_archive(fh: BinaryIO | str | Path | bytes) -> dict[str, np.ndarray]:
    if isinstance(fh, bytes):
        return read_archive(io.BytesIO(fh))
    if isinstance(fh, (str, Path)):
        with open(fh, "rb") as f:
            return read_archive(f)
    if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
        raise ArchiveFormatError("not a tensor archive (bad magic)")
    version, count = struct.unpack("<BQ", _read_exact(fh, 9, "header"))
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4, f"record {i} name length"))
        name = _read_exact(fh, name_len, f"record {i} name").decode("utf-8")
        (tag_len,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} dtype"))
        tag = _read_exact(fh, tag_len, f"{name} dtype").decode("ascii")
        if tag not in _DTYPES:
            raise ArchiveFormatError(f"tensor {name}: unknown dtype tag {tag!r}")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"{name} rank"))
        shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"{name} shape"))
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = _read_exact(fh, n * dt.itemsize, f"{name} payload")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    if fh.read(1):
        raise ArchiveFormatError("trailing bytes after last record")
    return out


@dataclass
class LoadReport:
    loaded: list[str] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)
    unexpected: list[str] = field(default_factory=list)


def load_checkpoint(
    archive: str | Path | bytes | Mapping[str, np.ndarray],
    module: nn.Module,
    prefix: str = "",
    strict: bool = True,
) -> LoadReport:
    """Place every archived tensor into ``module``'s parameters in place.

    ``prefix`` selects a sub-tree of the archive (e.g. ``"encoder."``).
    Shape mismatches always raise; missing names raise when ``strict``.
    Unexpected names are reported and logged, never silently dropped.
    """
    tensors = archive if isinstance(archive, Mapping) else read_archive(archive)
    if prefix:
        tensors = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    state = module.state_dict()
    report = LoadReport()
    report.missing = [k for k in state if k not in tensors]
    report.unexpected = [k for k in tensors if k not in state]
    mismatched = [
        (k, tuple(state[k].shape), tuple(tensors[k].shape))
        for k in state
        if k in tensors and tuple(state[k].shape) != tuple(tensors[k].shape)
    ]
    if mismatched:
        detail = "; ".join(f"{k}: expected {e}, found {f}" for k, e, f in mismatched)
        raise CheckpointMismatchError(f"shape mismatch: {detail}", mismatched=mismatched)
    if strict and report.missing:
        raise CheckpointMismatchError(
            f"missing tensors: {', '.join(report.missing)}", missing=report.missing, unexpected=report.unexpected
        )
    if report.unexpected:
        log.warning("ignoring %d unexpected tensors: %s", len(report.unexpected), ", ".join(report.unexpected))
    with torch.no_grad():
        for k, target in state.items():
            if k in tensors:
                target.copy_(torch.from_numpy(np.asarray(tensors[k])).to(target.dtype))
                report.loaded.append(k)
    return report


def save_checkpoint(module: nn.Module, path: str | Path | BinaryIO, extra: Mapping[str, torch.Tensor] | None = None):
    tensors = dict(module.state_dict())
    if extra:
        tensors.update(extra)
    write_archive(tensors, path)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# Rename rules from public Swin-S checkpoints to this encoder's names.
# The original Microsoft release ("swin_small_patch4_window7_224.pth",
# tensors under "model") already matches this layout; only buffers and the
# 1000-class ImageNet head are dropped. timm >= 0.9 moves patch merging to
# the start of the following stage, which the explicit rules below undo.
PUBLIC_SWIN_DROP: list[str] = [
    r"\.attn_mask$",
    r"\.relative_position_index$",
    r"^head\.",
]
TIMM_SWIN_RENAMES: list[tuple[str, str]] = [
    (r"^layers\.1\.downsample\.", "layers.0.downsample."),
    (r"^layers\.2\.downsample\.", "layers.1.downsample."),
    (r"^layers\.3\.downsample\.", "layers.2.downsample."),
]


def translate_public_names(
    tensors: Mapping[str, np.ndarray], layout: str = "microsoft", prefix: str = "encoder."
) -> dict[str, np.ndarray]:
    """Rename a public Swin state dict into this repo's archive names."""
    if layout not in ("microsoft", "timm"):
        raise ValueError(f"unknown layout {layout!r}")
    rules = TIMM_SWIN_RENAMES if layout == "timm" else []
    out = {}
    for name, value in tensors.items():
        if any(re.search(p, name) for p in PUBLIC_SWIN_DROP):
            continue
        for pat, rep in rules:
            name = re.sub(pat, rep, name)
        out[prefix + name] = value
    return out
