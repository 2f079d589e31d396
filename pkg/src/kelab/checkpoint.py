"""Self-describing binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"KELABCKP" | version | header_len | header JSON (utf-8)
    | float32 LE data for each declared block, in header order
    | crc32 of all preceding bytes | b"KEND"

The header holds ``config`` (a ModelConfig dict), ``blocks`` (a list of
``{"name", "shape"}``) and free-form ``meta``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections.abc import Mapping
from pathlib import Path

import numpy as np
import torch

from .errors import (
    CheckpointCorruptError,
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from .model import FORMAT_VERSION, ModelConfig, ModelState, param_shapes

MAGIC = b"KELABCKP"
END = b"KEND"


def write_container(path: str | Path, config: Mapping, blocks: Mapping[str, np.ndarray], meta: Mapping | None = None,
                    version: int = FORMAT_VERSION) -> None:
    """Low-level writer; ``blocks`` need not agree with ``config``."""
    arrays = {name: np.ascontiguousarray(np.asarray(a, dtype="<f4")) for name, a in blocks.items()}
    header = {
        "config": dict(config),
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "meta": dict(meta or {}),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", version, len(head))
    body += head
    for a in arrays.values():
        body += a.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    body += END
    atomic_write_bytes(path, bytes(body))


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(model: ModelState, path: str | Path, meta: Mapping | None = None) -> None:
    blocks = {name: t.detach().to(torch.float32).cpu().numpy() for name, t in model.params.items()}
    write_container(path, model.config.to_dict(), blocks, meta=meta, version=model.version)


def read_header(path: str | Path) -> dict:
    header, _, _ = _parse(Path(path).read_bytes())
    return header


def _parse(raw: bytes) -> tuple[dict, int, int]:
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointTruncatedError("file too short to hold a checkpoint header")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack_from("<II", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    start = len(MAGIC) + 8
    if len(raw) < start + head_len:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable header: {exc}") from exc
    return header, version, start + head_len


def load_checkpoint(path: str | Path) -> ModelState:
    raw = Path(path).read_bytes()
    header, version, offset = _parse(raw)
    declared = header.get("blocks", [])
    n_floats = sum(int(np.prod(b["shape"])) for b in declared)
    expected_len = offset + 4 * n_floats + 4 + len(END)
    if len(raw) != expected_len or raw[-len(END):] != END:
        raise CheckpointTruncatedError(
            f"checkpoint is {len(raw)} bytes with end marker {raw[-len(END):]!r}; expected {expected_len} bytes ending in {END!r}"
        )
    (crc,) = struct.unpack_from("<I", raw, expected_len - len(END) - 4)
    if zlib.crc32(raw[: expected_len - len(END) - 4]) & 0xFFFFFFFF != crc:
        raise CheckpointCorruptError("checksum mismatch")

    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointShapeError(f"header config invalid: {exc}") from exc
    expected = param_shapes(cfg)
    declared_shapes = {b["name"]: tuple(b["shape"]) for b in declared}
    for name, shape in expected.items():
        if name not in declared_shapes:
            raise CheckpointShapeError(f"missing block {name!r} required by header config", block=name)
        if declared_shapes[name] != shape:
            raise CheckpointShapeError(f"block {name!r} has shape {declared_shapes[name]}, config requires {shape}", block=name)
    extra = [n for n in declared_shapes if n not in expected]
    if extra:
        raise CheckpointShapeError(f"unexpected block {extra[0]!r}", block=extra[0])

    params = {}
    pos = offset
    for b in declared:
        count = int(np.prod(b["shape"]))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(b["shape"])
        params[b["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    return ModelState(cfg, params, version)
