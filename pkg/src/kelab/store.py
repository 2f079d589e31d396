"""Atomic file output, line-delimited records and provenance stamps."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def jsonable(obj):
    """Replace non-finite floats with None and tuples with lists, recursively."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, Mapping):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def dumps_record(record: Mapping) -> str:
    return json.dumps(jsonable(record), sort_keys=True, ensure_ascii=False, allow_nan=False)


def write_jsonl(path: str | Path, records: Iterable[Mapping], meta: Mapping | None = None) -> None:
    lines = []
    if meta is not None:
        lines.append(dumps_record({"_meta": dict(meta)}))
    lines.extend(dumps_record(r) for r in records)
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: str | Path, skip_meta: bool = True) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if skip_meta and "_meta" in rec:
            continue
        out.append(rec)
    return out


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence], meta: Mapping | None = None) -> None:
    buf = io.StringIO()
    if meta is not None:
        buf.write("# " + dumps_record(meta) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str | Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}" if math.isfinite(value) else ""
    return "" if value is None else str(value)


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
