"""Versioned artifact files: atomic writes, JSON-lines traces, CSV logs.

Every file starts with a versioned header; readers reject unknown formats
or versions loudly instead of guessing. Writes go through a temp file in
the target directory followed by an atomic rename.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

from kvlab.errors import InvariantError, MissingArtifactError

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "atomic_write_bytes",
    "atomic_write_text",
    "read_bytes",
    "write_jsonl",
    "read_jsonl",
    "write_csv",
    "read_csv",
]


def atomic_write_bytes(path: str, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise MissingArtifactError(f"artifact not found: {path}")
    with open(path, "rb") as f:
        return f.read()


# -- JSON-lines traces -------------------------------------------------------

def write_jsonl(path: str, kind: str, meta: dict, records) -> int:
    """Write a header line then one JSON object per record; returns record count."""
    buf = io.StringIO()
    header = {"format": kind, "version": FORMAT_VERSION}
    header.update(meta)
    buf.write(json.dumps(header, sort_keys=True) + "\n")
    count = 0
    for rec in records:
        buf.write(json.dumps(rec, sort_keys=True) + "\n")
        count += 1
    atomic_write_text(path, buf.getvalue())
    return count


def read_jsonl(path: str, kind: str):
    """Return (header meta, records). Unknown kind or version is an error."""
    raw = read_bytes(path).decode("utf-8")
    lines = raw.splitlines()
    if not lines:
        raise InvariantError(f"empty artifact: {path}")
    header = json.loads(lines[0])
    if header.get("format") != kind:
        raise InvariantError(
            f"{path}: expected format {kind!r}, found {header.get('format')!r}"
        )
    if header.get("version") != FORMAT_VERSION:
        raise InvariantError(
            f"{path}: unsupported version {header.get('version')!r}"
        )
    records = [json.loads(line) for line in lines[1:] if line]
    return header, records


# -- CSV logs ----------------------------------------------------------------

def write_csv(path: str, fieldnames, rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str):
    raw = read_bytes(path).decode("utf-8")
    return list(csv.DictReader(io.StringIO(raw)))
