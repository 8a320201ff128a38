"""
File and randomness utilities shared across the pipeline.
"""

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Sequence

import numpy as np

from utils.errors import StorageError


def ensure_dir(path: Path) -> Path:
    """Create a directory and its parents; OS failures become StorageError."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"Cannot create directory {path}: {exc}", details={"path": str(path)}) from exc
    return path


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write bytes to path through a temp file in the same directory, then rename."""
    path = Path(path)
    ensure_dir(path.parent)
    try:
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise StorageError(f"Cannot write {path}: {exc}", details={"path": str(path)}) from exc
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except OSError as exc:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise StorageError(f"Cannot write {path}: {exc}", details={"path": str(path)}) from exc
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    """Write UTF-8 text atomically."""
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, data: Any) -> None:
    """Write JSON with stable formatting so reruns are byte-identical."""
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write a CSV file atomically. Floats are rendered with 9 significant digits."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(value) for value in row])
    atomic_write_text(path, buffer.getvalue())


def format_cell(value: Any) -> str:
    """Render a CSV cell deterministically."""
    if isinstance(value, (float, np.floating)):
        if np.isnan(value):
            return ""
        return f"{float(value):.9g}"
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def read_csv_rows(path: Path) -> List[List[str]]:
    """Read all rows of a CSV file, header included."""
    with open(path, newline="") as handle:
        return [row for row in csv.reader(handle)]


def sha256_file(path: Path) -> str:
    """Hex SHA-256 of a file's contents."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(data: Any) -> str:
    """Hex SHA-256 of a JSON-serialisable value in canonical form."""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, keys...), stable regardless of call order."""
    return np.random.default_rng([int(seed) % (2**63), *[int(k) for k in keys]])
