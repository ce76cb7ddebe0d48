"""CSV / JSON-lines helpers shared by the file schemas."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FLOAT_FMT = "%.17g"


class SchemaError(ValueError):
    """Input file does not match the expected schema."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_rows(columns: Sequence[str], data: np.ndarray) -> str:
    data = np.asarray(data, dtype=float).reshape(-1, len(columns))
    lines = [",".join(columns)]
    lines.extend(",".join(FLOAT_FMT % x for x in row) for row in data)
    return "\n".join(lines) + "\n"


def write_csv(path, columns: Sequence[str], data: np.ndarray) -> None:
    atomic_write_text(path, format_rows(columns, data))


def read_csv(path, columns: Sequence[str] | None = None, required: Sequence[str] | None = None,
             with_lines: bool = False):
    """Read a numeric CSV with a header line.

    With ``columns`` the header must match exactly and an ``(N, len(columns))``
    array is returned. With ``required`` only those columns must be present
    and a ``dict`` of column arrays is returned. ``with_lines`` additionally
    returns the 1-based source line of every row.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    with path.open() as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].strip():
        if columns is not None:
            empty = np.zeros((0, len(columns)))
            return (empty, []) if with_lines else empty
        raise SchemaError(f"{path}: missing header")
    header = [h.strip() for h in lines[0].split(",")]
    if columns is not None and header != list(columns):
        raise SchemaError(f"{path}:1: expected header {','.join(columns)!r}, got {lines[0]!r}")
    if required is not None:
        missing = [c for c in required if c not in header]
        if missing:
            raise SchemaError(f"{path}:1: missing columns {missing}")
    rows = []
    linenos = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        try:
            row = [float(x) for x in fields]
        except ValueError:
            raise SchemaError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if not all(np.isfinite(row)):
            raise SchemaError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
        linenos.append(lineno)
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    out = data if columns is not None else {name: data[:, i] for i, name in enumerate(header)}
    return (out, linenos) if with_lines else out


def format_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def read_jsonl(path) -> list[dict]:
    out = []
    with Path(path).open() as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc.msg}") from None
    return out
