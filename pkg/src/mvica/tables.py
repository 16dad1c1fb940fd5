"""Seeded CSV tables: a ``# seed=`` comment line, a header row, then data.

Floats are written with 17 significant digits so a write/read cycle is
bit-exact.
"""
from __future__ import annotations

import csv
import io
import os
from typing import Iterable, Sequence

import numpy as np


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], seed) -> str:
    buf = io.StringIO()
    buf.write(f"# seed={seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return str(path)


def read_table(path):
    """Return ``(seed, header, rows)`` with rows as lists of strings."""
    seed = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key.strip() == "seed":
                seed = val.strip()
            continue
        body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    return seed, header, [row for row in reader]


def write_matrix(path, matrix: np.ndarray, seed, prefix: str = "c") -> str:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    header = ["row"] + [f"{prefix}{j}" for j in range(matrix.shape[1])]
    rows = ([i, *r] for i, r in enumerate(matrix))
    return write_table(path, header, rows, seed)


def read_matrix(path) -> tuple[str | None, np.ndarray]:
    seed, header, rows = read_table(path)
    if not header or header[0] != "row":
        raise ValueError(f"{path}: expected a leading 'row' column, got {header[:1]}")
    data = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float)
    if data.size == 0:
        data = data.reshape(0, len(header) - 1)
    return seed, data
