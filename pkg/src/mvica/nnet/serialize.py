"""Parameter snapshots: one JSON header line, then one value per line.

Values are written with 17 significant digits, so a load reproduces the
vector bit for bit.
"""
from __future__ import annotations

import json

import numpy as np

FORMAT = "mvica-params"
VERSION = 1


def dumps(theta, header) -> str:
    head = dict(header)
    head.update(format=FORMAT, version=VERSION, size=int(len(theta)))
    lines = [json.dumps(head, sort_keys=True)]
    lines.extend(format(float(v), ".17g") for v in np.asarray(theta, dtype=float))
    return "\n".join(lines) + "\n"


def loads(text):
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty parameter snapshot")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT:
        raise ValueError(f"not a parameter snapshot (format={header.get('format')!r})")
    if header.get("version") != VERSION:
        raise ValueError(f"unsupported snapshot version {header.get('version')}")
    theta = np.array([float(v) for v in lines[1:] if v.strip()], dtype=float)
    if theta.size != header["size"]:
        raise ValueError(f"snapshot declares {header['size']} values, found {theta.size}")
    return header, theta


def save(path, theta, header):
    with open(path, "w") as fh:
        fh.write(dumps(theta, header))


def load(path):
    with open(path) as fh:
        return loads(fh.read())
