"""Plain-text particle snapshots.

Layout: one header line ``N d round protocol`` followed by ``N`` rows of
``d`` whitespace-separated floats written with 17 significant digits,
which round-trips every float64 exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..kernels import as_particles


@dataclass
class Snapshot:
    particles: np.ndarray
    round_index: int
    protocol: str


def format_float(value: float) -> str:
    return "%.17g" % value


def export_snapshot(path, particles, round_index: int, protocol: str) -> Path:
    particles = as_particles(particles)
    if not protocol or any(c.isspace() for c in protocol):
        raise ValueError(f"protocol tag must be a single token, got {protocol!r}")
    n, d = particles.shape
    lines = [f"{n} {d} {int(round_index)} {protocol}"]
    lines.extend(" ".join(format_float(v) for v in row) for row in particles)
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def import_snapshot(path) -> Snapshot:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty snapshot")
    head = text[0].split()
    if len(head) != 4:
        raise ValueError(f"{path}:1: header must be 'N d round protocol'")
    try:
        n, d, round_index = int(head[0]), int(head[1]), int(head[2])
    except ValueError:
        raise ValueError(f"{path}:1: bad header {text[0]!r}") from None
    rows = [line for line in text[1:] if line.strip()]
    if len(rows) != n:
        raise ValueError(f"{path}: header says {n} particles, found {len(rows)}")
    out = np.empty((n, d), dtype=np.float64)
    for i, line in enumerate(rows):
        parts = line.split()
        if len(parts) != d:
            raise ValueError(f"{path}:{i + 2}: expected {d} values, got {len(parts)}")
        out[i] = [float(p) for p in parts]
    return Snapshot(out, round_index, head[3])
