"""Condition feature files: plain text, one matrix per file.

Format::

    FEATURES v1
    modality <text|audio|traj>
    width <int>
    rows <int>
    <rows lines of width numbers>
"""

from __future__ import annotations

import numpy as np

MODALITIES = ("text", "audio", "traj")

_FMT = "%.17g"


class FeatureFileError(ValueError):
    pass


def write_features(matrix: np.ndarray, modality: str, path) -> None:
    if modality not in MODALITIES:
        raise FeatureFileError(f"unknown modality {modality!r}")
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    lines = [
        "FEATURES v1",
        f"modality {modality}",
        f"width {matrix.shape[1]}",
        f"rows {matrix.shape[0]}",
    ]
    for row in matrix:
        lines.append(" ".join(_FMT % v for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_features(path, modality: str | None = None,
                  expected_width: int | None = None) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "FEATURES v1":
        raise FeatureFileError(f"{path}: bad magic")
    try:
        tag = lines[1].split()[1]
        width = int(lines[2].split()[1])
        rows = int(lines[3].split()[1])
    except (IndexError, ValueError) as exc:
        raise FeatureFileError(f"{path}: malformed header: {exc}") from exc
    if modality is not None and tag != modality:
        raise FeatureFileError(f"{path}: modality {tag!r}, expected {modality!r}")
    if expected_width is not None and width != expected_width:
        raise FeatureFileError(f"{path}: width {width}, expected {expected_width}")
    if len(lines) < 4 + rows:
        raise FeatureFileError(f"{path}: expected {rows} rows")
    out = np.empty((rows, width))
    for i in range(rows):
        parts = lines[4 + i].split()
        if len(parts) != width:
            raise FeatureFileError(f"{path}: line {5 + i}: expected {width} fields")
        out[i] = [float(p) for p in parts]
    if not np.all(np.isfinite(out)):
        raise FeatureFileError(f"{path}: non-finite values")
    return out
