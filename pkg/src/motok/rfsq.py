"""Finite scalar quantization and its residual stack.

The forward map per dimension is ``k_i = round(sigmoid(z_i) * (L_i - 1))``
with round-half-away-from-zero (the operand is nonnegative, so this is
``floor(x + 0.5)``, bit-stable across platforms).  The latent-space
representative of a code is ``logit(clamp(k_i / (L_i - 1), eps, 1 - eps))``,
which makes quantize(dequantize(k)) == k for every grid code.

The residual stack applies the same quantizer to the running residual and
reconstructs by summing the per-stage representatives.  Everything here is
pure and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RfsqError(ValueError):
    pass


@dataclass(frozen=True)
class FsqSpec:
    levels: tuple[int, ...] = (8, 8, 8, 4)
    bounding: str = "sigmoid"
    clamp_eps: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))
        if not self.levels or any(l < 2 for l in self.levels):
            raise RfsqError(f"every level count must be >= 2, got {self.levels}")
        if self.bounding != "sigmoid":
            raise RfsqError(f"unsupported bounding function {self.bounding!r}")
        if not (0 < self.clamp_eps < 0.5):
            raise RfsqError("clamp_eps must lie in (0, 0.5)")
        if self.codebook_size > np.iinfo(np.int64).max:
            raise RfsqError("codebook size overflows the index type")

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        out = 1
        for l in self.levels:
            out *= l
        return out


@dataclass(frozen=True)
class RfsqSpec:
    base: FsqSpec = FsqSpec()
    depth: int = 4  # number of residual stages, V + 1

    def __post_init__(self):
        if self.depth < 1:
            raise RfsqError(f"depth must be >= 1, got {self.depth}")

    @property
    def codebook_size(self) -> int:
        return self.base.codebook_size


@dataclass(frozen=True)
class TokenGrid:
    codes: np.ndarray  # (depth, t) int64
    spec: RfsqSpec

    def __post_init__(self):
        arr = np.asarray(self.codes, dtype=np.int64)
        if arr.ndim != 2:
            raise RfsqError(f"codes must be 2-D (streams, t), got shape {arr.shape}")
        if arr.shape[0] != self.spec.depth:
            raise RfsqError(
                f"token grid has {arr.shape[0]} streams, spec depth is {self.spec.depth}")
        size = self.spec.codebook_size
        if arr.size and (arr.min() < 0 or arr.max() >= size):
            raise RfsqError(f"codes out of range [0, {size})")
        object.__setattr__(self, "codes", arr)
        arr.setflags(write=False)

    @property
    def length(self) -> int:
        return self.codes.shape[1]


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _check_finite(z):
    if not np.all(np.isfinite(z)):
        raise RfsqError("latent contains non-finite values")


def fsq_quantize(z: np.ndarray, spec: FsqSpec) -> np.ndarray:
    """Per-dimension grid coordinates of ``z`` (trailing axis = dim)."""
    z = np.asarray(z, dtype=np.float64)
    _check_finite(z)
    if z.shape[-1] != spec.dim:
        raise RfsqError(f"latent width {z.shape[-1]} != spec dim {spec.dim}")
    levels = np.array(spec.levels)
    scaled = _sigmoid(z) * (levels - 1)
    # round half away from zero; operand is >= 0
    return np.floor(scaled + 0.5).astype(np.int64)


def fsq_dequantize(codes: np.ndarray, spec: FsqSpec) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[-1] != spec.dim:
        raise RfsqError(f"code width {codes.shape[-1]} != spec dim {spec.dim}")
    levels = np.array(spec.levels)
    if codes.size and (codes.min() < 0 or np.any(codes >= levels)):
        raise RfsqError("code coordinates out of range")
    p = np.clip(codes / (levels - 1), spec.clamp_eps, 1.0 - spec.clamp_eps)
    return _logit(p)


def flatten_code(coords: np.ndarray, spec: FsqSpec) -> np.ndarray:
    """Mixed-radix flattening, dimension 0 least significant."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.shape[-1] != spec.dim:
        raise RfsqError("coordinate width mismatch")
    levels = np.array(spec.levels)
    if coords.size and (coords.min() < 0 or np.any(coords >= levels)):
        raise RfsqError("coordinates out of range")
    radix = np.concatenate([[1], np.cumprod(levels[:-1])])
    return np.sum(coords * radix, axis=-1)


def unflatten_code(index: np.ndarray, spec: FsqSpec) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= spec.codebook_size):
        raise RfsqError(f"index out of range [0, {spec.codebook_size})")
    out = np.empty(index.shape + (spec.dim,), dtype=np.int64)
    rem = index
    for i, l in enumerate(spec.levels):
        out[..., i] = rem % l
        rem = rem // l
    return out


def rfsq_encode(z: np.ndarray, spec: RfsqSpec) -> TokenGrid:
    """Residual encode a (t, d) latent into a (depth, t) token grid."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise RfsqError(f"latent must be (t, d), got shape {z.shape}")
    if z.shape[1] != spec.base.dim:
        raise RfsqError(f"latent width {z.shape[1]} != spec dim {spec.base.dim}")
    _check_finite(z)
    residual = z.copy()
    streams = []
    for _ in range(spec.depth):
        coords = fsq_quantize(residual, spec.base)
        streams.append(flatten_code(coords, spec.base))
        residual -= fsq_dequantize(coords, spec.base)
    return TokenGrid(codes=np.stack(streams), spec=spec)


def rfsq_decode(tokens: TokenGrid, spec: RfsqSpec | None = None) -> np.ndarray:
    """Sum of per-stage representatives, shape (t, d)."""
    spec = spec or tokens.spec
    if spec != tokens.spec:
        raise RfsqError("token grid spec does not match the requested spec")
    out = np.zeros((tokens.length, spec.base.dim))
    for stream in tokens.codes:
        out += fsq_dequantize(unflatten_code(stream, spec.base), spec.base)
    return out


def rfsq_reconstruct(z: np.ndarray, spec: RfsqSpec) -> np.ndarray:
    return rfsq_decode(rfsq_encode(z, spec))


# ---------------------------------------------------------------------------
# token files
#
# TOKENS v1
# levels <L0> <L1> ...
# depth <V+1>
# frames <t>
# <depth lines of t integers>
# ---------------------------------------------------------------------------

def write_tokens(tokens: TokenGrid, path) -> None:
    spec = tokens.spec
    lines = [
        "TOKENS v1",
        "levels " + " ".join(str(l) for l in spec.base.levels),
        f"depth {spec.depth}",
        f"frames {tokens.length}",
    ]
    for stream in tokens.codes:
        lines.append(" ".join(str(c) for c in stream))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tokens(path, expected_spec: RfsqSpec | None = None) -> TokenGrid:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "TOKENS v1":
        raise RfsqError(f"{path}: bad magic")
    try:
        levels = tuple(int(v) for v in lines[1].split()[1:])
        depth = int(lines[2].split()[1])
        frames = int(lines[3].split()[1])
    except (IndexError, ValueError) as exc:
        raise RfsqError(f"{path}: malformed header: {exc}") from exc
    spec = RfsqSpec(base=FsqSpec(levels=levels), depth=depth)
    if expected_spec is not None and (
            spec.base.levels != expected_spec.base.levels
            or spec.depth != expected_spec.depth):
        raise RfsqError(
            f"{path}: token spec (levels={levels}, depth={depth}) does not match "
            f"expected (levels={expected_spec.base.levels}, depth={expected_spec.depth})")
    if len(lines) < 4 + depth:
        raise RfsqError(f"{path}: expected {depth} code rows")
    codes = np.empty((depth, frames), dtype=np.int64)
    for v in range(depth):
        parts = lines[4 + v].split()
        if len(parts) != frames:
            raise RfsqError(f"{path}: stream {v}: expected {frames} codes")
        codes[v] = [int(p) for p in parts]
    return TokenGrid(codes=codes, spec=expected_spec or spec)
