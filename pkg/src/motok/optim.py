"""AdamW, learning-rate schedules, and the checkpoint format."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter


class OptimError(ValueError):
    pass


@dataclass
class AdamWConfig:
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.0


class AdamW:
    """Decoupled weight decay; frozen (non-trainable) parameters untouched."""

    def __init__(self, params: dict[str, Parameter], config: AdamWConfig):
        self.params = dict(params)
        self.config = config
        self.step_count = 0
        self._m = {n: np.zeros(p.shape) for n, p in self.params.items()}
        self._v = {n: np.zeros(p.shape) for n, p in self.params.items()}

    def step(self, lr: float | None = None):
        lr = self.config.lr if lr is None else lr
        b1, b2 = self.config.betas
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if not p.trainable:
                continue
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise OptimError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.config.eps)
                            + self.config.weight_decay * p.data)


@dataclass(frozen=True)
class WarmupCosineConfig:
    warmup: int = 500
    total: int = 10_000
    peak: float = 2e-4
    floor: float = 1e-5

    def __post_init__(self):
        if self.warmup >= self.total:
            raise OptimError(f"warmup ({self.warmup}) must be < total ({self.total})")


def lr_schedule(step: int, config: WarmupCosineConfig) -> float:
    """Linear ramp to ``peak`` over ``warmup`` steps, cosine decay to
    ``floor`` at ``total``; constant at the floor afterwards."""
    if step < 0:
        raise OptimError("step must be >= 0")
    if step < config.warmup:
        return config.peak * step / config.warmup
    if step >= config.total:
        return config.floor
    frac = (step - config.warmup) / (config.total - config.warmup)
    return config.floor + (config.peak - config.floor) * 0.5 * (1 + np.cos(np.pi * frac))


def multistep_lr(base_lr: float, epoch: int, milestones: tuple[int, ...],
                 gamma: float = 0.3) -> float:
    """Step decay: multiply by ``gamma`` at each milestone epoch."""
    hits = sum(1 for m in milestones if epoch >= m)
    return base_lr * gamma ** hits


# ---------------------------------------------------------------------------
# checkpoint format: text header, then a contiguous little-endian float64
# block holding the parameters in header order.
#
# CKPT v1
# step <int>
# meta <one-line json>
# param <name> <ndim> <dims...>
# ...
# DATA
# <binary>
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: dict[str, Parameter], meta: dict,
                    step: int = 0) -> None:
    lines = [b"CKPT v1", f"step {step}".encode(),
             ("meta " + json.dumps(meta, sort_keys=True)).encode()]
    names = sorted(params)
    for name in names:
        p = params[name]
        dims = " ".join(str(d) for d in p.shape)
        lines.append(f"param {name} {p.data.ndim} {dims}".strip().encode())
    lines.append(b"DATA")
    blob = b"".join(params[n].data.astype("<f8").tobytes() for n in names)
    with open(path, "wb") as fh:
        fh.write(b"\n".join(lines) + b"\n" + blob)


def load_checkpoint(path):
    """Returns (arrays: dict[str, np.ndarray], meta: dict, step: int)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, rest = raw.partition(b"\nDATA\n")
    if not sep:
        raise CheckpointError(f"{path}: missing DATA section")
    lines = head.decode().splitlines()
    if not lines or lines[0] != "CKPT v1":
        raise CheckpointError(f"{path}: bad magic")
    try:
        step = int(lines[1].split()[1])
        meta = json.loads(lines[2].split(" ", 1)[1])
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    shapes = []
    for line in lines[3:]:
        parts = line.split()
        if parts[0] != "param":
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
        name, ndim = parts[1], int(parts[2])
        dims = tuple(int(d) for d in parts[3 : 3 + ndim])
        if len(dims) != ndim:
            raise CheckpointError(f"{path}: bad shape for {name}")
        shapes.append((name, dims))
    expected = sum(int(np.prod(d)) if d else 1 for _, d in shapes) * 8
    if len(rest) != expected:
        raise CheckpointError(
            f"{path}: binary block is {len(rest)} bytes, manifest needs {expected}")
    arrays = {}
    offset = 0
    for name, dims in shapes:
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(
            rest, dtype="<f8", count=count, offset=offset).reshape(dims).copy()
        offset += count * 8
    return arrays, meta, step


def restore_parameters(params: dict[str, Parameter], arrays: dict[str, np.ndarray]):
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise CheckpointError(f"parameter name mismatch: {sorted(missing)}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {p.shape} vs {arrays[name].shape}")
        p.data = arrays[name].astype(np.float64)
