"""Core motion types: skeleton, sequences, world-space joints, and file I/O.

A motion sequence stores the root transform (translation + unit quaternion)
and joint positions expressed in the root frame.  The per-frame feature
vector is ``[local joints (3J), root translation (3), root quaternion (4)]``,
so its width is always ``D = 3J + 7``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-6


class MotionError(ValueError):
    """Invalid motion data or malformed motion file."""


def default_joint_names(joint_count: int) -> list[str]:
    return [f"j{i:02d}" for i in range(joint_count)]


def default_parents(joint_count: int) -> list[int]:
    # simple tree: five chains hanging off the root, round-robin
    parents = [-1]
    for i in range(1, joint_count):
        parents.append(0 if i <= 5 else i - 5)
    return parents


@dataclass(frozen=True)
class SkeletonSpec:
    joint_count: int = 22
    joint_names: tuple[str, ...] = ()
    parent_index: tuple[int, ...] = ()

    def __post_init__(self):
        if self.joint_count < 2:
            raise MotionError(f"joint_count must be >= 2, got {self.joint_count}")
        names = self.joint_names or tuple(default_joint_names(self.joint_count))
        parents = self.parent_index or tuple(default_parents(self.joint_count))
        object.__setattr__(self, "joint_names", tuple(names))
        object.__setattr__(self, "parent_index", tuple(parents))
        if len(self.joint_names) != self.joint_count:
            raise MotionError("joint_names length mismatch")
        if len(self.parent_index) != self.joint_count:
            raise MotionError("parent_index length mismatch")
        self._check_tree()

    def _check_tree(self):
        if self.parent_index[0] != -1:
            raise MotionError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(self.parent_index[1:], start=1):
            if not (0 <= p < j):
                raise MotionError(
                    f"parent of joint {j} must precede it in the hierarchy, got {p}"
                )

    @property
    def feature_width(self) -> int:
        return 3 * self.joint_count + 7


def _as_float(a, shape, name) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != shape:
        raise MotionError(f"{name} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise MotionError(f"{name} contains non-finite values")
    return arr


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors by unit quaternions (w, x, y, z).

    ``q`` broadcasts against ``v`` over leading axes; ``v`` has a trailing
    axis of 3.
    """
    w, x, y, z = q[..., 0:1], q[..., 1:2], q[..., 2:3], q[..., 3:4]
    u = np.concatenate([x, y, z], axis=-1)
    uv = np.cross(u, v)
    uuv = np.cross(u, uv)
    return v + 2.0 * (w * uv + uuv)


def quat_from_yaw(yaw: np.ndarray) -> np.ndarray:
    """Unit quaternion for rotation about the +z axis by ``yaw`` radians."""
    half = np.asarray(yaw, dtype=np.float64) / 2.0
    out = np.zeros(half.shape + (4,))
    out[..., 0] = np.cos(half)
    out[..., 3] = np.sin(half)
    return out


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def normalize_quat(q: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    norm = np.where(norm < 1e-12, 1.0, norm)
    out = q / norm
    # degenerate rows fall back to identity
    bad = np.linalg.norm(q, axis=-1) < 1e-12
    if np.any(bad):
        out = out.copy()
        out[bad] = np.array([1.0, 0.0, 0.0, 0.0])
    return out


@dataclass(frozen=True)
class MotionSequence:
    fps: float
    root_translation: np.ndarray  # (T, 3) meters
    root_rotation: np.ndarray  # (T, 4) unit quaternions (w, x, y, z)
    local_joints: np.ndarray  # (T, J, 3) meters, root frame
    skeleton: SkeletonSpec = field(default_factory=SkeletonSpec)

    def __post_init__(self):
        T = np.asarray(self.root_translation).shape[0]
        if T < 1:
            raise MotionError("motion must have at least one frame")
        J = self.skeleton.joint_count
        object.__setattr__(
            self, "root_translation",
            _as_float(self.root_translation, (T, 3), "root_translation"))
        object.__setattr__(
            self, "root_rotation",
            _as_float(self.root_rotation, (T, 4), "root_rotation"))
        object.__setattr__(
            self, "local_joints",
            _as_float(self.local_joints, (T, J, 3), "local_joints"))
        norms = np.linalg.norm(self.root_rotation, axis=-1)
        if np.any(np.abs(norms - 1.0) > QUAT_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise MotionError(f"root_rotation not unit-norm (max deviation {worst:.3g})")
        if self.fps <= 0:
            raise MotionError(f"fps must be positive, got {self.fps}")
        self.root_translation.setflags(write=False)
        self.root_rotation.setflags(write=False)
        self.local_joints.setflags(write=False)

    @property
    def frame_count(self) -> int:
        return self.root_translation.shape[0]

    @property
    def feature_width(self) -> int:
        return self.skeleton.feature_width

    def features(self) -> np.ndarray:
        """Per-frame feature matrix of shape (T, 3J + 7)."""
        T = self.frame_count
        return np.concatenate(
            [self.local_joints.reshape(T, -1), self.root_translation, self.root_rotation],
            axis=1,
        )

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(
            fps=self.fps,
            root_translation=self.root_translation[start:stop].copy(),
            root_rotation=self.root_rotation[start:stop].copy(),
            local_joints=self.local_joints[start:stop].copy(),
            skeleton=self.skeleton,
        )


def from_features(feats: np.ndarray, skeleton: SkeletonSpec, fps: float,
                  renormalize: bool = False) -> MotionSequence:
    """Inverse of :meth:`MotionSequence.features`.

    ``renormalize`` projects the quaternion columns back to unit norm; use it
    when the features come out of a decoder rather than a stored sequence.
    """
    feats = np.asarray(feats, dtype=np.float64)
    J = skeleton.joint_count
    if feats.ndim != 2 or feats.shape[1] != skeleton.feature_width:
        raise MotionError(
            f"feature width {feats.shape[-1]} does not match skeleton (D={skeleton.feature_width})")
    T = feats.shape[0]
    local = feats[:, : 3 * J].reshape(T, J, 3)
    trans = feats[:, 3 * J : 3 * J + 3]
    quat = feats[:, 3 * J + 3 :]
    if renormalize:
        quat = normalize_quat(quat)
    return MotionSequence(fps=fps, root_translation=trans, root_rotation=quat,
                         local_joints=local, skeleton=skeleton)


@dataclass(frozen=True)
class GlobalJoints:
    positions: np.ndarray  # (T, J, 3) world coordinates

    def __post_init__(self):
        arr = np.asarray(self.positions, dtype=np.float64)
        object.__setattr__(self, "positions", arr)
        arr.setflags(write=False)


def to_global_joints(m: MotionSequence) -> GlobalJoints:
    """World-space joint positions: rotate locals by the root and translate."""
    q = m.root_rotation[:, None, :]  # (T, 1, 4)
    world = quat_rotate(q, m.local_joints) + m.root_translation[:, None, :]
    return GlobalJoints(positions=world)


# ---------------------------------------------------------------------------
# file format
#
# MOTION v1
# fps <float>
# joints <J>
# names <j0> <j1> ...
# parents <-1> <0> ...
# frames <T>
# <T rows of D = 3J + 7 numbers: local joints, root translation, quaternion>
# ---------------------------------------------------------------------------

_FMT = "%.17g"


def write_motion(m: MotionSequence, path) -> None:
    lines = [
        "MOTION v1",
        f"fps {_FMT % m.fps}",
        f"joints {m.skeleton.joint_count}",
        "names " + " ".join(m.skeleton.joint_names),
        "parents " + " ".join(str(p) for p in m.skeleton.parent_index),
        f"frames {m.frame_count}",
    ]
    feats = m.features()
    for row in feats:
        lines.append(" ".join(_FMT % v for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _expect(cond, lineno, msg):
    if not cond:
        raise MotionError(f"line {lineno}: {msg}")


def read_motion(path) -> MotionSequence:
    with open(path) as fh:
        lines = fh.read().splitlines()
    _expect(len(lines) >= 7, 1, "truncated motion file")
    _expect(lines[0] == "MOTION v1", 1, f"bad magic {lines[0]!r}")
    try:
        fps = float(lines[1].split()[1])
        joints = int(lines[2].split()[1])
        names = lines[3].split()[1:]
        parents = [int(p) for p in lines[4].split()[1:]]
        frames = int(lines[5].split()[1])
    except (IndexError, ValueError) as exc:
        raise MotionError(f"malformed header: {exc}") from exc
    _expect(frames >= 1, 6, "frames must be >= 1")
    skeleton = SkeletonSpec(joint_count=joints, joint_names=tuple(names),
                            parent_index=tuple(parents))
    D = skeleton.feature_width
    _expect(len(lines) >= 6 + frames, 6, f"expected {frames} frame rows")
    rows = []
    for i in range(frames):
        parts = lines[6 + i].split()
        _expect(len(parts) == D, 7 + i, f"expected {D} fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise MotionError(f"line {7 + i}: bad number: {exc}") from exc
    feats = np.array(rows)
    try:
        return from_features(feats, skeleton, fps)
    except MotionError as exc:
        raise MotionError(f"{path}: {exc}") from exc
