"""Procedural synthetic motion corpus.

Every entry is built from a handful of seeded draws: a root trajectory
(line / circle / spline), a beat grid with a fixed period in frames, and
per-class sinusoidal joint oscillation phase-locked to that grid.  The
"text" condition is a small matrix whose first row is the one-hot class
embedding and whose second row carries continuous attributes (beat period
in seconds, heading, mean speed); the "audio" condition is a beat-impulse
sequence at token rate (one row per 4 frames).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features_io import write_features
from .motion import (
    MotionSequence,
    SkeletonSpec,
    quat_from_yaw,
    write_motion,
)

TRAJECTORY_FAMILIES = ("line", "circle", "spline")
TEXT_ATTR_COLS = 4  # beat period (s), heading x, heading y, mean speed (m/s)
AUDIO_WIDTH = 2  # beats-in-window count, beat phase at window start


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    sequence_count: int = 64
    length_range: tuple[int, int] = (48, 96)
    class_count: int = 8
    beat_period_range: tuple[int, int] = (8, 16)
    trajectory_family: str = "line"
    noise: float = 0.0
    seed: int = 0
    fps: float = 30.0
    audio_fraction: float = 0.3
    # when False, the text condition omits the kinematic attribute row
    # (heading / speed stay zero), so trajectory information reaches a model
    # only through the trajectory condition -- used for ablations
    text_kinematics: bool = True
    skeleton: SkeletonSpec = field(default_factory=SkeletonSpec)

    def __post_init__(self):
        if self.sequence_count < 1:
            raise SynthError("sequence_count must be >= 1")
        lo, hi = self.length_range
        if not (1 <= lo <= hi):
            raise SynthError(f"empty length range {self.length_range}")
        plo, phi = self.beat_period_range
        if not (2 <= plo <= phi):
            raise SynthError(f"empty beat period range {self.beat_period_range}")
        if self.class_count < 1:
            raise SynthError("class_count must be >= 1")
        if self.trajectory_family not in TRAJECTORY_FAMILIES:
            raise SynthError(f"unknown trajectory family {self.trajectory_family!r}")
        if self.noise < 0:
            raise SynthError("noise must be >= 0")
        if not (0.0 <= self.audio_fraction <= 1.0):
            raise SynthError("audio_fraction must be in [0, 1]")

    @property
    def text_width(self) -> int:
        return self.class_count + TEXT_ATTR_COLS


@dataclass(frozen=True)
class ManifestEntry:
    entry_id: str
    motion: str
    text: str
    traj: str
    audio: str | None
    label: int
    beat_times: tuple[float, ...]
    frames: int

    @property
    def has_audio(self) -> bool:
        return self.audio is not None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple[ManifestEntry, ...]

    def path(self, rel: str) -> Path:
        return self.root / rel


def _rest_pose(skeleton: SkeletonSpec) -> np.ndarray:
    """Deterministic rest offsets: each joint hangs 0.12 m from its parent
    along a direction fixed by the joint index."""
    J = skeleton.joint_count
    rest = np.zeros((J, 3))
    for j in range(1, J):
        p = skeleton.parent_index[j]
        angle = 2.399963229728653 * j  # golden-angle spread
        offset = 0.12 * np.array([np.cos(angle), np.sin(angle), -0.8])
        rest[j] = rest[p] + offset
    return rest


def _class_amplitudes(class_count: int, joint_count: int):
    """Per-class oscillation amplitude per joint; fixed independent of the
    dataset seed so class signatures are a documented generator contract."""
    rng = np.random.default_rng(20240601)
    amps = 0.02 + 0.08 * rng.random((class_count, joint_count))
    harmonics = rng.integers(1, 3, size=class_count)  # 1 or 2 × beat frequency
    amps[:, 0] = 0.0  # root joint stays at the root
    return amps, harmonics


def _trajectory(family: str, T: int, fps: float, rng: np.random.Generator):
    tt = np.arange(T) / fps
    if family == "line":
        theta = rng.uniform(0, 2 * np.pi)
        speed = rng.uniform(0.5, 2.0)
        xy = np.outer(tt * speed, [np.cos(theta), np.sin(theta)])
        yaw = np.full(T, theta)
    elif family == "circle":
        radius = rng.uniform(0.5, 3.0)
        omega = rng.uniform(0.5, 2.0) / radius  # ~unit tangential speed
        sign = 1.0 if rng.random() < 0.5 else -1.0
        phi = sign * omega * tt
        xy = radius * np.stack([np.sin(phi), sign * (1 - np.cos(phi))], axis=1)
        yaw = phi
    else:  # spline: sum of two slow sinusoids per axis
        xy = np.zeros((T, 2))
        for axis in range(2):
            for _ in range(2):
                freq = rng.uniform(0.05, 0.25)
                amp = rng.uniform(0.3, 1.0)
                phase = rng.uniform(0, 2 * np.pi)
                xy[:, axis] += amp * np.sin(2 * np.pi * freq * tt + phase)
            xy[:, axis] -= xy[0, axis]
        vel = np.gradient(xy, axis=0)
        yaw = np.arctan2(vel[:, 1], vel[:, 0])
    pos = np.zeros((T, 3))
    pos[:, :2] = xy
    pos[:, 2] = 0.9
    return pos, yaw


def _audio_features(T: int, period: int) -> np.ndarray:
    """Token-rate beat descriptor: per 4-frame window, the number of beats
    inside the window and the beat phase at the window start."""
    t_tok = T // 4
    out = np.zeros((max(t_tok, 1), AUDIO_WIDTH))
    beats = np.arange(0, T, period)
    for k in range(max(t_tok, 1)):
        lo, hi = 4 * k, 4 * k + 4
        out[k, 0] = np.sum((beats >= lo) & (beats < hi))
        out[k, 1] = (lo % period) / period
    return out


def class_text_row(label: int, class_count: int) -> np.ndarray:
    """Documented class embedding row: one-hot over classes, attribute
    columns zero."""
    row = np.zeros(class_count + TEXT_ATTR_COLS)
    row[label] = 1.0
    return row


def synthesize_entry(spec: SyntheticSpec, rng: np.random.Generator, label: int):
    lo, hi = spec.length_range
    T = int(rng.integers(lo, hi + 1))
    plo, phi = spec.beat_period_range
    period = int(rng.integers(plo, phi + 1))

    pos, yaw = _trajectory(spec.trajectory_family, T, spec.fps, rng)
    quat = quat_from_yaw(yaw)

    amps, harmonics = _class_amplitudes(spec.class_count, spec.skeleton.joint_count)
    rest = _rest_pose(spec.skeleton)
    t = np.arange(T)
    phase = 2 * np.pi * harmonics[label] * t / period
    # cosine displacement: joint-speed minima land on the beat grid
    wave = np.cos(phase)[:, None, None]
    direction = np.stack([
        np.ones(spec.skeleton.joint_count),
        np.where(np.arange(spec.skeleton.joint_count) % 2 == 0, 1.0, -1.0),
        0.5 * np.ones(spec.skeleton.joint_count),
    ], axis=1)
    local = rest[None] + amps[label][None, :, None] * direction[None] * wave
    if spec.noise > 0:
        local = local + rng.normal(0.0, spec.noise, size=local.shape)

    motion = MotionSequence(fps=spec.fps, root_translation=pos, root_rotation=quat,
                            local_joints=local, skeleton=spec.skeleton)

    beat_frames = np.arange(0, T, period)
    beat_times = tuple(float(b) / spec.fps for b in beat_frames)

    text = np.zeros((2, spec.text_width))
    text[0] = class_text_row(label, spec.class_count)
    disp = pos[-1, :2] - pos[0, :2]
    norm = np.linalg.norm(disp)
    heading = disp / norm if norm > 1e-9 else np.zeros(2)
    duration = (T - 1) / spec.fps
    mean_speed = norm / duration if duration > 0 else 0.0
    if spec.text_kinematics:
        text[1, spec.class_count:] = [period / spec.fps, heading[0], heading[1],
                                      mean_speed]
    else:
        text[1, spec.class_count] = period / spec.fps

    audio = _audio_features(T, period)
    return motion, text, audio, beat_times


def synthesize_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Generate the corpus under ``out_dir`` and return its manifest.

    Fully determined by ``spec`` (including the seed): the same spec writes
    byte-identical files.  Class labels are assigned round-robin so every
    class appears when ``sequence_count >= class_count``; audio annotations
    cover an evenly spread ``audio_fraction`` of entries, mirroring uneven
    modality coverage.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.sequence_count):
        label = i % spec.class_count
        motion, text, audio, beat_times = synthesize_entry(spec, rng, label)
        eid = f"e{i:05d}"
        motion_rel = f"{eid}.motion"
        text_rel = f"{eid}.text"
        traj_rel = f"{eid}.traj"
        write_motion(motion, out_dir / motion_rel)
        write_features(text, "text", out_dir / text_rel)
        write_features(motion.root_translation, "traj", out_dir / traj_rel)
        # deterministic even-spread coverage: entry i is audio-aligned when
        # the running count floor((i+1)*f) advances, so any prefix of n
        # entries contains floor(n*f) audio entries
        f = spec.audio_fraction
        has_audio = int(np.floor((i + 1) * f)) - int(np.floor(i * f)) == 1
        audio_rel = None
        if has_audio:
            audio_rel = f"{eid}.audio"
            write_features(audio, "audio", out_dir / audio_rel)
        entries.append(ManifestEntry(
            entry_id=eid, motion=motion_rel, text=text_rel, traj=traj_rel,
            audio=audio_rel, label=label, beat_times=beat_times,
            frames=motion.frame_count))
    manifest = DatasetManifest(root=out_dir, entries=tuple(entries))
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as fh:
        for e in manifest.entries:
            rec = {
                "id": e.entry_id, "motion": e.motion, "text": e.text,
                "traj": e.traj, "audio": e.audio, "label": e.label,
                "beat_times": list(e.beat_times), "frames": e.frames,
            }
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SynthError(f"{path}: line {lineno}: {exc}") from exc
            entry = ManifestEntry(
                entry_id=rec["id"], motion=rec["motion"], text=rec["text"],
                traj=rec["traj"], audio=rec.get("audio"), label=int(rec["label"]),
                beat_times=tuple(float(b) for b in rec["beat_times"]),
                frames=int(rec["frames"]))
            for rel in (entry.motion, entry.text, entry.traj, entry.audio):
                if rel is not None and not (root / rel).exists():
                    raise SynthError(f"{path}: line {lineno}: missing file {rel}")
            entries.append(entry)
    return DatasetManifest(root=root, entries=tuple(entries))
