"""Deterministic data-curation filters and beat-alignment scoring.

Each filter is a pure function of a record returning the computed statistic
together with the verdict, so tests can pin both.  Boundary semantics follow
the documented inequalities literally: "below X" fails strictly below,
closed intervals pass their endpoints, "> X" fails strictly above.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

from .motion import MotionSequence, quat_to_matrix, to_global_joints


class CurationError(ValueError):
    pass


@dataclass(frozen=True)
class CurationRecord:
    motion: MotionSequence | None = None
    width: int | None = None
    height: int | None = None
    bitrate: float | None = None  # bits/s
    mean_luminance: float | None = None  # 0-255
    rgb_means: tuple[float, float, float] | None = None
    motion_score: float | None = None
    blur: float | None = None  # 0-1
    keypoint_confidence: float | None = None  # 0-1
    audio_beats: tuple[float, ...] | None = None  # seconds

    def __post_init__(self):
        for name in ("bitrate", "mean_luminance", "motion_score", "blur",
                     "keypoint_confidence"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise CurationError(f"{name} must be finite, got {v}")
        for name in ("width", "height"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise CurationError(f"{name} must be positive, got {v}")

    def luminance(self) -> float | None:
        if self.mean_luminance is not None:
            return float(self.mean_luminance)
        if self.rgb_means is not None:
            r, g, b = self.rgb_means
            # integer-scaled coefficients so they sum to exactly 1
            return (2126.0 * r + 7152.0 * g + 722.0 * b) / 10000.0
        return None


@dataclass(frozen=True)
class FilterVerdict:
    name: str
    statistic: float
    threshold: str
    passed: bool
    flagged: bool = False  # degenerate input handled by convention

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.passed))
        object.__setattr__(self, "flagged", bool(self.flagged))


# ---------------------------------------------------------------------------
# video-stage filters
# ---------------------------------------------------------------------------

def filter_bitrate(rec: CurationRecord) -> FilterVerdict:
    """Normalized bitrate B / sqrt(W * H); fail strictly below 500."""
    if rec.bitrate is None or rec.width is None or rec.height is None:
        raise CurationError("filter_bitrate requires bitrate, width, height")
    stat = rec.bitrate / np.sqrt(rec.width * rec.height)
    return FilterVerdict("bitrate", float(stat), ">= 500", stat >= 500.0)


def filter_luminance(rec: CurationRecord) -> FilterVerdict:
    """Mean luminance inside the closed interval [10, 210] passes."""
    lum = rec.luminance()
    if lum is None:
        raise CurationError("filter_luminance requires mean_luminance or rgb_means")
    return FilterVerdict("luminance", lum, "in [10, 210]", 10.0 <= lum <= 210.0)


def filter_motion_score(rec: CurationRecord) -> FilterVerdict:
    """Optical-flow motion score inside the closed interval [3.5, 350] passes."""
    if rec.motion_score is None:
        raise CurationError("filter_motion_score requires motion_score")
    s = float(rec.motion_score)
    return FilterVerdict("motion_score", s, "in [3.5, 350]", 3.5 <= s <= 350.0)


def filter_2d_quality(rec: CurationRecord) -> FilterVerdict:
    """Fail when shorter than 60 frames, blur below 0.1, or keypoint
    confidence below 0.6 (all strict)."""
    if rec.motion is None or rec.blur is None or rec.keypoint_confidence is None:
        raise CurationError("filter_2d_quality requires motion, blur, confidence")
    T = rec.motion.frame_count
    ok = T >= 60 and rec.blur >= 0.1 and rec.keypoint_confidence >= 0.6
    return FilterVerdict("2d_quality", float(T),
                         "T >= 60 and blur >= 0.1 and conf >= 0.6", ok)


# ---------------------------------------------------------------------------
# motion-stage filters
# ---------------------------------------------------------------------------

def root_mutation_score(m: MotionSequence) -> FilterVerdict:
    """Max per-frame root rotation change in degrees; fail strictly above 30.

    Delta theta_i = arccos((tr(R_i R_{i-1}^T) - 1) / 2), with the trace
    argument clamped to [-1, 1] against rounding.
    """
    if m.frame_count < 2:
        raise CurationError("root_mutation_score needs at least 2 frames")
    R = np.stack([quat_to_matrix(q) for q in m.root_rotation])
    rel = np.einsum("tij,tkj->tik", R[1:], R[:-1])  # R_i @ R_{i-1}.T
    tr = np.trace(rel, axis1=1, axis2=2)
    arg = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    # rounding in the matrix products can pull a truly-constant rotation's
    # trace argument a few ulps under 1, which arccos amplifies; snap it
    arg[arg >= 1.0 - 1e-12] = 1.0
    deg = np.degrees(np.arccos(arg))
    stat = float(deg.max())
    return FilterVerdict("root_mutation", stat, "<= 30 deg", stat <= 30.0)


def jerk_score(m: MotionSequence) -> FilterVerdict:
    """Mean third-difference magnitude of global joints (m / frame^3);
    fail strictly above 0.015."""
    if m.frame_count < 4:
        raise CurationError("jerk_score needs at least 4 frames")
    p = to_global_joints(m).positions  # (T, J, 3)
    d = p[3:] - 3.0 * p[2:-1] + 3.0 * p[1:-2] - p[:-3]  # (T-3, J, 3)
    norms = np.linalg.norm(d, axis=-1)
    stat = float(norms.mean())  # 1 / ((T-3) * J) * sum
    return FilterVerdict("jerk", stat, "<= 0.015", stat <= 0.015)


def jump_score(m: MotionSequence) -> FilterVerdict:
    """Max frame-wise joint displacement in millimeters; fail strictly
    above 200."""
    if m.frame_count < 2:
        raise CurationError("jump_score needs at least 2 frames")
    p = to_global_joints(m).positions
    disp = np.linalg.norm(p[1:] - p[:-1], axis=-1)  # (T-1, J)
    stat = float(disp.max() * 1000.0)
    return FilterVerdict("jump", stat, "<= 200 mm", stat <= 200.0)


# ---------------------------------------------------------------------------
# beat alignment
# ---------------------------------------------------------------------------

def motion_beats(m: MotionSequence, prominence_fraction: float = 0.1) -> np.ndarray:
    """Beat times (s): local minima of mean global-joint speed with a
    prominence of ``prominence_fraction`` of the speed range."""
    p = to_global_joints(m).positions
    speed = np.linalg.norm(p[1:] - p[:-1], axis=-1).mean(axis=1)  # (T-1,)
    rng = speed.max() - speed.min()
    if rng <= 0:
        return np.array([])
    idx, _ = find_peaks(-speed, prominence=prominence_fraction * rng)
    return idx / m.fps


def beat_alignment(m: MotionSequence, audio_beats, sigma_frames: float = 3.0,
                   dance_threshold: float = 0.15) -> FilterVerdict:
    """Beat-alignment score: mean over audio beats of a Gaussian kernel of
    the distance to the nearest motion beat; dance iff BAS > threshold.

    With no detectable motion beats, BAS is 0 by convention and the verdict
    is flagged.
    """
    beats = np.asarray(audio_beats, dtype=np.float64)
    if beats.size == 0:
        raise CurationError("beat_alignment requires at least one audio beat")
    sigma = sigma_frames / m.fps
    mb = motion_beats(m)
    if mb.size == 0:
        return FilterVerdict("beat_alignment", 0.0,
                             f"> {dance_threshold} is dance", False, flagged=True)
    d2 = (beats[:, None] - mb[None, :]) ** 2
    bas = float(np.mean(np.exp(-d2.min(axis=1) / (2.0 * sigma ** 2))))
    return FilterVerdict("beat_alignment", bas, f"> {dance_threshold} is dance",
                         bas > dance_threshold)


# ---------------------------------------------------------------------------
# chain
# ---------------------------------------------------------------------------

VIDEO_FILTERS = {
    "bitrate": filter_bitrate,
    "luminance": filter_luminance,
    "motion_score": filter_motion_score,
    "2d_quality": filter_2d_quality,
}
MOTION_FILTERS = {
    "root_mutation": root_mutation_score,
    "jerk": jerk_score,
    "jump": jump_score,
}
FILTER_ORDER = ("bitrate", "luminance", "motion_score", "2d_quality",
                "root_mutation", "jerk", "jump")


@dataclass(frozen=True)
class ChainConfig:
    filters: tuple[str, ...] = FILTER_ORDER
    sigma_frames: float = 3.0
    dance_threshold: float = 0.15

    def __post_init__(self):
        unknown = [f for f in self.filters if f not in FILTER_ORDER]
        if unknown:
            raise CurationError(f"unknown filters: {unknown}")


def _applicable(name: str, rec: CurationRecord) -> bool:
    if name == "bitrate":
        return None not in (rec.bitrate, rec.width, rec.height)
    if name == "luminance":
        return rec.luminance() is not None
    if name == "motion_score":
        return rec.motion_score is not None
    if name == "2d_quality":
        return None not in (rec.motion, rec.blur, rec.keypoint_confidence)
    return rec.motion is not None  # motion-stage filters


@dataclass(frozen=True)
class ChainReport:
    verdicts: tuple[tuple[FilterVerdict, ...], ...]  # per record
    accepted: tuple[int, ...]  # indices into the input list
    rejection_counts: dict[str, int] = field(default_factory=dict)
    duration_histogram: tuple[tuple[float, float, int], ...] = ()

    def format(self) -> str:
        lines = ["curation report", f"records: {len(self.verdicts)}",
                 f"accepted: {len(self.accepted)}"]
        for name in FILTER_ORDER:
            if name in self.rejection_counts:
                lines.append(f"rejected by {name}: {self.rejection_counts[name]}")
        lines.append("duration histogram (s):")
        for lo, hi, count in self.duration_histogram:
            hi_txt = f"{hi:g}" if np.isfinite(hi) else "inf"
            lines.append(f"  [{lo:g}, {hi_txt}): {count}")
        return "\n".join(lines)


_DURATION_EDGES = (0.0, 2.0, 4.0, 6.0, 8.0, 10.0, np.inf)


def run_chain(records, config: ChainConfig | None = None) -> ChainReport:
    """Apply every applicable configured filter to every record.

    Filters are independent predicates, so the accept set does not depend
    on their order; the report attributes each rejection to every filter
    that failed.
    """
    config = config or ChainConfig()
    all_verdicts: list[tuple[FilterVerdict, ...]] = []
    accepted: list[int] = []
    rejections: dict[str, int] = {}
    durations: list[float] = []
    for i, rec in enumerate(records):
        verdicts = []
        for name in config.filters:
            if not _applicable(name, rec):
                continue
            fn = VIDEO_FILTERS.get(name) or MOTION_FILTERS[name]
            v = fn(rec) if name in VIDEO_FILTERS else fn(rec.motion)
            verdicts.append(v)
            if not v.passed:
                rejections[name] = rejections.get(name, 0) + 1
        all_verdicts.append(tuple(verdicts))
        if all(v.passed for v in verdicts):
            accepted.append(i)
        if rec.motion is not None:
            durations.append(rec.motion.frame_count / rec.motion.fps)
    hist = []
    for lo, hi in zip(_DURATION_EDGES[:-1], _DURATION_EDGES[1:]):
        hist.append((lo, hi, sum(1 for d in durations if lo <= d < hi)))
    return ChainReport(verdicts=tuple(all_verdicts), accepted=tuple(accepted),
                       rejection_counts=rejections,
                       duration_histogram=tuple(hist))
