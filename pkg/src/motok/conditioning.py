"""Modality conditions, the trajectory encoder, and the training curriculum.

Text and audio conditions arrive as precomputed feature matrices (the
upstream pretrained encoders stay frozen and out of scope); the trainable
parts are the per-modality projections into the backbone width.  The
trajectory encoder is a small strided convolutional network matching the
tokenizer's temporal downsample factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Tensor
from .features_io import read_features
from .nn import Conv1d, Linear
from .synth import DatasetManifest, ManifestEntry


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionSet:
    text_features: np.ndarray | None = None  # (N_t, text_width)
    audio_features: np.ndarray | None = None  # (N_a, audio_width)
    trajectory: np.ndarray | None = None  # (T, 3) root positions, meters

    @property
    def has_text(self) -> bool:
        return self.text_features is not None

    @property
    def has_audio(self) -> bool:
        return self.audio_features is not None

    @property
    def has_trajectory(self) -> bool:
        return self.trajectory is not None


def load_condition_features(path, modality: str,
                            expected_width: int | None = None) -> np.ndarray:
    """Read a feature file verbatim; projection to model width happens in
    the model, not here."""
    return read_features(path, modality=modality, expected_width=expected_width)


class TrajectoryEncoder(Module):
    """Strided temporal convolutions over (T, 3) root positions; output
    length is T / downsample."""

    downsample = 4

    def __init__(self, rng, width: int, hidden: int = 32):
        self.conv1 = Conv1d(rng, 3, hidden, kernel=4, stride=2)
        self.conv2 = Conv1d(rng, hidden, width, kernel=4, stride=2)

    def __call__(self, traj: np.ndarray | Tensor) -> Tensor:
        if not isinstance(traj, Tensor):
            traj = Tensor(np.asarray(traj, dtype=np.float64))
        if traj.data.ndim == 2:
            traj = traj.reshape(1, *traj.shape)
        T = traj.shape[1]
        if T < self.conv1.kernel:
            raise ConditioningError(
                f"trajectory too short: {T} frames < kernel {self.conv1.kernel}")
        return self.conv2(self.conv1(traj).silu())


def encode_trajectory(encoder: TrajectoryEncoder, traj: np.ndarray) -> np.ndarray:
    """(T, 3) -> (T // 4, c) feature matrix."""
    return encoder(traj).data[0]


# ---------------------------------------------------------------------------
# curriculum
# ---------------------------------------------------------------------------

STAGES = ("I", "II", "III")

# parameter-name prefixes; the generator model guarantees this grouping
GROUP_BACKBONE = ("backbone.", "pos_embed", "final_norm.")
GROUP_TOKEN = ("stream_embed.", "heads.")
GROUP_TEXT = ("cond.text_proj.", "cond.type_embed")
GROUP_AUDIO = ("cond.audio_proj.",)
GROUP_TRAJ = ("cond.traj_enc.",)
ALL_GROUPS = GROUP_BACKBONE + GROUP_TOKEN + GROUP_TEXT + GROUP_AUDIO + GROUP_TRAJ


@dataclass(frozen=True)
class CurriculumConfig:
    stage: str = "I"
    stage3_text_fraction: float = 0.10
    augment_prob: float = 0.1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConditioningError(f"unknown stage {self.stage!r}")
        if not (0.0 <= self.stage3_text_fraction <= 1.0):
            raise ConditioningError("stage3_text_fraction must be in [0, 1]")
        if not (0.0 <= self.augment_prob <= 1.0):
            raise ConditioningError("augment_prob must be in [0, 1]")


def _match(name: str, prefixes) -> bool:
    return any(name.startswith(p) for p in prefixes)


def build_stage(stage: str, model) -> frozenset[str]:
    """Trainable parameter names for a curriculum stage.

    Stage I trains the backbone, token embeddings/heads, and the text
    projection; audio and trajectory encoders stay frozen.  Stage II trains
    only the audio and trajectory encoders.  Stage III trains everything.
    """
    if stage not in STAGES:
        raise ConditioningError(f"unknown stage {stage!r}")
    names = list(model.named_parameters())
    unknown = [n for n in names if not _match(n, ALL_GROUPS)]
    if unknown:
        raise ConditioningError(f"parameters outside known groups: {unknown}")
    if stage == "I":
        trainable = [n for n in names
                     if not _match(n, GROUP_AUDIO + GROUP_TRAJ)]
    elif stage == "II":
        trainable = [n for n in names if _match(n, GROUP_AUDIO + GROUP_TRAJ)]
    else:
        trainable = names
    return frozenset(trainable)


def apply_freeze_plan(model, trainable: frozenset[str]):
    params = model.named_parameters()
    unknown = trainable - set(params)
    if unknown:
        raise ConditioningError(f"freeze plan names unknown parameters: {sorted(unknown)}")
    for name, p in params.items():
        p.trainable = name in trainable


@dataclass(frozen=True)
class EpochSample:
    entry_index: int
    use_text: bool
    use_audio: bool
    use_trajectory: bool


def sample_stage3_epoch(manifest: DatasetManifest, config: CurriculumConfig,
                        rng: np.random.Generator) -> list[EpochSample]:
    """Disproportional epoch sampling: the full audio-aligned subset plus a
    Bernoulli(stage3_text_fraction) draw of text-only entries, followed by
    modality augmentation with probability ``augment_prob`` (trajectory into
    text-conditioned samples, text into audio-conditioned samples)."""
    import warnings

    audio_idx = [i for i, e in enumerate(manifest.entries) if e.has_audio]
    text_idx = [i for i, e in enumerate(manifest.entries) if not e.has_audio]
    if not audio_idx:
        warnings.warn("no audio-aligned entries; stage III degenerates to text-only")
    samples: list[EpochSample] = []
    for i in audio_idx:
        inject_text = rng.random() < config.augment_prob
        samples.append(EpochSample(i, use_text=inject_text, use_audio=True,
                                   use_trajectory=False))
    for i in text_idx:
        if rng.random() >= config.stage3_text_fraction:
            continue
        inject_traj = rng.random() < config.augment_prob
        samples.append(EpochSample(i, use_text=True, use_audio=False,
                                   use_trajectory=inject_traj))
    return samples


def conditions_for_entry(manifest: DatasetManifest, entry: ManifestEntry,
                         use_text=True, use_audio=True, use_trajectory=True,
                         text_width: int | None = None,
                         audio_width: int | None = None) -> ConditionSet:
    text = audio = traj = None
    if use_text:
        text = load_condition_features(manifest.path(entry.text), "text", text_width)
    if use_audio:
        if entry.audio is None:
            raise ConditioningError(f"entry {entry.entry_id} has no audio condition")
        audio = load_condition_features(manifest.path(entry.audio), "audio", audio_width)
    if use_trajectory:
        traj = load_condition_features(manifest.path(entry.traj), "traj", 3)
    return ConditionSet(text_features=text, audio_features=audio, trajectory=traj)
