"""Evaluation metrics: MPJPE, FID, Diversity, MMDist, R-Precision, and
root-trajectory control errors, plus the small contrastive feature
extractor that FID / retrieval metrics are computed under.

FID and R-Precision values are extractor-relative: they are only comparable
between runs that used the same extractor version stamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Module, Tensor, log_softmax, take_along_last
from .motion import MotionSequence, read_motion, to_global_joints
from .nn import Conv1d, Linear
from .optim import AdamW, AdamWConfig
from .features_io import read_features
from .synth import DatasetManifest


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# geometric metrics
# ---------------------------------------------------------------------------

def mpjpe(a: MotionSequence, b: MotionSequence) -> float:
    """Mean per-joint position error between world-space joints, in mm."""
    if a.skeleton.joint_count != b.skeleton.joint_count:
        raise MetricsError("skeleton mismatch")
    if a.frame_count != b.frame_count:
        raise MetricsError(f"frame count mismatch: {a.frame_count} vs {b.frame_count}")
    pa = to_global_joints(a).positions
    pb = to_global_joints(b).positions
    return float(np.mean(np.linalg.norm(pa - pb, axis=-1))) * 1000.0


def trajectory_errors(generated, target, threshold: float = 0.5) -> dict:
    """Root-trajectory control errors over one or more sequence pairs.

    Returns ``traj_err_pct`` (percent of sequences with any frame farther
    than ``threshold`` meters), ``loc_err_pct`` (percent of frames beyond
    the threshold), and ``avg_err_cm`` (mean per-frame distance).
    """
    gen_list = generated if isinstance(generated, (list, tuple)) else [generated]
    tgt_list = target if isinstance(target, (list, tuple)) else [target]
    if len(gen_list) != len(tgt_list):
        raise MetricsError("sequence count mismatch")
    frame_dists = []
    bad_seqs = 0
    for g, t in zip(gen_list, tgt_list):
        g = np.asarray(g, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if g.shape != t.shape:
            raise MetricsError(f"trajectory shape mismatch: {g.shape} vs {t.shape}")
        d = np.linalg.norm(g - t, axis=-1)
        frame_dists.append(d)
        if np.any(d > threshold):
            bad_seqs += 1
    all_d = np.concatenate(frame_dists)
    return {
        "traj_err_pct": 100.0 * bad_seqs / len(gen_list),
        "loc_err_pct": 100.0 * float(np.mean(all_d > threshold)),
        "avg_err_cm": 100.0 * float(np.mean(all_d)),
    }


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise MetricsError(f"covariance shape {cov.shape} does not match mean")
        if np.max(np.abs(cov - cov.T)) > 1e-8:
            raise MetricsError("covariance not symmetric")
        cov = 0.5 * (cov + cov.T)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "GaussianSummary":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise MetricsError("need at least 2 feature rows")
        return cls(mean=feats.mean(axis=0), cov=np.cov(feats, rowvar=False))


def _psd_sqrt(mat: np.ndarray, clamp: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if vals.min() < -clamp:
        raise MetricsError(f"matrix not PSD within tolerance (min eig {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    """Fréchet distance between Gaussian summaries, symmetric square-root
    route: tr(Sa + Sb - 2 sqrt(sqrt(Sa) Sb sqrt(Sa)))."""
    if a.mean.shape != b.mean.shape:
        raise MetricsError("dimension mismatch")
    diff = a.mean - b.mean
    sa_half = _psd_sqrt(a.cov)
    cross = _psd_sqrt(sa_half @ b.cov @ sa_half)
    val = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    return float(max(val, 0.0))


def diversity(features: np.ndarray, pair_count: int = 300,
              rng: np.random.Generator | None = None) -> float:
    """Mean Euclidean distance over seeded random disjoint pairs."""
    rng = rng or np.random.default_rng(0)
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if n < 2:
        raise MetricsError("need at least 2 features")
    dists = []
    while len(dists) < pair_count:
        perm = rng.permutation(n)
        for i in range(n // 2):
            if len(dists) >= pair_count:
                break
            dists.append(np.linalg.norm(feats[perm[2 * i]] - feats[perm[2 * i + 1]]))
    return float(np.mean(dists))


def mm_dist(motion_features: np.ndarray, text_features: np.ndarray) -> float:
    m = np.asarray(motion_features, dtype=np.float64)
    t = np.asarray(text_features, dtype=np.float64)
    if m.shape != t.shape:
        raise MetricsError(f"paired feature shapes differ: {m.shape} vs {t.shape}")
    return float(np.mean(np.linalg.norm(m - t, axis=-1)))


def r_precision(motion_features: np.ndarray, text_features: np.ndarray,
                k_list=(1, 2, 3), pool: int = 32,
                rng: np.random.Generator | None = None) -> dict[int, float]:
    """Top-k retrieval accuracy against ``pool - 1`` sampled negatives."""
    rng = rng or np.random.default_rng(0)
    m = np.asarray(motion_features, dtype=np.float64)
    t = np.asarray(text_features, dtype=np.float64)
    n = m.shape[0]
    if n < pool:
        raise MetricsError(f"need at least {pool} pairs, got {n}")
    hits = {k: 0 for k in k_list}
    for i in range(n):
        others = np.delete(np.arange(n), i)
        negs = rng.choice(others, size=pool - 1, replace=False)
        d_true = np.linalg.norm(m[i] - t[i])
        d_negs = np.linalg.norm(m[i] - t[negs], axis=-1)
        rank = 1 + int(np.sum(d_negs < d_true))
        for k in k_list:
            if rank <= k:
                hits[k] += 1
    return {k: hits[k] / n for k in k_list}


# ---------------------------------------------------------------------------
# contrastive feature extractor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractorConfig:
    feature_dim: int = 64
    channels: int = 48
    crop: int = 48
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    temperature: float = 0.07
    seed: int = 0


class FeatureExtractor(Module):
    """Dual encoder: motion conv encoder and text projector, both mapping
    to the same L2-normalized feature space."""

    def __init__(self, config: ExtractorConfig, motion_width: int, text_width: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        ch = config.channels
        self.config = config
        self.motion_width = motion_width
        self.text_width = text_width
        self.conv1 = Conv1d(rng, motion_width, ch, kernel=3, stride=1)
        self.conv2 = Conv1d(rng, ch, ch, kernel=4, stride=2)
        self.conv3 = Conv1d(rng, ch, ch, kernel=4, stride=2)
        self.motion_head = Linear(rng, ch, config.feature_dim)
        self.text_hidden = Linear(rng, text_width, ch)
        self.text_head = Linear(rng, ch, config.feature_dim)
        self.norm_mean = np.zeros(motion_width)
        self.norm_std = np.ones(motion_width)
        self.version = f"extractor-v1-seed{config.seed}"

    def motion_tensor(self, feats: np.ndarray) -> Tensor:
        x = (np.asarray(feats) - self.norm_mean) / self.norm_std
        if x.ndim == 2:
            x = x[None]
        h = self.conv1(Tensor(x)).silu()
        h = self.conv2(h).silu()
        h = self.conv3(h).silu()
        pooled = h.mean(axis=1)
        out = self.motion_head(pooled)
        norm = ((out * out).sum(axis=-1, keepdims=True) + 1e-8).sqrt()
        return out / norm

    def text_tensor(self, text: np.ndarray) -> Tensor:
        x = np.asarray(text, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        pooled = Tensor(x).mean(axis=1)
        out = self.text_head(self.text_hidden(pooled).silu())
        norm = ((out * out).sum(axis=-1, keepdims=True) + 1e-8).sqrt()
        return out / norm

    def motion_features(self, feats: np.ndarray) -> np.ndarray:
        return self.motion_tensor(self._crop(feats)).data

    def text_features(self, text: np.ndarray) -> np.ndarray:
        return self.text_tensor(text).data

    def _crop(self, feats: np.ndarray) -> np.ndarray:
        feats = np.asarray(feats)
        single = feats.ndim == 2
        if single:
            feats = feats[None]
        T = feats.shape[1]
        c = min(self.config.crop, (T // 4) * 4)
        start = (T - c) // 2
        out = feats[:, start : start + c]
        return out[0] if single else out


def train_feature_extractor(manifest: DatasetManifest,
                            config: ExtractorConfig | None = None) -> FeatureExtractor:
    """Symmetric InfoNCE over (motion, text) pairs; deterministic per seed."""
    config = config or ExtractorConfig()
    if not manifest.entries:
        raise MetricsError("manifest is empty")
    rng = np.random.default_rng(config.seed)
    motions = [read_motion(manifest.path(e.motion)).features() for e in manifest.entries]
    texts = [read_features(manifest.path(e.text), modality="text")
             for e in manifest.entries]
    model = FeatureExtractor(config, motion_width=motions[0].shape[1],
                             text_width=texts[0].shape[1], rng=rng)
    allfeat = np.concatenate(motions, axis=0)
    model.norm_mean = allfeat.mean(axis=0)
    std = allfeat.std(axis=0)
    model.norm_std = np.where(std < 1e-6, 1.0, std)

    params = model.named_parameters()
    opt = AdamW(params, AdamWConfig(lr=config.lr))
    n = len(motions)
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            crops = []
            for i in idx:
                f = motions[i]
                c = min(config.crop, (f.shape[0] // 4) * 4)
                s = int(rng.integers(0, f.shape[0] - c + 1))
                crops.append(_pad_to(f[s : s + c], config.crop))
            mf = model.motion_tensor(np.stack(crops))
            tf = model.text_tensor(np.stack([texts[i] for i in idx]))
            logits = (mf @ tf.transpose(1, 0)) * (1.0 / config.temperature)
            targets = np.arange(len(idx))
            loss_m = -take_along_last(log_softmax(logits), targets).mean()
            loss_t = -take_along_last(log_softmax(logits.transpose(1, 0)), targets).mean()
            loss = loss_m + loss_t
            model.zero_grad()
            loss.backward()
            opt.step()
    return model


def _pad_to(f: np.ndarray, length: int) -> np.ndarray:
    if f.shape[0] >= length:
        return f[:length]
    reps = int(np.ceil(length / f.shape[0]))
    return np.concatenate([f] * reps, axis=0)[:length]


def extract_corpus_features(model: FeatureExtractor, manifest: DatasetManifest):
    """(motion_features, text_features) arrays for every manifest entry."""
    mf, tf = [], []
    for e in manifest.entries:
        feats = read_motion(manifest.path(e.motion)).features()
        mf.append(model.motion_features(feats)[0])
        tf.append(model.text_features(
            read_features(manifest.path(e.text), modality="text"))[0])
    return np.stack(mf), np.stack(tf)
