"""Trainable motion tokenizer: temporal encoder, residual-FSQ bottleneck,
decoder, and the MSE reconstruction objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, Parameter, Tensor
from .motion import MotionSequence, SkeletonSpec, from_features, read_motion
from .nn import Conv1d, Linear, TransformerBlock, ste_quantize
from .optim import AdamW, AdamWConfig, multistep_lr, restore_parameters, save_checkpoint, load_checkpoint
from .rfsq import FsqSpec, RfsqSpec, TokenGrid, rfsq_decode, rfsq_encode
from .synth import DatasetManifest


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizerConfig:
    downsample: int = 4
    channels: int = 64
    latent_dim: int = 4
    heads: int = 4
    rfsq: RfsqSpec = field(default_factory=RfsqSpec)
    epochs: int = 50
    dither_epochs: int = 30
    batch_size: int = 32
    crop: int = 64
    lr: float = 2e-3
    milestones: tuple[int, ...] = (60, 140)
    lr_gamma: float = 0.3
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.crop % self.downsample != 0:
            raise TokenizerError(
                f"crop length {self.crop} must be divisible by downsample {self.downsample}")
        if self.dither_epochs < 0:
            raise TokenizerError("dither_epochs must be non-negative")
        if self.latent_dim != self.rfsq.base.dim:
            raise TokenizerError(
                f"latent_dim {self.latent_dim} != rfsq dim {self.rfsq.base.dim}")


class TokenizerModel(Module):
    """Encoder/decoder around the residual-FSQ bottleneck.

    Strided convolutions with one self-attention block at the bottleneck on
    both sides; feature normalization statistics travel with the model as
    frozen parameters.
    """

    def __init__(self, config: TokenizerConfig, skeleton: SkeletonSpec,
                 fps: float = 30.0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        self.skeleton = skeleton
        self.fps = fps
        D, ch, d = skeleton.feature_width, config.channels, config.latent_dim
        # encoder
        self.enc_in = Conv1d(rng, D, ch, kernel=3, stride=1)
        self.enc_down1 = Conv1d(rng, ch, ch, kernel=4, stride=2)
        self.enc_down2 = Conv1d(rng, ch, ch, kernel=4, stride=2)
        self.enc_attn = TransformerBlock(rng, ch, config.heads, 2 * ch)
        self.enc_out = Linear(rng, ch, d)
        # keep latents strictly inside the quantizer's interior codes: the
        # endpoint representatives sit at the clamp logits, far outside the
        # data range, and would destabilize the residual recursion
        levels = np.array(config.rfsq.base.levels, dtype=np.float64)
        self._latent_bound = np.log(2.0 * levels - 3.0)  # logit(1 - 0.5/(L-1))
        # decoder
        self.dec_in = Linear(rng, d, ch)
        self.dec_attn = TransformerBlock(rng, ch, config.heads, 2 * ch)
        self.dec_up1 = Conv1d(rng, ch, ch, kernel=3, stride=1)
        self.dec_up2 = Conv1d(rng, ch, ch, kernel=3, stride=1)
        self.dec_out = Linear(rng, ch, D)
        # feature normalization buffers (frozen)
        self.norm_mean = Parameter(np.zeros(D), trainable=False)
        self.norm_std = Parameter(np.ones(D), trainable=False)

    # -- graph pieces ------------------------------------------------------

    def _normalize(self, x: Tensor) -> Tensor:
        return (x - self.norm_mean) * (self.norm_std ** -1.0)

    def _denormalize(self, x: Tensor) -> Tensor:
        return x * self.norm_std + self.norm_mean

    def encode_features(self, x: Tensor) -> Tensor:
        """(B, T, D) -> (B, T/4, d) continuous latents."""
        T = x.shape[1]
        if T % self.config.downsample != 0:
            raise TokenizerError(
                f"sequence length {T} not divisible by downsample "
                f"{self.config.downsample}; crop or pad the input first")
        h = self.enc_in(self._normalize(x)).silu()
        h = self.enc_down1(h).silu()
        h = self.enc_down2(h).silu()
        h = self.enc_attn(h)
        b = Tensor(self._latent_bound)
        return (self.enc_out(h) * Tensor(1.0 / self._latent_bound)).tanh() * b

    def decode_latents(self, z: Tensor) -> Tensor:
        """(B, t, d) -> (B, 4t, D) feature reconstruction."""
        h = self.dec_in(z)
        h = self.dec_attn(h)
        h = _upsample2(h)
        h = self.dec_up1(h).silu()
        h = _upsample2(h)
        h = self.dec_up2(h).silu()
        return self._denormalize(self.dec_out(h))

    def reconstruct(self, x: Tensor) -> Tensor:
        z = self.encode_features(x)
        zq = ste_quantize(z, self.config.rfsq)
        return self.decode_latents(zq)

    # -- user-facing ops ---------------------------------------------------

    def encode(self, m: MotionSequence) -> np.ndarray:
        """Continuous latent sequence of shape (T / downsample, d)."""
        feats = Tensor(m.features()[None])
        return self.encode_features(feats).data[0]

    def tokenize(self, m: MotionSequence) -> TokenGrid:
        return rfsq_encode(self.encode(m), self.config.rfsq)

    def detokenize(self, tokens: TokenGrid) -> MotionSequence:
        if tokens.spec.base.levels != self.config.rfsq.base.levels or \
                tokens.spec.depth != self.config.rfsq.depth:
            raise TokenizerError("token grid spec does not match this tokenizer")
        z = Tensor(rfsq_decode(tokens)[None])
        feats = self.decode_latents(z).data[0]
        return from_features(feats, self.skeleton, self.fps, renormalize=True)

    def fit_normalization(self, features: np.ndarray):
        self.norm_mean.data = features.mean(axis=0)
        std = features.std(axis=0)
        self.norm_std.data = np.where(std < 1e-6, 1.0, std)


def _upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour temporal upsampling by 2: (B, t, c) -> (B, 2t, c)."""
    idx = np.repeat(np.arange(x.shape[1]), 2)
    return x[:, idx]


def residual_cell_widths(spec: RfsqSpec, bounds: np.ndarray) -> np.ndarray:
    """Median quantization cell width per latent dimension, measured over the
    bounded latent range by scanning a fine grid through the full residual
    quantizer.  Used to scale the dither noise during training."""
    widths = np.empty(spec.base.dim)
    for i, (level, b) in enumerate(zip(spec.base.levels, bounds)):
        sub = RfsqSpec(base=FsqSpec(levels=(level,), bounding=spec.base.bounding,
                                    clamp_eps=spec.base.clamp_eps),
                       depth=spec.depth)
        z = np.linspace(-b, b, 4001)[:, None]
        codes = rfsq_encode(z, sub).codes
        changes = np.where((codes[:, 1:] != codes[:, :-1]).any(axis=0))[0]
        if len(changes) < 2:
            widths[i] = 2.0 * b
        else:
            widths[i] = float(np.median(np.diff(z[changes, 0])))
    return widths


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    lr: float


def _load_features(manifest: DatasetManifest):
    return [read_motion(manifest.path(e.motion)).features() for e in manifest.entries]


def train_tokenizer(manifest: DatasetManifest, config: TokenizerConfig,
                    checkpoint_path=None, log=None):
    """Train on random fixed-length crops.  Returns (model, history).

    The first ``dither_epochs`` epochs replace hard quantization with
    uniform noise at the quantizer's cell width, which keeps gradients
    informative and forces the encoder to place distinguishing detail above
    the quantization noise floor; the remaining epochs use the hard
    straight-through bottleneck.  Learning rate decays by ``lr_gamma`` at
    each milestone epoch.  On a non-finite loss the run aborts and the last
    finite-loss parameter set is restored.
    """
    if not manifest.entries:
        raise TokenizerError("manifest is empty")
    rng = np.random.default_rng(config.seed)
    skeleton = read_motion(manifest.path(manifest.entries[0].motion)).skeleton
    fps = read_motion(manifest.path(manifest.entries[0].motion)).fps
    model = TokenizerModel(config, skeleton, fps=fps, rng=rng)
    feats = _load_features(manifest)
    for f in feats:
        if f.shape[0] < config.crop:
            raise TokenizerError(
                f"sequence of {f.shape[0]} frames shorter than crop {config.crop}")
    model.fit_normalization(np.concatenate(feats, axis=0))
    cell_widths = residual_cell_widths(config.rfsq, model._latent_bound)

    params = model.named_parameters()
    opt = AdamW(params, AdamWConfig(lr=config.lr, weight_decay=config.weight_decay))
    history: list[EpochStats] = []
    last_good = {n: p.data.copy() for n, p in params.items()}
    n = len(feats)
    for epoch in range(config.epochs):
        lr = multistep_lr(config.lr, epoch, config.milestones, config.lr_gamma)
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.stack([_random_crop(feats[i], config.crop, rng) for i in idx])
            x = Tensor(batch)
            z = model.encode_features(x)
            if epoch < config.dither_epochs:
                noise = rng.uniform(-0.5, 0.5, size=z.shape) * cell_widths
                zq = z + Tensor(noise)
            else:
                zq = ste_quantize(z, config.rfsq)
            recon = model.decode_latents(zq)
            target = model._normalize(x)
            pred = model._normalize(recon)
            loss = ((pred - target) ** 2).mean()
            if not np.isfinite(loss.item()):
                for name, p in params.items():
                    p.data = last_good[name]
                raise TokenizerError(
                    f"non-finite loss at epoch {epoch}; last good parameters restored")
            model.zero_grad()
            loss.backward()
            opt.step(lr=lr)
            epoch_loss += loss.item()
            batches += 1
        last_good = {name: p.data.copy() for name, p in params.items()}
        history.append(EpochStats(epoch=epoch, loss=epoch_loss / batches, lr=lr))
        if log is not None:
            print(f"epoch {epoch} loss {epoch_loss / batches:.6f} lr {lr:.2e}",
                  file=log)
        if checkpoint_path is not None:
            save_tokenizer(model, checkpoint_path, step=epoch + 1)
    return model, history


def finetune_decoder(model: TokenizerModel, manifest: DatasetManifest,
                     steps: int = 2000, lr: float = 1e-3, log=None) -> list[float]:
    """Freeze the token codes and train only the decoder on the fixed
    code-to-features mapping.  Sharpens reconstruction once the encoder has
    settled, since decoder updates no longer chase moving codes.  Returns
    the per-step loss trace."""
    pairs = []
    for e in manifest.entries:
        m = read_motion(manifest.path(e.motion))
        T = (m.frame_count // model.config.downsample) * model.config.downsample
        if T == 0:
            raise TokenizerError(f"entry {e.entry_id} shorter than one downsample block")
        m = m.slice(0, T)
        pairs.append((rfsq_decode(model.tokenize(m)), m.features()))
    dec_params = {n: p for n, p in model.named_parameters().items()
                  if n.startswith("dec") and p.trainable}
    opt = AdamW(dec_params, AdamWConfig(lr=lr, weight_decay=0.0))
    rng = np.random.default_rng(model.config.seed)
    losses: list[float] = []
    milestones = (steps // 2, (4 * steps) // 5)
    for step in range(steps):
        cur = multistep_lr(lr, step, milestones, 0.3)
        zq, f = pairs[int(rng.integers(len(pairs)))]
        recon = model.decode_latents(Tensor(zq[None]))
        loss = ((model._normalize(recon) - model._normalize(Tensor(f[None]))) ** 2).mean()
        if not np.isfinite(loss.item()):
            raise TokenizerError(f"non-finite loss at fine-tune step {step}")
        model.zero_grad()
        loss.backward()
        opt.step(lr=cur)
        losses.append(loss.item())
        if log is not None and (step + 1) % 200 == 0:
            print(f"finetune step {step + 1} loss {loss.item():.6f}", file=log)
    return losses


def _random_crop(f: np.ndarray, crop: int, rng: np.random.Generator) -> np.ndarray:
    T = f.shape[0]
    start = int(rng.integers(0, T - crop + 1))
    return f[start : start + crop]


def save_tokenizer(model: TokenizerModel, path, step: int = 0):
    meta = {
        "kind": "tokenizer",
        "config": {
            "downsample": model.config.downsample,
            "channels": model.config.channels,
            "latent_dim": model.config.latent_dim,
            "heads": model.config.heads,
            "levels": list(model.config.rfsq.base.levels),
            "depth": model.config.rfsq.depth,
            "seed": model.config.seed,
        },
        "skeleton": {
            "joint_count": model.skeleton.joint_count,
            "joint_names": list(model.skeleton.joint_names),
            "parent_index": list(model.skeleton.parent_index),
        },
        "fps": model.fps,
    }
    save_checkpoint(path, model.named_parameters(), meta=meta, step=step)


def load_tokenizer(path) -> TokenizerModel:
    arrays, meta, _step = load_checkpoint(path)
    if meta.get("kind") != "tokenizer":
        raise TokenizerError(f"{path}: not a tokenizer checkpoint")
    c = meta["config"]
    config = TokenizerConfig(
        downsample=c["downsample"], channels=c["channels"],
        latent_dim=c["latent_dim"], heads=c["heads"],
        rfsq=RfsqSpec(base=FsqSpec(levels=tuple(c["levels"])), depth=c["depth"]),
        seed=c.get("seed", 0))
    sk = meta["skeleton"]
    skeleton = SkeletonSpec(joint_count=sk["joint_count"],
                            joint_names=tuple(sk["joint_names"]),
                            parent_index=tuple(sk["parent_index"]))
    model = TokenizerModel(config, skeleton, fps=meta["fps"])
    restore_parameters(model.named_parameters(), arrays)
    return model


def eval_reconstruction(model: TokenizerModel, manifest: DatasetManifest) -> dict:
    """Mean MPJPE (mm) of detokenize(tokenize(m)) over manifest entries,
    cropped to the largest downsample-divisible length."""
    from .metrics import mpjpe

    values = []
    for e in manifest.entries:
        m = read_motion(manifest.path(e.motion))
        T = (m.frame_count // model.config.downsample) * model.config.downsample
        if T == 0:
            raise TokenizerError(f"entry {e.entry_id} shorter than one downsample block")
        m = m.slice(0, T)
        recon = model.detokenize(model.tokenize(m))
        values.append(mpjpe(recon, m))
    return {"mpjpe_mm_mean": float(np.mean(values)),
            "mpjpe_mm_max": float(np.max(values)),
            "count": len(values)}
