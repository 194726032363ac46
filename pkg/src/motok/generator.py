"""Masked multi-stream token generator.

The generator predicts all residual token streams of the tokenizer at once:
a timestep is either fully visible or fully masked across streams, the
backbone input is the sum of per-stream embeddings plus a condition prefix,
and one prediction head per stream scores the codebook.  Decoding offers an
autoregressive baseline over the flattened token line and two iterative
masked strategies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Module, Parameter, Tensor, concat, log_softmax
from .conditioning import (
    ConditionSet,
    CurriculumConfig,
    TrajectoryEncoder,
    apply_freeze_plan,
    build_stage,
    conditions_for_entry,
    sample_stage3_epoch,
    EpochSample,
)
from .nn import EmbeddingTable, Linear, RMSNorm, TransformerBlock
from .optim import (
    AdamW,
    AdamWConfig,
    WarmupCosineConfig,
    load_checkpoint,
    lr_schedule,
    restore_parameters,
    save_checkpoint,
)
from .rfsq import TokenGrid
from .synth import DatasetManifest
from .motion import read_motion


class GeneratorError(ValueError):
    pass


STRATEGIES = ("ar_flatten", "mask_flatten", "mask_parallel")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "mask_parallel"
    iterations: int = 10
    temperature: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise GeneratorError(
                f"unknown decode strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.iterations < 1:
            raise GeneratorError("iterations must be >= 1")
        if self.temperature < 0:
            raise GeneratorError("temperature must be >= 0")


@dataclass(frozen=True)
class GenConfig:
    width: int = 64
    depth: int = 2
    heads: int = 4
    ff_hidden: int = 128
    streams: int = 4
    codebook: int = 2048  # MASK id = codebook, vocab = codebook + 1
    max_len: int = 96
    crop_tokens: int = 16
    text_width: int = 12
    audio_width: int = 2
    epochs: int = 40
    batch_size: int = 16
    lr: float = 2e-3
    warmup: int = 50
    lr_floor: float = 1e-4
    seed: int = 0
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if self.streams < 1:
            raise GeneratorError("streams must be >= 1")
        if self.codebook < 2:
            raise GeneratorError("codebook must be >= 2")

    @property
    def mask_id(self) -> int:
        return self.codebook

    @property
    def vocab(self) -> int:
        return self.codebook + 1


@dataclass(frozen=True)
class MaskedBatch:
    """Tokens with the consistency invariant: a masked timestep carries MASK
    in every stream, an unmasked one in none."""

    tokens: np.ndarray  # (B, streams, t) int64, MASK where masked
    targets: np.ndarray  # (B, streams, t) int64, original tokens
    mask_positions: np.ndarray  # (B, t) bool

    def __post_init__(self):
        B, S, t = self.tokens.shape
        if self.mask_positions.shape != (B, t):
            raise GeneratorError("mask_positions shape does not match tokens")


def apply_consistent_mask(tokens: np.ndarray, ratio: float, mask_id: int,
                          rng: np.random.Generator) -> MaskedBatch:
    """Mask ceil(ratio * t) timesteps, chosen uniformly without replacement,
    simultaneously in every stream."""
    if not (0.0 <= ratio <= 1.0):
        raise GeneratorError(f"mask ratio {ratio} outside [0, 1]")
    tokens = np.asarray(tokens, dtype=np.int64)
    B, S, t = tokens.shape
    k = int(np.ceil(ratio * t))
    mask = np.zeros((B, t), dtype=bool)
    for b in range(B):
        idx = rng.choice(t, size=k, replace=False)
        mask[b, idx] = True
    masked = tokens.copy()
    masked[np.broadcast_to(mask[:, None, :], masked.shape)] = mask_id
    return MaskedBatch(tokens=masked, targets=tokens, mask_positions=mask)


class ConditionEncoder(Module):
    """Projects each modality into the backbone width and tags it with a
    learned modality-type embedding."""

    def __init__(self, rng, config: GenConfig):
        c = config.width
        self.text_proj = Linear(rng, config.text_width, c)
        self.audio_proj = Linear(rng, config.audio_width, c)
        self.traj_enc = TrajectoryEncoder(rng, width=c)
        self.type_embed = Parameter(np.zeros((3, c)))

    def __call__(self, conditions: ConditionSet) -> Tensor | None:
        parts = []
        if conditions.has_text:
            x = Tensor(np.asarray(conditions.text_features, dtype=np.float64))
            parts.append(self.text_proj(x) + self.type_embed[0])
        if conditions.has_audio:
            x = Tensor(np.asarray(conditions.audio_features, dtype=np.float64))
            parts.append(self.audio_proj(x) + self.type_embed[1])
        if conditions.has_trajectory:
            enc = self.traj_enc(conditions.trajectory)  # (1, T/4, c)
            parts.append(enc.reshape(*enc.shape[1:]) + self.type_embed[2])
        if not parts:
            return None
        return concat(parts, axis=0)


class GeneratorModel(Module):
    """Bidirectional backbone over summed stream embeddings with a condition
    prefix and one prediction head per stream."""

    def __init__(self, config: GenConfig, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        c = config.width
        self.stream_embed = [EmbeddingTable(rng, config.vocab, c)
                             for _ in range(config.streams)]
        self.pos_embed = Parameter(
            np.random.default_rng(config.seed + 1).normal(0, 0.02,
                                                          (config.max_len, c)))
        self.cond = ConditionEncoder(rng, config)
        self.backbone = [TransformerBlock(rng, c, config.heads, config.ff_hidden)
                         for _ in range(config.depth)]
        self.final_norm = RMSNorm(c)
        self.heads = [Linear(rng, c, config.codebook)
                      for _ in range(config.streams)]

    def embed_streams(self, tokens: np.ndarray,
                      prefix: Tensor | None = None) -> Tensor:
        """(B, streams, t) tokens -> (B, P + t, c) context input where P is
        the condition-prefix length."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B, S, t = tokens.shape
        if S != self.config.streams:
            raise GeneratorError(
                f"token grid has {S} streams, model expects {self.config.streams}")
        emb = self.stream_embed[0](tokens[:, 0])
        for v in range(1, S):
            emb = emb + self.stream_embed[v](tokens[:, v])
        if prefix is not None:
            P = prefix.shape[0]
            pre = prefix.reshape(1, P, -1)
            if B > 1:
                pre = concat([pre] * B, axis=0)
            emb = concat([pre, emb], axis=1)
        else:
            P = 0
        total = P + t
        if total > self.config.max_len:
            raise GeneratorError(
                f"sequence of {total} positions exceeds max_len {self.config.max_len}")
        return emb + self.pos_embed[:total]

    def forward(self, tokens: np.ndarray,
                conditions: ConditionSet | None = None) -> list[Tensor]:
        """Per-stream logits over the codebook (MASK excluded), each (B, t, |C|)."""
        prefix = self.cond(conditions) if conditions is not None else None
        x = self.embed_streams(tokens, prefix)
        for block in self.backbone:
            x = block(x)
        x = self.final_norm(x)
        P = x.shape[1] - tokens.shape[2]
        h = x[:, P:]
        return [head(h) for head in self.heads]


def masked_ce_loss(logits: list[Tensor], targets: np.ndarray,
                   mask_positions: np.ndarray) -> Tensor:
    """Cross-entropy summed over streams, averaged over masked timesteps.

    Unmasked positions contribute exactly zero, including their gradients.
    """
    mask = np.asarray(mask_positions, dtype=bool)
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise GeneratorError("masked_ce_loss: no masked positions")
    targets = np.asarray(targets, dtype=np.int64)
    weights = Tensor(mask.astype(np.float64))
    total = None
    for v, lg in enumerate(logits):
        logp = log_softmax(lg)
        picked = take_logp(logp, targets[:, v])
        term = (picked * weights * -1.0).sum()
        total = term if total is None else total + term
    return total * (1.0 / n_masked)


def take_logp(logp: Tensor, idx: np.ndarray) -> Tensor:
    from .autodiff import take_along_last

    return take_along_last(logp, idx)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def sample_mask_ratio(rng: np.random.Generator) -> float:
    """Cosine ramp: u ~ U[0,1), ratio = cos(pi u / 2) in (0, 1]."""
    return float(np.cos(np.pi * rng.random() / 2.0))


@dataclass(frozen=True)
class GenEpochStats:
    epoch: int
    loss: float
    lr: float


def _entry_sample_plan(manifest: DatasetManifest, stage: str,
                       curriculum: CurriculumConfig,
                       rng: np.random.Generator) -> list[EpochSample]:
    """Which entries and condition combinations an epoch trains on.

    Stage I: every entry, text-conditioned.  Stage II: audio-aligned entries
    with audio plus every entry with trajectory (the adapters being trained).
    Stage III: disproportional sampling with modality injection.
    """
    if stage == "I":
        return [EpochSample(i, use_text=True, use_audio=False, use_trajectory=False)
                for i in range(len(manifest.entries))]
    if stage == "II":
        plan = [EpochSample(i, use_text=False, use_audio=True, use_trajectory=False)
                for i, e in enumerate(manifest.entries) if e.has_audio]
        plan += [EpochSample(i, use_text=False, use_audio=False, use_trajectory=True)
                 for i in range(len(manifest.entries))]
        return plan
    return sample_stage3_epoch(manifest, curriculum, rng)


def _crop_sample(manifest, entry, sample: EpochSample, tokenizer, crop_tokens,
                 rng) -> tuple[np.ndarray, ConditionSet]:
    """Tokenize a random window and cut the matching condition windows."""
    m = read_motion(manifest.path(entry.motion))
    down = tokenizer.config.downsample
    crop_frames = crop_tokens * down
    if m.frame_count < crop_frames:
        raise GeneratorError(
            f"entry {entry.entry_id}: {m.frame_count} frames < crop {crop_frames}")
    start_tok = int(rng.integers(0, m.frame_count // down - crop_tokens + 1))
    start = start_tok * down
    window = m.slice(start, start + crop_frames)
    tokens = tokenizer.tokenize(window).codes
    cs = conditions_for_entry(manifest, entry, use_text=sample.use_text,
                              use_audio=sample.use_audio,
                              use_trajectory=sample.use_trajectory)
    audio = cs.audio_features
    if audio is not None:
        audio = audio[start_tok : start_tok + crop_tokens]
    traj = cs.trajectory
    if traj is not None:
        traj = traj[start : start + crop_frames]
    return tokens, ConditionSet(text_features=cs.text_features,
                                audio_features=audio, trajectory=traj)


def train_generator(manifest: DatasetManifest, tokenizer, config: GenConfig,
                    curriculum: CurriculumConfig | None = None,
                    model: GeneratorModel | None = None,
                    checkpoint_path=None, log=None):
    """Masked token reconstruction with curriculum freezing.

    Returns (model, history).  Pass ``model`` to continue across stages; the
    optimizer state is fresh per call.  A non-finite loss aborts the run with
    the last finite-loss parameters restored (and checkpointed when a path
    is given).
    """
    curriculum = curriculum or CurriculumConfig(stage="I")
    if not manifest.entries:
        raise GeneratorError("manifest is empty")
    if config.streams != tokenizer.config.rfsq.depth:
        raise GeneratorError(
            f"config.streams {config.streams} != tokenizer depth "
            f"{tokenizer.config.rfsq.depth}")
    if config.codebook != tokenizer.config.rfsq.base.codebook_size:
        raise GeneratorError(
            f"config.codebook {config.codebook} != tokenizer codebook "
            f"{tokenizer.config.rfsq.base.codebook_size}")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = GeneratorModel(config, rng=rng)
    apply_freeze_plan(model, build_stage(curriculum.stage, model))

    params = model.named_parameters()
    opt = AdamW(params, AdamWConfig(lr=config.lr))
    steps_per_epoch = max(1, (len(manifest.entries) + config.batch_size - 1)
                          // config.batch_size)
    sched = WarmupCosineConfig(warmup=min(config.warmup,
                                          config.epochs * steps_per_epoch - 1),
                               total=config.epochs * steps_per_epoch,
                               peak=config.lr, floor=config.lr_floor)
    history: list[GenEpochStats] = []
    last_good = {n: p.data.copy() for n, p in params.items()}
    step_count = 0
    for epoch in range(config.epochs):
        plan = _entry_sample_plan(manifest, curriculum.stage, curriculum, rng)
        rng.shuffle(plan)
        # batch elements must share a modality combination so prefixes stack
        groups: dict[tuple, list[EpochSample]] = {}
        for s in plan:
            groups.setdefault((s.use_text, s.use_audio, s.use_trajectory),
                              []).append(s)
        epoch_loss = 0.0
        batches = 0
        cur_lr = config.lr
        for combo in sorted(groups):
            samples = groups[combo]
            for i in range(0, len(samples), config.batch_size):
                chunk = samples[i : i + config.batch_size]
                toks, conds = [], []
                for s in chunk:
                    tk, cs = _crop_sample(manifest, manifest.entries[s.entry_index],
                                          s, tokenizer, config.crop_tokens, rng)
                    toks.append(tk)
                    conds.append(cs)
                tokens = np.stack(toks)
                ratio = sample_mask_ratio(rng)
                if ratio == 0.0:
                    ratio = 1.0 / config.crop_tokens
                batch = apply_consistent_mask(tokens, ratio, config.mask_id, rng)
                # conditions vary per element only through content; encode the
                # first element's prefix shape and stack the rest
                logits = _forward_batched(model, batch.tokens, conds)
                loss = masked_ce_loss(logits, batch.targets, batch.mask_positions)
                if not np.isfinite(loss.item()):
                    for name, p in params.items():
                        p.data = last_good[name]
                    if checkpoint_path is not None:
                        save_generator(model, checkpoint_path, step=step_count)
                    raise GeneratorError(
                        f"non-finite loss at epoch {epoch}; last good parameters restored")
                model.zero_grad()
                loss.backward()
                cur_lr = lr_schedule(min(step_count + 1, sched.total), sched)
                opt.step(lr=cur_lr)
                step_count += 1
                epoch_loss += loss.item()
                batches += 1
        last_good = {name: p.data.copy() for name, p in params.items()}
        history.append(GenEpochStats(epoch=epoch, loss=epoch_loss / max(batches, 1),
                                     lr=cur_lr))
        if log is not None:
            print(f"epoch {epoch} loss {epoch_loss / max(batches, 1):.6f} "
                  f"lr {cur_lr:.2e}", file=log)
        if checkpoint_path is not None:
            save_generator(model, checkpoint_path, step=step_count)
    return model, history


def _forward_batched(model: GeneratorModel, tokens: np.ndarray,
                     conds: list[ConditionSet]) -> list[Tensor]:
    """Forward a batch whose elements share a modality combination.

    Condition contents differ per element, so prefixes are encoded per
    element and stacked before entering the backbone.
    """
    prefixes = [model.cond(cs) for cs in conds]
    if prefixes[0] is None:
        x = model.embed_streams(tokens, None)
    else:
        P = prefixes[0].shape[0]
        pre = concat([p.reshape(1, P, -1) for p in prefixes], axis=0)
        x = _assemble(model, tokens, pre)
    for block in model.backbone:
        x = block(x)
    x = model.final_norm(x)
    P = x.shape[1] - tokens.shape[2]
    h = x[:, P:]
    return [head(h) for head in model.heads]


def _assemble(model: GeneratorModel, tokens: np.ndarray, pre: Tensor) -> Tensor:
    emb = model.stream_embed[0](tokens[:, 0])
    for v in range(1, model.config.streams):
        emb = emb + model.stream_embed[v](tokens[:, v])
    full = concat([pre, emb], axis=1)
    total = full.shape[1]
    if total > model.config.max_len:
        raise GeneratorError(
            f"sequence of {total} positions exceeds max_len {model.config.max_len}")
    return full + model.pos_embed[:total]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenResult:
    codes: np.ndarray  # (streams, t) int64, MASK-free
    backbone_passes: int


def _predict(model: GeneratorModel, state: np.ndarray,
             conditions: ConditionSet | None) -> list[np.ndarray]:
    logits = model.forward(state[None], conditions)
    return [lg.data[0] for lg in logits]  # each (t, |C|)


def _choose(logits: np.ndarray, temperature: float,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-row sampled (or argmax) code and its temperature-1 probability."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    if temperature == 0.0:
        codes = logits.argmax(axis=-1)
    else:
        scaled = shifted / temperature
        p = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
        p /= p.sum(axis=-1, keepdims=True)
        codes = np.array([rng.choice(p.shape[-1], p=p[i])
                          for i in range(p.shape[0])])
    conf = probs[np.arange(len(codes)), codes]
    return codes.astype(np.int64), conf


def _keep_count(total: int, i: int, S: int) -> int:
    """Committed-position target after iteration i of S (cosine schedule)."""
    return total - int(np.floor(total * np.cos(np.pi * i / (2 * S))))


def generate(model: GeneratorModel, conditions: ConditionSet | None, length: int,
             decode: DecodeConfig | None = None,
             rng: np.random.Generator | None = None) -> GenResult:
    """Decode a MASK-free token grid of shape (streams, length)."""
    decode = decode or model.config.decode
    rng = rng or np.random.default_rng(model.config.seed)
    cfg = model.config
    S_streams, t = cfg.streams, length
    if t < 1:
        raise GeneratorError("length must be >= 1")
    state = np.full((S_streams, t), cfg.mask_id, dtype=np.int64)
    passes = 0

    if decode.strategy == "ar_flatten":
        # stream-major line: stream 0 first (coarse to fine), one backbone
        # pass and one committed position per step
        for v in range(S_streams):
            for tau in range(t):
                logits = _predict(model, state, conditions)
                passes += 1
                codes, _ = _choose(logits[v][tau : tau + 1], decode.temperature, rng)
                state[v, tau] = codes[0]
        return GenResult(codes=state, backbone_passes=passes)

    if decode.strategy == "mask_flatten":
        L = S_streams * t
        committed = np.zeros((S_streams, t), dtype=bool)
        for i in range(1, decode.iterations + 1):
            logits = _predict(model, state, conditions)
            passes += 1
            target = L if i == decode.iterations else _keep_count(L, i, decode.iterations)
            need = target - int(committed.sum())
            if need <= 0:
                continue
            cand_codes = np.empty((S_streams, t), dtype=np.int64)
            cand_conf = np.empty((S_streams, t))
            for v in range(S_streams):
                cand_codes[v], cand_conf[v] = _choose(logits[v],
                                                      decode.temperature, rng)
            flat_conf = np.where(committed, -np.inf, cand_conf).reshape(-1)
            # stable order: highest confidence first, lowest line index on ties
            order = np.lexsort((np.arange(L), -flat_conf))
            chosen = order[:need]
            vs, taus = np.unravel_index(chosen, (S_streams, t))
            state[vs, taus] = cand_codes[vs, taus]
            committed[vs, taus] = True
        return GenResult(codes=state, backbone_passes=passes)

    # mask_parallel: commit whole timesteps, matching the training masking
    committed = np.zeros(t, dtype=bool)
    for i in range(1, decode.iterations + 1):
        logits = _predict(model, state, conditions)
        passes += 1
        target = t if i == decode.iterations else _keep_count(t, i, decode.iterations)
        need = target - int(committed.sum())
        if need <= 0:
            continue
        cand_codes = np.empty((S_streams, t), dtype=np.int64)
        conf = np.zeros(t)
        for v in range(S_streams):
            cand_codes[v], c = _choose(logits[v], decode.temperature, rng)
            conf += np.log(np.maximum(c, 1e-300))
        conf = np.where(committed, -np.inf, conf)
        order = np.lexsort((np.arange(t), -conf))
        chosen = order[:need]
        state[:, chosen] = cand_codes[:, chosen]
        committed[chosen] = True
    return GenResult(codes=state, backbone_passes=passes)


def result_to_grid(result: GenResult, spec) -> TokenGrid:
    return TokenGrid(codes=result.codes, spec=spec)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_generator(model: GeneratorModel, path, step: int = 0):
    c = model.config
    meta = {
        "kind": "generator",
        "config": {
            "width": c.width, "depth": c.depth, "heads": c.heads,
            "ff_hidden": c.ff_hidden, "streams": c.streams,
            "codebook": c.codebook, "max_len": c.max_len,
            "crop_tokens": c.crop_tokens, "text_width": c.text_width,
            "audio_width": c.audio_width, "seed": c.seed,
            "decode": {"strategy": c.decode.strategy,
                       "iterations": c.decode.iterations,
                       "temperature": c.decode.temperature},
        },
    }
    save_checkpoint(path, model.named_parameters(), meta=meta, step=step)


def load_generator(path) -> GeneratorModel:
    arrays, meta, _step = load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise GeneratorError(f"{path}: not a generator checkpoint")
    c = meta["config"]
    decode = DecodeConfig(**c["decode"])
    config = GenConfig(width=c["width"], depth=c["depth"], heads=c["heads"],
                       ff_hidden=c["ff_hidden"], streams=c["streams"],
                       codebook=c["codebook"], max_len=c["max_len"],
                       crop_tokens=c["crop_tokens"], text_width=c["text_width"],
                       audio_width=c["audio_width"], seed=c["seed"],
                       decode=decode)
    model = GeneratorModel(config)
    restore_parameters(model.named_parameters(), arrays)
    return model
