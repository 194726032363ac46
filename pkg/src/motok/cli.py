"""Command-line pipeline driver.

One declarative YAML config with per-stage sections drives every command;
flags override the config and ``--seed`` overrides every section seed at
once.  Each command writes the fully resolved config next to its outputs,
holds a lock file for the duration of the run, and reports failures as a
single machine-parsable JSON record on standard error.  Progress goes to
standard error; reports go to files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .conditioning import (
    ConditionSet,
    CurriculumConfig,
    conditions_for_entry,
    load_condition_features,
)
from .curation import ChainConfig, CurationRecord, run_chain
from .generator import (
    DecodeConfig,
    GenConfig,
    STRATEGIES,
    generate,
    load_generator,
    result_to_grid,
    save_generator,
    train_generator,
)
from .metrics import (
    ExtractorConfig,
    GaussianSummary,
    diversity,
    extract_corpus_features,
    fid,
    mm_dist,
    mpjpe,
    r_precision,
    train_feature_extractor,
    trajectory_errors,
)
from .motion import SkeletonSpec, read_motion, write_motion
from .rfsq import FsqSpec, RfsqSpec, write_tokens
from .synth import SyntheticSpec, read_manifest, synthesize_dataset
from .tokenizer import (
    TokenizerConfig,
    eval_reconstruction,
    finetune_decoder,
    load_tokenizer,
    save_tokenizer,
    train_tokenizer,
)

DATA_ROOT_ENV = "MOTOK_DATA_ROOT"


class CliError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    dataset: SyntheticSpec = field(default_factory=SyntheticSpec)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    generator: GenConfig = field(default_factory=GenConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    curation: ChainConfig = field(default_factory=ChainConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    finetune_steps: int = 0
    generate_length: int = 16
    seed: int | None = None


_SECTIONS = ("dataset", "tokenizer", "generator", "curriculum", "curation",
             "extractor")
_TOP_KEYS = _SECTIONS + ("finetune_steps", "generate_length", "seed")

# section keys handled outside the plain dataclass fields
_SPECIAL_KEYS = {
    "dataset": ("joint_count",),
    "tokenizer": ("levels", "depth"),
    "generator": ("decode",),
}
_SKIP_FIELDS = {"dataset": ("skeleton",), "tokenizer": ("rfsq",),
                "generator": ("decode",)}


def _tupled(value):
    return tuple(value) if isinstance(value, list) else value


def _build_section(cls, mapping: dict, section: str):
    names = {f.name for f in fields(cls)} - set(_SKIP_FIELDS.get(section, ()))
    special = _SPECIAL_KEYS.get(section, ())
    unknown = [k for k in mapping if k not in names and k not in special]
    if unknown:
        raise CliError(f"unknown keys in section {section!r}: {sorted(unknown)}")
    kwargs = {k: _tupled(v) for k, v in mapping.items() if k in names}
    if section == "dataset" and "joint_count" in mapping:
        kwargs["skeleton"] = SkeletonSpec(joint_count=int(mapping["joint_count"]))
    if section == "tokenizer" and ("levels" in mapping or "depth" in mapping):
        base = RfsqSpec()
        levels = _tupled(mapping.get("levels", base.base.levels))
        depth = int(mapping.get("depth", base.depth))
        kwargs["rfsq"] = RfsqSpec(base=FsqSpec(levels=levels), depth=depth)
    if section == "generator" and "decode" in mapping:
        dec = mapping["decode"]
        dec_names = {f.name for f in fields(DecodeConfig)}
        bad = [k for k in dec if k not in dec_names]
        if bad:
            raise CliError(f"unknown keys in section 'generator.decode': {sorted(bad)}")
        kwargs["decode"] = DecodeConfig(**dec)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise CliError(f"section {section!r}: {exc}") from exc


def load_run_config(path=None, seed: int | None = None) -> RunConfig:
    """Parse the YAML run config; ``seed`` (the --seed flag) wins over the
    file's global seed, and the winning global seed overrides every section
    seed that the file does not set explicitly."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}" if mark is not None else ""
            raise CliError(f"{path}: config parse error{where}: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError(f"{path}: config root must be a mapping")
    unknown = [k for k in raw if k not in _TOP_KEYS]
    if unknown:
        raise CliError(f"unknown top-level config keys: {sorted(unknown)}")

    global_seed = seed if seed is not None else raw.get("seed")
    sections = {}
    classes = {"dataset": SyntheticSpec, "tokenizer": TokenizerConfig,
               "generator": GenConfig, "curriculum": CurriculumConfig,
               "curation": ChainConfig, "extractor": ExtractorConfig}
    for name, cls in classes.items():
        mapping = raw.get(name, {}) or {}
        if not isinstance(mapping, dict):
            raise CliError(f"section {name!r} must be a mapping")
        if global_seed is not None and "seed" not in mapping and \
                any(f.name == "seed" for f in fields(cls)):
            mapping = dict(mapping, seed=int(global_seed))
        sections[name] = _build_section(cls, mapping, name)
    return RunConfig(finetune_steps=int(raw.get("finetune_steps", 0)),
                     generate_length=int(raw.get("generate_length", 16)),
                     seed=global_seed, **sections)


def config_to_dict(cfg: RunConfig) -> dict:
    """Plain-YAML view of the resolved config, round-trippable through
    ``load_run_config``."""
    out: dict = {}
    d = dataclasses.asdict(cfg.dataset)
    d.pop("skeleton")
    d["joint_count"] = cfg.dataset.skeleton.joint_count
    out["dataset"] = d
    t = dataclasses.asdict(cfg.tokenizer)
    t.pop("rfsq")
    t["levels"] = list(cfg.tokenizer.rfsq.base.levels)
    t["depth"] = cfg.tokenizer.rfsq.depth
    out["tokenizer"] = t
    out["generator"] = dataclasses.asdict(cfg.generator)
    out["curriculum"] = dataclasses.asdict(cfg.curriculum)
    out["curation"] = dataclasses.asdict(cfg.curation)
    out["extractor"] = dataclasses.asdict(cfg.extractor)
    out["finetune_steps"] = cfg.finetune_steps
    out["generate_length"] = cfg.generate_length
    if cfg.seed is not None:
        out["seed"] = cfg.seed

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.integer,)):
            return int(v)
        if isinstance(v, (np.floating,)):
            return float(v)
        return v

    return clean(out)


def write_resolved_config(cfg: RunConfig, out_dir: Path):
    with open(out_dir / "config.yaml", "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

@contextmanager
def output_dir(path):
    """Create the output directory and hold its lock file for the run."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output directory {path} is locked by another run; "
            f"remove {lock} if that run is no longer alive") from None
    os.close(fd)
    try:
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _require(path, what: str, producer: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"missing {what}: {path}; produce it with `motok {producer}`")
    return path


def _manifest(data_dir) -> "DatasetManifest":
    return read_manifest(_require(Path(data_dir) / "manifest.jsonl",
                                  "dataset manifest", "synth"))


def _data_dir(args) -> Path:
    if args.data is not None:
        return Path(args.data)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    raise CliError(f"no dataset directory: pass --data or set {DATA_ROOT_ENV}")


def _log(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        manifest = synthesize_dataset(cfg.dataset, out / "dataset")
        _log(f"synthesized {len(manifest.entries)} sequences -> {manifest.root}")
    return 0


def cmd_curate(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    manifest = _manifest(_data_dir(args))
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        records = [CurationRecord(motion=read_motion(manifest.path(e.motion)))
                   for e in manifest.entries]
        report = run_chain(records, cfg.curation)
        (out / "curation_report.txt").write_text(report.format() + "\n")
        with open(out / "accepted.txt", "w") as fh:
            for i in report.accepted:
                fh.write(manifest.entries[i].entry_id + "\n")
        _log(f"accepted {len(report.accepted)} / {len(manifest.entries)}")
    return 0


def cmd_train_tokenizer(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    manifest = _manifest(_data_dir(args))
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        model, history = train_tokenizer(manifest, cfg.tokenizer, log=sys.stderr)
        if cfg.finetune_steps > 0:
            finetune_decoder(model, manifest, steps=cfg.finetune_steps,
                             log=sys.stderr)
        save_tokenizer(model, out / "tokenizer.ckpt")
        with open(out / "training_history.json", "w") as fh:
            json.dump([dataclasses.asdict(h) for h in history], fh, indent=2)
        report = eval_reconstruction(model, manifest)
        with open(out / "reconstruction.json", "w") as fh:
            json.dump(report, fh, indent=2)
        _log(f"tokenizer saved; reconstruction {report['mpjpe_mm_mean']:.2f} mm MPJPE")
    return 0


def cmd_tokenize(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    manifest = _manifest(_data_dir(args))
    model = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint",
                                    "train-tokenizer"))
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        for e in manifest.entries:
            m = read_motion(manifest.path(e.motion))
            T = (m.frame_count // model.config.downsample) * model.config.downsample
            tokens = model.tokenize(m.slice(0, T))
            write_tokens(tokens, out / f"{e.entry_id}.tokens")
        _log(f"tokenized {len(manifest.entries)} sequences -> {out}")
    return 0


def cmd_train_gen(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    manifest = _manifest(_data_dir(args))
    tokenizer = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint",
                                        "train-tokenizer"))
    init = None
    if args.init is not None:
        init = load_generator(_require(args.init, "generator checkpoint",
                                       "train-gen"))
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        model, history = train_generator(manifest, tokenizer, cfg.generator,
                                         curriculum=cfg.curriculum, model=init,
                                         log=sys.stderr)
        save_generator(model, out / "generator.ckpt")
        with open(out / "training_history.json", "w") as fh:
            json.dump([dataclasses.asdict(h) for h in history], fh, indent=2)
        _log(f"generator saved (stage {cfg.curriculum.stage}, "
             f"final loss {history[-1].loss:.4f})")
    return 0


def _conditions_from_flags(args, cfg: RunConfig) -> ConditionSet:
    text = audio = traj = None
    if args.text is not None:
        text = load_condition_features(args.text, "text")
    if args.audio is not None:
        audio = load_condition_features(args.audio, "audio")
    if args.traj is not None:
        traj = load_condition_features(args.traj, "traj", expected_width=3)
    return ConditionSet(text_features=text, audio_features=audio, trajectory=traj)


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    model = load_generator(_require(args.generator, "generator checkpoint",
                                    "train-gen"))
    tokenizer = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint",
                                        "train-tokenizer"))
    conditions = _conditions_from_flags(args, cfg)
    length = args.length or cfg.generate_length
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        rng = np.random.default_rng(cfg.seed or 0)
        result = generate(model, conditions, length,
                          decode=cfg.generator.decode, rng=rng)
        grid = result_to_grid(result, tokenizer.config.rfsq)
        write_tokens(grid, out / "generated.tokens")
        motion = tokenizer.detokenize(grid)
        write_motion(motion, out / "generated.motion")
        # plot-ready numeric dump of the frame-by-frame root trajectory
        np.savetxt(out / "generated_traj.txt", motion.root_translation)
        _log(f"generated {motion.frame_count} frames "
             f"({result.backbone_passes} backbone passes) -> {out}")
    return 0


def _evaluate_metrics(cfg: RunConfig, manifest, tokenizer, model) -> dict:
    extractor = train_feature_extractor(manifest, cfg.extractor)
    rng = np.random.default_rng(cfg.seed or 0)
    down = tokenizer.config.downsample
    real_feats, gen_feats, text_feats = [], [], []
    gen_trajs, tgt_trajs = [], []
    mpjpes = []
    for e in manifest.entries:
        m = read_motion(manifest.path(e.motion))
        length = min(cfg.generate_length, m.frame_count // down)
        frames = length * down
        target = m.slice(0, frames)
        cs = conditions_for_entry(manifest, e, use_audio=e.has_audio)
        cs = ConditionSet(text_features=cs.text_features,
                          audio_features=None if cs.audio_features is None
                          else cs.audio_features[:length],
                          trajectory=cs.trajectory[:frames])
        result = generate(model, cs, length, decode=cfg.generator.decode, rng=rng)
        gen = tokenizer.detokenize(result_to_grid(result, tokenizer.config.rfsq))
        real_feats.append(extractor.motion_features(target.features())[0])
        gen_feats.append(extractor.motion_features(gen.features())[0])
        text_feats.append(extractor.text_features(
            load_condition_features(manifest.path(e.text), "text"))[0])
        gen_trajs.append(gen.root_translation)
        tgt_trajs.append(target.root_translation)
        mpjpes.append(mpjpe(gen, target))
    real = np.stack(real_feats)
    gen = np.stack(gen_feats)
    text = np.stack(text_feats)
    metrics = {
        "fid": fid(GaussianSummary.from_features(real),
                   GaussianSummary.from_features(gen)),
        "diversity_real": diversity(real, rng=np.random.default_rng(0)),
        "diversity_gen": diversity(gen, rng=np.random.default_rng(0)),
        "mm_dist": mm_dist(gen, text),
        "mpjpe_mm": float(np.mean(mpjpes)),
    }
    metrics.update(trajectory_errors(gen_trajs, tgt_trajs))
    if len(manifest.entries) >= 32:
        rp = r_precision(gen, text, rng=np.random.default_rng(0))
        metrics.update({f"r_precision@{k}": v for k, v in rp.items()})
    metrics["extractor_version"] = extractor.version
    return metrics


def _format_report(metrics: dict) -> str:
    width = max(len(k) for k in metrics)
    lines = ["metrics report"]
    for k in sorted(metrics):
        v = metrics[k]
        v_txt = f"{v:.6f}" if isinstance(v, float) else str(v)
        lines.append(f"{k:<{width}}  {v_txt}")
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    manifest = _manifest(_data_dir(args))
    tokenizer = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint",
                                        "train-tokenizer"))
    model = load_generator(_require(args.generator, "generator checkpoint",
                                    "train-gen"))
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        metrics = _evaluate_metrics(cfg, manifest, tokenizer, model)
        with open(out / "metrics.json", "w") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
        (out / "metrics_report.txt").write_text(_format_report(metrics) + "\n")
        _log(f"metrics written -> {out / 'metrics_report.txt'}")
    return 0


def cmd_ablate_decoding(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed)
    manifest = _manifest(_data_dir(args))
    tokenizer = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint",
                                        "train-tokenizer"))
    with output_dir(args.out) as out:
        write_resolved_config(cfg, out)
        if args.generator is not None:
            model = load_generator(_require(args.generator, "generator checkpoint",
                                            "train-gen"))
        else:
            model, _ = train_generator(manifest, tokenizer, cfg.generator,
                                       curriculum=cfg.curriculum, log=sys.stderr)
            save_generator(model, out / "generator.ckpt")
        entry = manifest.entries[0]
        length = min(cfg.generate_length,
                     entry.frames // tokenizer.config.downsample)
        target = read_motion(manifest.path(entry.motion)).slice(
            0, length * tokenizer.config.downsample)
        cs = conditions_for_entry(manifest, entry, use_audio=False,
                                  use_trajectory=False)
        rows = []
        for strategy in STRATEGIES:
            decode = replace(cfg.generator.decode, strategy=strategy)
            result = generate(model, cs, length, decode=decode,
                              rng=np.random.default_rng(cfg.seed or 0))
            gen = tokenizer.detokenize(result_to_grid(result,
                                                      tokenizer.config.rfsq))
            rows.append({"strategy": strategy,
                         "backbone_passes": result.backbone_passes,
                         "mpjpe_mm": mpjpe(gen, target)})
        lines = ["decoding strategy comparison",
                 f"{'strategy':<14}{'passes':>8}{'mpjpe_mm':>12}"]
        for r in rows:
            lines.append(f"{r['strategy']:<14}{r['backbone_passes']:>8}"
                         f"{r['mpjpe_mm']:>12.2f}")
        (out / "ablation.txt").write_text("\n".join(lines) + "\n")
        with open(out / "ablation.json", "w") as fh:
            json.dump(rows, fh, indent=2)
        _log("\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motok",
        description="Motion tokenization / generation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, **needs):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None,
                       help="global seed overriding every section seed")
        p.add_argument("--out", required=True, help="output directory")
        if needs.get("data"):
            p.add_argument("--data", default=None,
                           help=f"dataset directory (default ${DATA_ROOT_ENV})")
        if needs.get("tokenizer"):
            p.add_argument("--tokenizer", required=True,
                           help="tokenizer checkpoint path")
        if needs.get("generator"):
            p.add_argument("--generator", required=needs["generator"] == "required",
                           default=None, help="generator checkpoint path")
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth, "synthesize the procedural dataset")
    add("curate", cmd_curate, "run curation filters over a dataset", data=True)
    add("train-tokenizer", cmd_train_tokenizer, "train the motion tokenizer",
        data=True)
    add("tokenize", cmd_tokenize, "tokenize every dataset entry", data=True,
        tokenizer=True)
    p = add("train-gen", cmd_train_gen, "train the masked token generator",
            data=True, tokenizer=True)
    p.add_argument("--init", default=None,
                   help="generator checkpoint to continue from (stage curricula)")
    p = add("generate", cmd_generate, "generate motion from condition files",
            tokenizer=True, generator="required")
    p.add_argument("--text", default=None, help="text condition feature file")
    p.add_argument("--audio", default=None, help="audio condition feature file")
    p.add_argument("--traj", default=None, help="trajectory condition file")
    p.add_argument("--length", type=int, default=None, help="length in tokens")
    add("evaluate", cmd_evaluate, "generate per entry and compute metrics",
        data=True, tokenizer=True, generator="required")
    add("ablate-decoding", cmd_ablate_decoding,
        "compare decoding strategies on one trained model", data=True,
        tokenizer=True, generator="optional")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
