"""``smplgait`` command-line entry point.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 data error (missing/invalid files or manifests), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import config as config_mod
from .core import read_manifest, validate_manifest
from .data import load_samples
from .errors import ConfigError, DataError, SmplGaitError
from .evaluation import (
    EmbeddingSet, embed_samples, evaluate_embeddings, write_report,
)
from .model import load_checkpoint
from .synth import generate_dataset, make_confounded_split
from .trainer import Trainer

log = logging.getLogger("smplgait")

SWEEP_FIELDS = ("parameter", "value", "rank1", "rank5", "mAP", "mINP", "output")


def parse_sweep(text, kind=int, default_step=None):
    """'10..50' / '10..50:5' / '10,20,30' / '30' -> list of values."""
    try:
        if ".." in text:
            rng, _, step = text.partition(":")
            lo, hi = (kind(x) for x in rng.split(".."))
            step = kind(step) if step else (default_step or lo)
            if step <= 0 or hi < lo:
                raise ValueError
            out, v, i = [], lo, 0
            while v <= hi + (1e-9 if kind is float else 0):
                out.append(round(v, 10) if kind is float else v)
                i += 1
                v = lo + i * step
            return out
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse sweep {text!r}") from None


def parse_input_size(text):
    """'88x128' (width x height) -> {'target_height': 128, 'target_width': 88}."""
    try:
        w, h = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"input size must look like 88x128 (WxH), got {text!r}") from None
    return {"target_height": h, "target_width": w}


def _overrides(args) -> dict:
    over = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        config_mod.set_dotted(over, key.strip(), config_mod.parse_value(value))
    if getattr(args, "seed", None) is not None:
        config_mod.set_dotted(over, "train.seed", args.seed)
        config_mod.set_dotted(over, "synth.seed", args.seed)
        config_mod.set_dotted(over, "eval.seed", args.seed)
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    if getattr(args, "input_size", None):
        over.setdefault("preprocess", {}).update(parse_input_size(args.input_size))
    if getattr(args, "ablation", None) == "no3d":
        config_mod.set_dotted(over, "model.enable_3d_branch", False)
    return over


def resolve_config(args, extra=None) -> config_mod.RunConfig:
    over = config_mod.merge(_overrides(args), extra or {})
    return config_mod.load_run_config(args.config, over)


def _ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    return path


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    make = make_confounded_split if args.confounded else generate_dataset
    manifest = make(cfg.synth, out, input_size=cfg.preprocess.size, threads=cfg.threads)
    cfg.dump(out / "config.json")
    print(f"wrote {len(manifest)} sequences to {out / 'manifest.json'}")
    return 0


def _evaluate_model(model, manifest, cfg, out_dir):
    query = manifest.select(split="query")
    gallery = manifest.select(split="gallery")
    if not len(query) or not len(gallery):
        return None
    q = embed_samples(model, load_samples(query, cfg.preprocess, cfg.eval.max_frames, cfg.threads),
                      cfg.eval.test_frac, cfg.eval.seed)
    g = embed_samples(model, load_samples(gallery, cfg.preprocess, cfg.eval.max_frames, cfg.threads),
                      cfg.eval.test_frac, cfg.eval.seed + 1)
    report = evaluate_embeddings(q, g, cfg.eval.exclude_same_camera)
    write_report(report, out_dir)
    return report


def _train_once(cfg, manifest, out_dir, subjects=None, resume=None, evaluate=False):
    out_dir = _ensure_dir(out_dir)
    cfg.dump(out_dir / "config.json")
    train_split = manifest.select(split="train", subjects=subjects)
    samples = load_samples(train_split, cfg.preprocess, threads=cfg.threads)
    if resume:
        trainer = Trainer.resume(resume, samples, out_dir=out_dir, train_cfg=cfg.train)
    else:
        trainer = Trainer(cfg.model, cfg.train, cfg.loss, samples, out_dir=out_dir)
    trainer.run(log_every=50)
    report = None
    if evaluate:
        trainer.model.eval()
        report = _evaluate_model(trainer.model, manifest, cfg, out_dir / "eval")
    return trainer, report


def _write_sweep(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def _sweep_row(param, value, report, out):
    nan = float("nan")
    return {
        "parameter": param, "value": value,
        "rank1": report.rank1 if report else nan, "rank5": report.rank5 if report else nan,
        "mAP": report.mAP if report else nan, "mINP": report.mINP if report else nan,
        "output": str(out),
    }


def cmd_train(args) -> int:
    manifest = read_manifest(args.data)
    frames = parse_sweep(args.frames, int, 10) if args.frames else None
    ids = parse_sweep(args.ids, int, 500) if args.ids else None
    extra = {}
    if frames and len(frames) == 1:
        config_mod.set_dotted(extra, "train.frames", frames[0])
        frames = None
    cfg = resolve_config(args, extra)
    out = _ensure_dir(args.out)
    cfg.dump(out / "config.json")

    if frames is None and ids is None:
        _train_once(cfg, manifest, out, resume=args.resume, evaluate=args.eval)
        print(f"training finished; checkpoints in {out}")
        return 0

    rows = []
    train_subjects = manifest.subjects("train")
    if frames:
        for n in frames:
            run_cfg = replace(cfg, train=replace(cfg.train, frames=n))
            run_out = out / f"frames_{n:03d}"
            _, report = _train_once(run_cfg, manifest, run_out, evaluate=True)
            rows.append(_sweep_row("frames", n, report, run_out))
    if ids:
        for n in ids:
            if n > len(train_subjects):
                raise ConfigError(f"--ids {n} exceeds the {len(train_subjects)} training subjects")
            run_out = out / f"ids_{n:05d}"
            _, report = _train_once(cfg, manifest, run_out, subjects=train_subjects[:n], evaluate=True)
            rows.append(_sweep_row("ids", n, report, run_out))
    _write_sweep(out / "sweep.csv", rows)
    print(f"sweep finished; results in {out / 'sweep.csv'}")
    return 0


def _load_split(path, split, cfg):
    manifest = read_manifest(path).select(split=split)
    if not len(manifest):
        raise DataError(f"{path}: no sequences tagged {split!r}")
    return load_samples(manifest, cfg.preprocess, max_frames=cfg.eval.max_frames, threads=cfg.threads)


def _model_and_config(args):
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    # the checkpoint defines the architecture
    extra = {"model": {k: v for k, v in model.cfg.to_dict().items() if k != "input_size"}}
    h, w = model.cfg.input_size
    if not getattr(args, "input_size", None):
        extra["preprocess"] = {"target_height": h, "target_width": w}
    cfg = resolve_config(args, extra)
    if cfg.preprocess.size != tuple(model.cfg.input_size):
        raise ConfigError(f"checkpoint expects input {w}x{h} (WxH), config gives "
                          f"{cfg.preprocess.target_width}x{cfg.preprocess.target_height}")
    return model, cfg


def cmd_evaluate(args) -> int:
    fracs = parse_sweep(args.test_frac, float, 0.1) if args.test_frac else None
    out = _ensure_dir(args.out)
    if args.query_embeddings:
        cfg = resolve_config(args)
        cfg.dump(out / "config.json")
        q = EmbeddingSet.load(args.query_embeddings)
        g = EmbeddingSet.load(args.gallery_embeddings or args.query_embeddings)
        report = evaluate_embeddings(q, g, cfg.eval.exclude_same_camera)
        write_report(report, out)
        print(_summary_line(report))
        return 0

    if not args.checkpoint or not args.query:
        raise ConfigError("evaluate needs --checkpoint and --query (or --query-embeddings)")
    model, cfg = _model_and_config(args)
    q_samples = _load_split(args.query, "query", cfg)
    g_samples = _load_split(args.gallery or args.query, "gallery", cfg)
    fracs = fracs or [cfg.eval.test_frac]
    rows = []
    for frac in fracs:
        run_cfg = replace(cfg, eval=replace(cfg.eval, test_frac=frac))
        run_out = out if len(fracs) == 1 else _ensure_dir(out / f"frac_{frac:.2f}")
        run_cfg.dump(run_out / "config.json")
        q = embed_samples(model, q_samples, frac, cfg.eval.seed)
        g = embed_samples(model, g_samples, frac, cfg.eval.seed + 1)
        report = evaluate_embeddings(q, g, cfg.eval.exclude_same_camera)
        write_report(report, run_out)
        rows.append(_sweep_row("test_frac", frac, report, run_out))
        print(f"test_frac={frac:g}: {_summary_line(report)}")
    if args.emit_plots or len(fracs) > 1:
        _write_sweep(out / "sweep.csv", rows)
    return 0


def _summary_line(report):
    return (f"rank1={report.rank1:.4f} rank5={report.rank5:.4f} mAP={report.mAP:.4f} "
            f"mINP={report.mINP:.4f} (queries={report.num_evaluated}, skipped={len(report.skipped)})")


def cmd_embed(args) -> int:
    model, cfg = _model_and_config(args)
    manifest = read_manifest(args.manifest)
    if args.split:
        manifest = manifest.select(split=args.split)
    if not len(manifest):
        raise DataError(f"{args.manifest}: no sequences to embed")
    samples = load_samples(manifest, cfg.preprocess, max_frames=cfg.eval.max_frames, threads=cfg.threads)
    seed = cfg.eval.seed + (1 if args.split == "gallery" else 0)
    emb = embed_samples(model, samples, cfg.eval.test_frac, seed)
    out = Path(args.out)
    _ensure_dir(out.parent)
    emb.save(out)
    cfg.dump(out.with_suffix(".config.json"))
    print(f"wrote {len(samples)} embeddings to {out}")
    return 0


def cmd_validate(args) -> int:
    manifest = read_manifest(args.manifest)
    problems = validate_manifest(manifest)
    for p in problems:
        print(p)
    print(f"{len(problems)} problem(s) in {len(manifest)} sequences")
    return 3 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smplgait", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. train.max_iters=300")
        p.add_argument("--threads", type=int, help="cap on loader/generator worker threads")
        p.add_argument("--input-size", help="silhouette size WxH, e.g. 88x128 or 44x64")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--confounded", action="store_true",
                   help="query and gallery of each test subject come from different view clusters")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest's train split")
    common(p)
    p.add_argument("--data", required=True, help="manifest file or dataset root")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=["no3d"], help="no3d: silhouette-only model")
    p.add_argument("--frames", help="frames per training sequence, or a sweep like 10..50")
    p.add_argument("--ids", help="train-subject counts to sweep, e.g. 500,1000,1500")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--eval", action="store_true", help="evaluate on the manifest's query/gallery splits")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="retrieval metrics for a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--query", help="manifest whose 'query' split is used")
    p.add_argument("--gallery", help="manifest whose 'gallery' split is used (default: --query)")
    p.add_argument("--query-embeddings", help="evaluate precomputed embeddings (.npz)")
    p.add_argument("--gallery-embeddings")
    p.add_argument("--out", required=True)
    p.add_argument("--test-frac", help="fraction of test frames, or a sweep like 0.1..1.0")
    p.add_argument("--emit-plots", action="store_true", help="write sweep.csv for plotting")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("embed", help="write one embedding per sequence")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "query", "gallery"])
    p.add_argument("--out", required=True, help="output .npz")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("validate", help="check a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    threads = getattr(args, "threads", None)
    if threads:
        torch.set_num_threads(threads)
    try:
        return args.func(args)
    except SmplGaitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: not found", file=sys.stderr)
        return DataError.exit_code
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
