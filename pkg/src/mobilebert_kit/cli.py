"""Command-line entry point: ``mobilebert-kit <command> ...``.

Exit codes: 0 success, 2 usage or configuration problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import archive
from .config import ModelConfig, count_params, preset, preset_names
from .data import Corpus, generate_corpus
from .efficiency import bench_op_variants, quantize_model
from .errors import KitError, NumericError
from .model import build, forward, load_model, save_model
from .rng import derive
from .training import (
    STRATEGIES,
    Stage,
    StagePlan,
    TrainConfig,
    copy_embedding_and_classifier,
    eval_batches,
    majority_baseline,
    mlm_accuracy,
    plan,
    pretrain_teacher,
    run,
    write_history_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(KitError):
    """Bad or missing command-line input."""


# ---------------------------------------------------------------------------
# helpers


def _model_config(args, preset_attr="preset", config_attr="config") -> ModelConfig:
    name, path = getattr(args, preset_attr, None), getattr(args, config_attr, None)
    if name and path:
        raise UsageError(f"give either --{preset_attr.replace('_', '-')} or --{config_attr.replace('_', '-')}, not both")
    cfg = ModelConfig.load(path) if path else preset(name) if name else None
    if cfg is None:
        raise UsageError(f"one of --{preset_attr.replace('_', '-')} / --{config_attr.replace('_', '-')} is required")
    cfg.validate()
    return cfg


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.train_config) if args.train_config else TrainConfig()
    overrides = {}
    for key in ("seed", "strategy", "kt_steps", "pd_steps", "teacher_steps", "batch_size", "seq_len", "lr", "pd_lr"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return cfg.replace(**overrides)


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _corpus(args, cfg: TrainConfig, vocab_size: int) -> Corpus:
    if getattr(args, "corpus", None):
        corpus = Corpus.load(_existing(args.corpus, "corpus"))
        if corpus.vocab_size != vocab_size:
            raise UsageError(f"corpus vocabulary {corpus.vocab_size} != model vocabulary {vocab_size}")
        return corpus
    return generate_corpus(derive(cfg.seed, "corpus"), vocab_size, cfg.corpus_docs)


def _hash_inputs(command: str, resolved: dict, files: list[Path]) -> str:
    h = hashlib.sha256()
    h.update(command.encode())
    h.update(json.dumps(resolved, sort_keys=True).encode())
    for f in files:
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, resolved: dict, seed: int, inputs: list[Path], outputs: list[Path]):
    manifest = {
        "command": command,
        "config": resolved,
        "seed": seed,
        "input_hash": _hash_inputs(command, resolved, inputs),
        "inputs": [str(p) for p in inputs],
        "outputs": sorted(p.name for p in outputs),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stage_summary(history) -> list[str]:
    lines, seen = [], {}
    for row in history:
        seen.setdefault(row.stage, []).append(row.loss)
    for stage, losses in seen.items():
        lines.append(f"stage {stage}: {len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return lines


# ---------------------------------------------------------------------------
# commands


def cmd_params(args) -> int:
    cfg = _model_config(args)
    report = count_params(cfg)
    print(report.table())
    print(f"total {report.total:,}")
    print(f"backbone {report.backbone:,} ({report.backbone / 1e6:.1f}M)")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _model_config(args)
    tcfg = _train_config(args)
    corpus = _corpus(args, tcfg, cfg.vocab_size)
    out = _out_dir(args.out)
    result = pretrain_teacher(cfg, corpus, tcfg.teacher_steps, tcfg)
    ckpt, hist, corp = out / "teacher.tbk", out / "history.csv", out / "corpus.txt"
    save_model(result.model, ckpt)
    write_history_csv(result.history, hist)
    corpus.save(corp)
    if result.history:
        print(f"teacher loss {result.history[0].loss:.4f} -> {result.history[-1].loss:.4f}")
    resolved = {"model": cfg.to_dict(), "train": tcfg.to_dict()}
    inputs = [Path(p) for p in (args.config, args.train_config, args.corpus) if p]
    _write_manifest(out, "train-teacher", resolved, tcfg.seed, inputs, [ckpt, hist, corp])
    return EXIT_OK


def _run_and_save(args, command, planned, teacher, student, corpus, tcfg, inputs, extra=None) -> int:
    out = _out_dir(args.out)
    result = run(planned, teacher, student, corpus, tcfg.weights, tcfg.seed, tcfg, pipeline=args.pipeline)
    ckpt, hist = out / "student.tbk", out / "history.csv"
    save_model(result.model, ckpt)
    write_history_csv(result.history, hist)
    for line in _stage_summary(result.history):
        print(line)
    ev = eval_batches(corpus, tcfg, tcfg.seed, 4)
    print(f"masked-token accuracy {mlm_accuracy(result.model, ev):.4f} "
          f"(majority baseline {majority_baseline(corpus, ev):.4f})")
    resolved = {"student": student.config.to_dict(), "train": tcfg.to_dict(),
                "stages": [[s.name, s.loss, s.steps] for s in planned.stages], **(extra or {})}
    _write_manifest(out, command, resolved, tcfg.seed, inputs, [ckpt, hist])
    return EXIT_OK


def _teacher_and_student(args, tcfg):
    if not args.teacher:
        raise UsageError("--teacher checkpoint is required")
    tpath = _existing(args.teacher, "teacher checkpoint")
    teacher = load_model(tpath)
    if getattr(args, "student", None):
        spath = _existing(args.student, "student checkpoint")
        return teacher, load_model(spath), [tpath, spath]
    scfg = _model_config(args, "student_preset", "student_config")
    if args.layers is not None:
        scfg = scfg.replace(num_layers=args.layers)
        scfg.validate()
    student = build(scfg, derive(tcfg.seed, "init"))
    copy_embedding_and_classifier(teacher, student)
    return teacher, student, [tpath] + ([Path(args.student_config)] if args.student_config else [])


def cmd_transfer(args) -> int:
    tcfg = _train_config(args)
    teacher, student, inputs = _teacher_and_student(args, tcfg)
    corpus = _corpus(args, tcfg, teacher.config.vocab_size)
    planned = plan(tcfg.strategy, student.config.num_layers, tcfg.kt_steps, tcfg.pd_steps, args.soft_freeze
                   if args.soft_freeze is not None else tcfg.soft_freeze)
    return _run_and_save(args, "transfer", planned, teacher, student, corpus, tcfg, inputs)


def cmd_distill(args) -> int:
    tcfg = _train_config(args)
    teacher, student, inputs = _teacher_and_student(args, tcfg)
    corpus = _corpus(args, tcfg, teacher.config.vocab_size)
    planned = StagePlan("distill", student.config.num_layers,
                        (Stage("pd", "pd", (), (("", 1.0),), tcfg.pd_steps),))
    return _run_and_save(args, "distill", planned, teacher, student, corpus, tcfg, inputs)


def cmd_bench(args) -> int:
    cfg = _model_config(args)
    report = bench_op_variants(cfg, args.seq_len, args.repeats, seed=args.seed)
    out = _out_dir(args.out)
    csv_path = out / "bench.csv"
    report.write_csv(csv_path)
    for r in report.rows:
        print(f"{r.variant:15s} median {r.median_s * 1e3:9.3f} ms  flops {r.flops:,}")
    print(f"ordering holds: {report.ordering_holds()}")
    resolved = {"model": cfg.to_dict(), "seq_len": args.seq_len, "repeats": args.repeats}
    inputs = [Path(args.config)] if args.config else []
    _write_manifest(out, "bench", resolved, args.seed, inputs, [csv_path])
    return EXIT_OK


def cmd_quantize(args) -> int:
    path = _existing(args.checkpoint, "checkpoint")
    model = load_model(path)
    qmodel, size = quantize_model(model)
    out = _out_dir(args.out)
    qpath = out / "quantized.tbk"
    qmodel.save(qpath)
    print(f"size ratio {size.ratio:.3f} ({size.float32_bytes:,} float32 bytes -> {size.int8_bytes:,} int8 bytes)")
    if args.corpus:
        corpus = Corpus.load(_existing(args.corpus, "corpus"))
        tcfg = TrainConfig(seed=args.seed)
        ev = eval_batches(corpus, tcfg.replace(seq_len=min(tcfg.seq_len, model.config.max_positions)), args.seed, 4)
        before, after = mlm_accuracy(model, ev), mlm_accuracy(qmodel.dequantize(), ev)
        print(f"masked-token accuracy {before:.4f} -> {after:.4f}")
    _write_manifest(out, "quantize", {"ratio": round(size.ratio, 6)}, args.seed,
                    [path] + ([Path(args.corpus)] if args.corpus else []), [qpath])
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    path = _existing(args.checkpoint, "checkpoint")
    model = load_model(path)
    if args.tokens:
        tokens = np.array([int(t) for t in args.tokens.replace(",", " ").split()], dtype=np.int64)
    else:
        tokens = np.random.default_rng(derive(args.seed, "data")).integers(5, model.config.vocab_size,
                                                                           size=args.seq_len)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise UsageError(f"token ids must lie in [0, {model.config.vocab_size})")
    out = forward(model, tokens, heads=False)
    entries = {"tokens": tokens}
    entries.update({f"layers.{i}.attention": a.data for i, a in enumerate(out.trace.attentions)})
    dest = _out_dir(args.out)
    apath = dest / "attention.tbk"
    archive.save(apath, entries)
    print(f"wrote {len(out.trace.attentions)} attention tensors of shape {out.trace.attentions[0].shape}")
    _write_manifest(dest, "dump-attention", {"tokens": tokens.tolist()}, args.seed, [path], [apath])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_args(p):
    p.add_argument("--preset", choices=preset_names(), help="named model preset")
    p.add_argument("--config", help="model config JSON")


def _add_train_args(p):
    p.add_argument("--train-config", help="training config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--pd-lr", type=float, help="learning rate of the distillation stage (default: --lr)")
    p.add_argument("--corpus", help="corpus text file (default: generate from the seed)")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mobilebert-kit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="print the parameter breakdown of a model config")
    _add_model_args(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train-teacher", help="pre-train a teacher with MLM + NSP")
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--steps", dest="teacher_steps", type=int)
    p.set_defaults(func=cmd_train_teacher)

    for name, func in (("transfer", cmd_transfer), ("distill", cmd_distill)):
        p = sub.add_parser(name, help="layer-wise knowledge transfer then distillation" if name == "transfer"
                           else "pre-training distillation only")
        _add_train_args(p)
        p.add_argument("--teacher", help="teacher checkpoint")
        p.add_argument("--student", help="student checkpoint to continue from")
        p.add_argument("--student-preset", choices=preset_names())
        p.add_argument("--student-config")
        p.add_argument("--layers", type=int, help="override the student layer count")
        p.add_argument("--pd-steps", type=int)
        p.add_argument("--pipeline", action="store_true", help="overlap teacher and student computation")
        if name == "transfer":
            p.add_argument("--strategy", choices=STRATEGIES)
            p.add_argument("--kt-steps", type=int)
            p.add_argument("--soft-freeze", type=float, help="learning-rate multiplier for lower layers")
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time the four norm/activation variants")
    _add_model_args(p)
    p.add_argument("--seq-len", type=int, default=128)
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("quantize", help="int8 weight-only quantization of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="corpus for a before/after accuracy check")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("dump-attention", help="write per-layer attention maps for one input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", help="space- or comma-separated token ids")
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (KitError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
