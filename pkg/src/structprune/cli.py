"""Command-line entry point: ``structprune <verb> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .benchmark import benchmark_latency
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import generate_synthetic_task, load_jsonl, write_task
from .errors import ConfigError
from .pipeline import PipelineConfig, PruneReport, StageError, _choose_mask, emit_report, run_pipeline
from .surgery import prune_attention, prune_feedforward, retention_table
from .training import distill, retrain, train_task
from .transformer import build_model, count_flops, count_params, evaluate

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
OBJECTIVES = {"ce": "cross_entropy", "distill": "distillation"}

log = logging.getLogger("structprune")


def _seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def load_config(path, overrides=None):
    """PipelineConfig from an optional YAML file plus flag overrides."""
    raw = {}
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", field="config") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping", field="config")
    cfg = PipelineConfig.from_dict(raw) if raw else PipelineConfig()
    return cfg.merged(overrides or {})


def _datasets(args, cfg):
    if getattr(args, "data", None):
        root = Path(args.data)
        return load_jsonl(root / "train.jsonl"), load_jsonl(root / "dev.jsonl")
    return generate_synthetic_task(cfg.task)


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_config(args.config, {
        "task.seed": args.seed, "task.n_train": args.n_train, "task.n_dev": args.n_dev,
        "task.seq_len": args.seq_len, "task.vocab_size": args.vocab_size,
        "task.no_answer_rate": args.no_answer_rate, "task.noise_rate": args.noise_rate,
    })  # fmt: skip
    train, dev = generate_synthetic_task(cfg.task)
    paths = write_task(train, dev, args.out)
    _print({"train": str(paths[0]), "dev": str(paths[1]), "n_train": len(train), "n_dev": len(dev)})


def cmd_train(args):
    cfg = load_config(args.config, {"train.seed": args.seed, "train.epochs": args.epochs, "train.learning_rate": args.lr})
    train, dev = _datasets(args, cfg)
    model, history = train_task(build_model(cfg.model, cfg.train.seed), train, cfg.train)
    save_checkpoint(args.out, model)
    if args.history:
        history.to_csv(args.history)
    _print({"checkpoint": str(args.out), "dev": evaluate(model, dev)})


def cmd_prune(args):
    cfg = load_config(args.config, _pipeline_overrides(args))
    base = load_checkpoint(args.checkpoint).model
    train, dev = _datasets(args, cfg)
    if cfg.method == "l0" and (cfg.lambda_attn is None or cfg.lambda_ff is None):
        raise ConfigError("prune with method=l0 needs --lambda-attn and --lambda-ff", field="lambda_attn")
    lambdas = {"attn": cfg.lambda_attn, "ff": cfg.lambda_ff}
    mask = _choose_mask(cfg, base, train, cfg.seeds[0], lambdas)
    pruned = base
    if mask.attn is not None:
        pruned = prune_attention(pruned, mask.attn)
    if mask.ff is not None:
        pruned = prune_feedforward(pruned, mask.ff)
    save_checkpoint(args.out, pruned, mask=mask)
    _print({
        "checkpoint": str(args.out), "per_layer": retention_table(base, pruned),
        "params_before": count_params(base), "params_after": count_params(pruned),
        "dev_before": evaluate(base, dev), "dev_after": evaluate(pruned, dev),
    })  # fmt: skip


def cmd_retrain(args):
    cfg = load_config(args.config, {"continuation_train.seed": args.seed, "continuation_train.epochs": args.epochs})
    ck = load_checkpoint(args.checkpoint)
    train, dev = _datasets(args, cfg)
    model, _ = retrain(ck.model, train, cfg.continuation_train)
    save_checkpoint(args.out, model, mask=ck.mask)
    _print({"checkpoint": str(args.out), "dev": evaluate(model, dev)})


def cmd_distill(args):
    cfg = load_config(args.config, {"continuation_train.seed": args.seed, "continuation_train.epochs": args.epochs})
    student = load_checkpoint(args.checkpoint)
    teacher = load_checkpoint(args.teacher).model
    train, dev = _datasets(args, cfg)
    model, _ = distill(student.model, teacher, train, cfg.continuation_train.replace(objective="distillation"))
    save_checkpoint(args.out, model, mask=student.mask)
    _print({"checkpoint": str(args.out), "dev": evaluate(model, dev)})


def cmd_benchmark(args):
    model = load_checkpoint(args.checkpoint).model
    tokens = load_jsonl(Path(args.data) / "dev.jsonl").token_ids if args.data else None
    res = benchmark_latency(
        model, batch_size=args.batch_size, seq_len=args.seq_len, repeats=args.repeats,
        n_examples=args.n_examples, tokens=tokens,
    )  # fmt: skip
    seq = tokens.shape[1] if tokens is not None else (args.seq_len or model.config.max_seq_len)
    _print({**res.to_dict(), "params": count_params(model), "flops_per_example": count_flops(model, seq)})


def _pipeline_overrides(args):
    return {
        "method": args.method, "lambda_attn": args.lambda_attn, "lambda_ff": args.lambda_ff,
        "keep_fraction": args.keep_fraction, "bernoulli_p": args.bernoulli_p,
        "gate_objective": OBJECTIVES.get(args.gate_objective) if args.gate_objective else None,
        "continuation": args.continuation, "round": args.round, "seeds": args.seeds,
        "gate_data_fraction": args.gate_data_fraction,
        "holdout_split": True if args.holdout_split else None,
        "benchmark": False if args.no_benchmark else None,
    }  # fmt: skip


def cmd_pipeline(args):
    overrides = _pipeline_overrides(args)
    overrides["out"] = args.out
    cfg = load_config(args.config, overrides)
    report = run_pipeline(cfg)
    _print({"out": cfg.out, "aggregate": report.to_json_dict()["aggregate"], "warnings": report.warnings})


def cmd_report(args):
    try:
        doc = json.loads(Path(args.input).read_text())
        report = PruneReport.from_json_dict(doc)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read report {args.input}: {exc}", field="input") from exc
    paths = emit_report(report, args.out, formats=tuple(args.format.split(",")))
    _print({"written": [str(p) for p in paths]})


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_pipeline_flags(p):
    p.add_argument("--method", choices=("random", "gain", "l0"))
    p.add_argument("--lambda-attn", type=float)
    p.add_argument("--lambda-ff", type=float)
    p.add_argument("--keep-fraction", type=float)
    p.add_argument("--bernoulli-p", type=float)
    p.add_argument("--gate-objective", choices=sorted(OBJECTIVES))
    p.add_argument("--continuation", choices=("none", "retrain", "distill"))
    p.add_argument("--round", type=int)
    p.add_argument("--seeds", type=_seeds)
    p.add_argument("--gate-data-fraction", type=float)
    p.add_argument("--holdout-split", action="store_true", help="train on 90%% of train, evaluate on the other 10%%")
    p.add_argument("--no-benchmark", action="store_true", help="skip timing (report becomes deterministic)")


def build_parser():
    parser = argparse.ArgumentParser(prog="structprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/dev JSON-lines files")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    for flag, typ in (("--seed", int), ("--n-train", int), ("--n-dev", int), ("--seq-len", int),
                      ("--vocab-size", int), ("--no-answer-rate", float), ("--noise-rate", float)):  # fmt: skip
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a base model and save a checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--data", help="directory with train.jsonl and dev.jsonl")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--history", help="write per-step losses as CSV here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="choose gates for a checkpoint and cut them out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_prune)

    for verb, func, helptext in (("retrain", cmd_retrain, "fine-tune a pruned checkpoint"),
                                 ("distill", cmd_distill, "distill a teacher into a pruned checkpoint")):  # fmt: skip
        p = sub.add_parser(verb, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--data")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=float)
        if verb == "distill":
            p.add_argument("--teacher", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("benchmark", help="time inference passes of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--n-examples", type=int)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("pipeline", help="run the full prune pipeline and write a report")
    p.add_argument("--config")
    p.add_argument("--out")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("report", help="re-emit a saved report.json as JSON and/or CSV tables")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="json,csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error ({exc.field}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure [{exc.stage}]: {exc.cause!r}", file=sys.stderr)
        return EXIT_STAGE
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"stage failure [{args.verb}]: {exc!r}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
