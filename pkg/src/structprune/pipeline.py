"""End-to-end prune pipeline: train, choose gates, cut, continue, measure, report."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gates as G
from .benchmark import benchmark_latency
from .checkpoint import load_checkpoint, payload_bytes, save_checkpoint
from .data import SyntheticTaskConfig, generate_synthetic_task, split
from .errors import ConfigError
from .surgery import prune_attention, prune_feedforward, retention_table, round_sizes, verify_equivalence
from .training import TrainConfig, distill, distillation_loss, retrain, train_task
from .transformer import TransformerConfig, build_model, count_flops, count_params, evaluate

logger = logging.getLogger(__name__)

METHODS = ("random", "gain", "l0")
CONTINUATIONS = ("none", "retrain", "distill")
GATE_OBJECTIVES = ("cross_entropy", "distillation")


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    model: TransformerConfig = field(default_factory=TransformerConfig)
    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=3e-3, epochs=40))
    method: str = "l0"
    lambda_attn: float | None = None
    lambda_ff: float | None = None
    keep_fraction: float | None = None
    bernoulli_p: float | None = None
    calibrate: bool = True
    lambda_multiplier: float = 1.0
    calibration_grid: list = field(default_factory=lambda: [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2])
    calibration_target: float = 0.5
    gate: G.GateTrainConfig = field(default_factory=G.GateTrainConfig)
    gate_objective: str = "cross_entropy"
    threshold: float = 0.5
    continuation: str = "none"
    continuation_train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3, epochs=1.0))
    round: int = 1
    seeds: list = field(default_factory=lambda: [0])
    holdout_split: bool = False
    gate_data_fraction: float = 1.0
    benchmark: bool = True
    benchmark_repeats: int = 5
    benchmark_batch_size: int = 1
    base_checkpoint: str | None = None
    out: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}", field="method")
        if self.method == "random" and self.bernoulli_p is None:
            raise ConfigError("method=random needs bernoulli_p", field="bernoulli_p")
        if self.method == "gain" and self.keep_fraction is None:
            raise ConfigError("method=gain needs keep_fraction", field="keep_fraction")
        if self.method == "l0" and not self.calibrate:
            for name in ("lambda_attn", "lambda_ff"):
                if getattr(self, name) is None:
                    raise ConfigError(f"method=l0 needs {name} (or calibrate: true)", field=name)
        for name in ("lambda_attn", "lambda_ff"):
            if getattr(self, name) is not None and getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", field=name)
        if self.continuation not in CONTINUATIONS:
            raise ConfigError(f"continuation must be one of {CONTINUATIONS}", field="continuation")
        if self.gate_objective not in GATE_OBJECTIVES:
            raise ConfigError(f"gate_objective must be one of {GATE_OBJECTIVES}", field="gate_objective")
        if not self.seeds:
            raise ConfigError("at least one seed is required", field="seeds")
        if self.round < 1:
            raise ConfigError("round must be >= 1", field="round")
        if not 0 < self.gate_data_fraction <= 1:
            raise ConfigError("gate_data_fraction must lie in (0, 1]", field="gate_data_fraction")
        if self.model.vocab_size != self.task.vocab_size or self.model.max_seq_len < self.task.seq_len:
            raise ConfigError("model vocab/max_seq_len incompatible with the task", field="model")

    _NESTED = {
        "model": TransformerConfig,
        "task": SyntheticTaskConfig,
        "train": TrainConfig,
        "gate": G.GateTrainConfig,
        "continuation_train": TrainConfig,
    }

    def to_dict(self):
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = asdict(v) if f.name in self._NESTED else (list(v) if isinstance(v, list) else v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}", field=sorted(unknown)[0])
        kwargs = {}
        for key, value in d.items():
            if key in cls._NESTED:
                try:
                    value = cls._NESTED[key](**(value or {}))
                except TypeError as exc:
                    raise ConfigError(f"{key}: {exc}", field=key) from exc
            kwargs[key] = value
        return cls(**kwargs)

    def merged(self, overrides):
        """Copy with top-level or dotted (``train.epochs``) keys replaced."""
        d = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                outer, inner = key.split(".", 1)
                d[outer] = dict(d[outer], **{inner: value})
            else:
                d[key] = value
        return PipelineConfig.from_dict(d)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = [
    "seed", "method", "continuation", "lambda_attn", "lambda_ff", "lambda_ratio_attn", "lambda_ratio_ff",
    "keep_fraction", "bernoulli_p", "pct_attn_removed", "pct_ff_removed",
    "params_before", "params_after", "flops_before", "flops_after", "size_bytes_before", "size_bytes_after",
    "latency_before", "latency_after", "speedup",
    "em_before", "em_no_retrain", "em_after", "loss_before", "loss_no_retrain", "loss_after",
    "max_equivalence_diff",
]  # fmt: skip
PER_LAYER_COLUMNS = [
    "layer", "heads_before", "heads_after", "ff_before", "ff_after", "pct_heads_kept", "pct_ff_kept",
]  # fmt: skip
POINT_COLUMNS = ["label", "seed", "params", "exact_match"]


def _r4(x):
    if isinstance(x, (float, np.floating)):
        return round(float(x), 4)
    if isinstance(x, np.integer):
        return int(x)
    return x


@dataclass
class PruneReport:
    """Measurements for every seed plus medians and spreads.

    ``per_layer`` is the retention table of the median run (by final exact
    match). ``points`` holds accuracy-vs-parameter-count pairs.
    """

    config: dict
    runs: list
    per_layer: list
    points: list
    aggregate: dict
    warnings: list = field(default_factory=list)

    def tables(self):
        summary = [{c: _r4(run.get(c)) for c in SUMMARY_COLUMNS} for run in self.runs]
        per_layer = [{c: _r4(row.get(c)) for c in PER_LAYER_COLUMNS} for row in self.per_layer]
        points = [{c: _r4(p.get(c)) for c in POINT_COLUMNS} for p in self.points]
        return {"summary": summary, "per_layer": per_layer, "accuracy_vs_params": points}

    def to_json_dict(self):
        return {
            "config": self.config,
            "aggregate": {k: {kk: _r4(vv) for kk, vv in v.items()} for k, v in self.aggregate.items()},
            "tables": self.tables(),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json_dict(cls, d):
        t = d["tables"]
        return cls(d["config"], t["summary"], t["per_layer"], t["accuracy_vs_params"], d["aggregate"], d.get("warnings", []))


TABLE_COLUMNS = {"summary": SUMMARY_COLUMNS, "per_layer": PER_LAYER_COLUMNS, "accuracy_vs_params": POINT_COLUMNS}


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def emit_report(report, out_dir, formats=("json", "csv")):
    """Write ``report.json`` and/or one CSV per table; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out / "report.json"
        path.write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")
        written.append(path)
    if "csv" in formats:
        for name, rows in report.tables().items():
            path = out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                cols = TABLE_COLUMNS[name]
                w.writerow(cols)
                for row in rows:
                    w.writerow([_csv_cell(row[c]) for c in cols])
            written.append(path)
    return written


def read_csv_table(path):
    """Parse a table written by ``emit_report`` back into typed values."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if v == "":
                    parsed[k] = None
                    continue
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            rows.append(parsed)
    return rows


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def calibrate_penalty(model, data, family, grid, target_removed=0.5, config=None):
    """Gate-train at each grid value; return the one removing closest to target.

    Returns ``(best_lambda, sweep)`` with ``sweep`` a list of
    ``(lambda, fraction_removed)``.
    """
    frozen = model.copy().freeze()
    sweep = []
    for lam in grid:
        weights = G.PenaltyWeights(**{f"lambda_{family}": lam})
        ga, gf = G.train_gates_l0(frozen, data, weights, config, families=(family,))
        mask = G.finalize_mask(ga, gf)
        kept = mask.popcounts(family)
        total = sum(model.heads_layer) if family == "attn" else sum(model.ff_layer)
        sweep.append((float(lam), 1.0 - sum(kept) / total))
    best = min(sweep, key=lambda t: (abs(t[1] - target_removed), t[0]))
    return best[0], sweep


def _gate_config(cfg, seed):
    d = asdict(cfg.gate)
    d.update(seed=seed, objective=cfg.gate_objective, data_fraction=cfg.gate_data_fraction)
    return G.GateTrainConfig(**d)


def _choose_mask(cfg, base, gate_data, seed, lambdas):
    if cfg.method == "random":
        mask = G.random_gates(base, cfg.bernoulli_p, seed)
        scores = G.random_scores(base, seed)
    elif cfg.method == "gain":
        scores = G.gain_scores(base, gate_data)
        mask = G.threshold_scores(scores, cfg.keep_fraction)
    else:
        families = tuple(f for f in G.FAMILIES if lambdas[f] > 0)
        weights = G.PenaltyWeights(lambdas["attn"], lambdas["ff"])
        frozen = base.copy().freeze()
        ga, gf = G.train_gates_l0(
            frozen, gate_data, weights, _gate_config(cfg, seed), teacher=base, families=families
        )
        mask = G.finalize_mask(ga, gf, cfg.threshold)
        scores = G.l0_scores(ga, gf)
    if cfg.round > 1:
        mask = round_sizes(mask, cfg.round, scores)
    return mask


def _timing(cfg, model, tokens):
    if not cfg.benchmark:
        return None
    return benchmark_latency(
        model, batch_size=cfg.benchmark_batch_size, repeats=cfg.benchmark_repeats, tokens=tokens
    ).median


def _run_seed(cfg, seed, train, dev, lambdas, ratios, stage):
    rec = {
        "seed": seed, "method": cfg.method, "continuation": cfg.continuation,
        "lambda_attn": lambdas["attn"] if cfg.method == "l0" else None,
        "lambda_ff": lambdas["ff"] if cfg.method == "l0" else None,
        "lambda_ratio_attn": ratios["attn"], "lambda_ratio_ff": ratios["ff"],
        "keep_fraction": cfg.keep_fraction if cfg.method == "gain" else None,
        "bernoulli_p": cfg.bernoulli_p if cfg.method == "random" else None,
    }  # fmt: skip

    stage["name"] = "base_model"
    if cfg.base_checkpoint:
        base = load_checkpoint(cfg.base_checkpoint).model
    else:
        base, _ = train_task(build_model(cfg.model, seed), train, cfg.train.replace(seed=seed))

    stage["name"] = "evaluate_base"
    m0 = evaluate(base, dev)

    stage["name"] = "gates"
    mask = _choose_mask(cfg, base, train, seed, lambdas)

    stage["name"] = "surgery"
    pruned = base
    if mask.attn is not None:
        pruned = prune_attention(pruned, mask.attn)
    if mask.ff is not None:
        pruned = prune_feedforward(pruned, mask.ff)
    rec["max_equivalence_diff"] = verify_equivalence(base, mask, pruned, trials=3, seed=seed)

    stage["name"] = "evaluate_pruned"
    m1 = evaluate(pruned, dev)

    stage["name"] = "continuation"
    final = pruned
    cont_cfg = cfg.continuation_train.replace(seed=seed)
    if cfg.continuation == "retrain":
        final, _ = retrain(pruned, train, cont_cfg)
    elif cfg.continuation == "distill":
        final, _ = distill(pruned, base, train, cont_cfg.replace(objective="distillation"))
    m2 = evaluate(final, dev) if cfg.continuation != "none" else m1

    stage["name"] = "benchmark"
    seq = dev.seq_len
    table = retention_table(base, final)
    heads_b = sum(r["heads_before"] for r in table)
    heads_a = sum(r["heads_after"] for r in table)
    ff_b = sum(r["ff_before"] for r in table)
    ff_a = sum(r["ff_after"] for r in table)
    t0 = _timing(cfg, base, dev.token_ids)
    t1 = _timing(cfg, final, dev.token_ids)
    rec.update({
        "pct_attn_removed": 100.0 * (1.0 - heads_a / heads_b),
        "pct_ff_removed": 100.0 * (1.0 - ff_a / ff_b),
        "params_before": count_params(base), "params_after": count_params(final),
        "flops_before": count_flops(base, seq), "flops_after": count_flops(final, seq),
        "size_bytes_before": payload_bytes(base), "size_bytes_after": payload_bytes(final),
        "latency_before": t0, "latency_after": t1,
        "speedup": None if t0 is None else t0 / t1,
        "em_before": m0["span_exact_match"], "em_no_retrain": m1["span_exact_match"],
        "em_after": m2["span_exact_match"],
        "loss_before": m0["mean_loss"], "loss_no_retrain": m1["mean_loss"], "loss_after": m2["mean_loss"],
    })  # fmt: skip
    for row in table:
        row["pct_heads_kept"] = 100.0 * row["heads_after"] / row["heads_before"]
        row["pct_ff_kept"] = 100.0 * row["ff_after"] / row["ff_before"]
    rec["per_layer"] = table
    rec["guard_events"] = [list(e) for e in mask.guard_events]
    return rec, base, final, mask


AGGREGATE_FIELDS = [
    "pct_attn_removed", "pct_ff_removed", "params_after", "flops_after", "size_bytes_after",
    "latency_before", "latency_after", "speedup", "em_before", "em_no_retrain", "em_after",
]  # fmt: skip


def _aggregate(runs):
    agg = {}
    for name in AGGREGATE_FIELDS:
        vals = [r[name] for r in runs if r.get(name) is not None]
        if not vals:
            continue
        agg[name] = {
            "median": float(statistics.median(vals)),
            "spread": float(max(vals) - min(vals)),
            "mean": float(np.mean(vals)),
        }
    return agg


def _median_run(runs):
    order = sorted(range(len(runs)), key=lambda i: (runs[i]["em_after"], runs[i]["seed"]))
    return runs[order[(len(order) - 1) // 2]]


def run_pipeline(cfg):
    """Execute every stage for every seed and return the PruneReport.

    When ``cfg.out`` is set, writes the report there plus checkpoints of the
    median seed's base and final models. On failure a ``FAILED`` marker with
    the stage name is written and ``StageError`` raised.
    """
    stage = {"name": "data"}
    runs, warnings = [], []
    out = Path(cfg.out) if cfg.out else None
    try:
        train, dev = generate_synthetic_task(cfg.task)
        if cfg.holdout_split:
            train, dev = split(train, 0.9, seed=cfg.task.seed)
        lambdas = {"attn": cfg.lambda_attn, "ff": cfg.lambda_ff}
        ratios = {"attn": None, "ff": None}
        if cfg.method == "l0":
            missing = [f for f in G.FAMILIES if lambdas[f] is None]
            if missing:
                stage["name"] = "calibration"
                seed0 = cfg.seeds[0]
                base0, _ = train_task(build_model(cfg.model, seed0), train, cfg.train.replace(seed=seed0))
                for family in missing:
                    lam0, sweep = calibrate_penalty(
                        base0, train, family, cfg.calibration_grid, cfg.calibration_target,
                        _gate_config(cfg, seed0),
                    )  # fmt: skip
                    lambdas[family] = lam0 * cfg.lambda_multiplier
                    ratios[family] = cfg.lambda_multiplier
                    warnings.append(f"calibrated {family} lambda0={lam0:g} sweep={sweep}")
        keep = {}
        for seed in cfg.seeds:
            rec, base, final, mask = _run_seed(cfg, seed, train, dev, lambdas, ratios, stage)
            runs.append(rec)
            keep[seed] = (base, final, mask)
            for fam, layer in rec["guard_events"]:
                warnings.append(f"seed {seed}: {fam} layer {layer} force-retained one unit")
        stage["name"] = "report"
        median = _median_run(runs)
        points = []
        for r in runs:
            points.append({"label": "unpruned", "seed": r["seed"], "params": r["params_before"], "exact_match": r["em_before"]})
            points.append({"label": "pruned", "seed": r["seed"], "params": r["params_after"], "exact_match": r["em_after"]})
        report = PruneReport(
            config=cfg.to_dict(), runs=runs, per_layer=median["per_layer"], points=points,
            aggregate=_aggregate(runs), warnings=warnings,
        )  # fmt: skip
        if out is not None:
            emit_report(report, out)
            base, final, mask = keep[median["seed"]]
            save_checkpoint(out / "base.ckpt", base)
            save_checkpoint(out / "pruned.ckpt", final, mask=mask)
        return report
    except Exception as exc:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "FAILED").write_text(f"stage: {stage['name']}\ncause: {exc!r}\n")
            if runs:
                (out / "partial_runs.json").write_text(json.dumps(runs, indent=2, default=str))
        raise StageError(stage["name"], exc) from exc


__all__ = [
    "PipelineConfig", "PruneReport", "StageError", "run_pipeline", "emit_report", "read_csv_table",
    "calibrate_penalty", "distillation_loss",
]  # fmt: skip
