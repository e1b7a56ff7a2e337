"""Run the full pipeline for two seeds and write the report tables.

The same thing from the shell::

    structprune pipeline --config demos/small.yaml --seeds 0,1 --out runs/demo
"""

import sys
from pathlib import Path

import yaml

from structprune import PipelineConfig, emit_report, run_pipeline

here = Path(__file__).parent
cfg = PipelineConfig.from_dict(yaml.safe_load((here / "small.yaml").read_text()))
out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
cfg = cfg.merged({"seeds": [0, 1], "out": str(out)})

report = run_pipeline(cfg)
for row in report.tables()["summary"]:
    print(
        f"seed {row['seed']}: removed {row['pct_attn_removed']:.1f}% heads, {row['pct_ff_removed']:.1f}% ff; "
        f"EM {row['em_before']:.3f} -> {row['em_no_retrain']:.3f} -> {row['em_after']:.3f}; speedup {row['speedup']}"
    )
for line in report.warnings:
    print("note:", line)
print("tables written to", out)
