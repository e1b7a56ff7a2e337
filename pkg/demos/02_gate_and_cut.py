"""Train a small span model, score its gates three ways, and cut it down.

Takes about a minute and a half on one core.
"""

import numpy as np

from structprune import (
    GateTrainConfig,
    PenaltyWeights,
    SyntheticTaskConfig,
    TrainConfig,
    TransformerConfig,
    build_model,
    count_params,
    evaluate,
    generate_synthetic_task,
    prune,
    train_task,
    verify_equivalence,
)
from structprune import gates as G

task = SyntheticTaskConfig()
train, dev = generate_synthetic_task(task)
print("example tokens:", train.token_ids[0][:12], "... answer span", train.start_targets[0], train.end_targets[0])

model, history = train_task(build_model(TransformerConfig(), seed=0), train, TrainConfig(learning_rate=3e-3, epochs=40))
print("epoch losses:", np.round(history.epoch_means()[::8], 3))
print("base model:", evaluate(model, dev))

# Random: keep each gate with probability 0.5.
random_mask = G.random_gates(model, 0.5, seed=0)

# Gain: mean |dL/dgate| at gate = 1, thresholded globally per family.
scores = G.gain_scores(model, train)
gain_mask = G.threshold_scores(scores, keep_fraction=0.5)

# L0: learn hard-concrete gates against the frozen model, one family at a time.
ga, gf = G.train_gates_l0(model.copy().freeze(), train, PenaltyWeights(lambda_attn=0.01, lambda_ff=0.002), GateTrainConfig())
l0_mask = G.finalize_mask(ga, gf)

for name, mask in (("random", random_mask), ("gain", gain_mask), ("l0", l0_mask)):
    small = prune(model, mask)
    diff = verify_equivalence(model, mask, small, trials=3)
    em = evaluate(small, dev)["span_exact_match"]
    print(
        f"{name:>6}: heads {small.heads_layer} ff {small.ff_layer} "
        f"params {count_params(small)}/{count_params(model)} EM {em:.3f} (gated-vs-cut diff {diff:.1e})"
    )
