#!/usr/bin/env python3
"""Rerun the full pipeline at several training sizes (fixed seeds).

Each size point is an independent pretrain-and-detect run over the same
generated pool, so the table shows how detection quality scales with the
amount of normal training data.
"""

from logsentinel import (DetectorConfig, SyntheticSpec, TrainConfig,
                         generate_synthetic, parallel_chains_grammar,
                         sweep_training_size)
from logsentinel.evaluation import PipelineParams

grammar = parallel_chains_grammar()
spec = SyntheticSpec(grammar, n_normal=900, n_anomalous=80, seed=7, min_len=4)
sequences = generate_synthetic(spec)

params = PipelineParams(
    n_train=0,  # filled per size point
    train=TrainConfig(lr=1e-4, batch_size=16, epochs=6, seed=8),
    detector=DetectorConfig(top_k_ratio=0.5),
    model_overrides=dict(n_layers=4, n_heads=4, d_model=32, max_len=64, dropout=0.1),
    seed=8,
)

sizes = [50, 150, 400, 800]
points = sweep_training_size(sequences, sizes, params)

print(f"{'train size':>10} {'precision':>10} {'recall':>8} {'f1':>8}")
for point in points:
    r = point.report
    print(f"{int(point.value):>10} {r.precision:>10.3f} {r.recall:>8.3f} {r.f1:>8.3f}")
