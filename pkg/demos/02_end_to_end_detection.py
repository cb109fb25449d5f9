#!/usr/bin/env python3
"""Train on normal synthetic sequences, then flag Top-K violations.

Generates a benchmark corpus from a transition grammar (normals plus injected
anomalies with exact labels), pretrains the next-key language model on the
normal training split, and scores the test split with the single-violation
Top-K rule: one observed key outside the model's Top-K set flags the whole
sequence, and UNSEEN keys flag it immediately.

Small scale so it finishes in about a minute; scale n_normal / epochs up for
benchmark-quality numbers.
"""

import numpy as np

from logsentinel import (DetectorConfig, GptModel, ModelConfig, SyntheticSpec,
                         TrainConfig, build_split, detect_batch, generate_synthetic,
                         parallel_chains_grammar, pretrain, score)

grammar = parallel_chains_grammar()
spec = SyntheticSpec(grammar, n_normal=700, n_anomalous=60, seed=1, min_len=4)
sequences = generate_synthetic(spec)
split = build_split(sequences, n_train=500, seed=2)
print(f"corpus: {len(split.train)} train / {len(split.test_normal)} test normal / "
      f"{len(split.test_anomalous)} test anomalous, vocab {split.vocab.size}")

model = GptModel(ModelConfig(vocab_size=split.vocab.size), seed=3)
print(f"model: {model.param_count():,} parameters "
      f"({model.config.n_layers} layers, d={model.config.d_model})")

_, history = pretrain(model, split.train, TrainConfig(lr=1e-4, batch_size=16, epochs=8, seed=3))
print("pretraining loss: " + " -> ".join(f"{row['mean_loss']:.3f}" for row in history[::2]))

test = split.test_normal + split.test_anomalous
verdicts, stats = detect_batch(model, test, DetectorConfig(top_k_ratio=0.5))
report = score(verdicts, [s.label for s in test])
print(f"\ndetection at top_k_ratio 0.5: precision {report.precision:.3f}, "
      f"recall {report.recall:.3f}, f1 {report.f1:.3f}")
print(f"stats: {stats}")

print("\nsample verdicts (provenance, flag, first violation, violations):")
flagged = [v for v in verdicts if v.flag][:3]
clean = [v for v in verdicts if not v.flag][:2]
for verdict in flagged + clean:
    print(f"  {verdict.line()}")
