"""Top-K violation detector over trained models.

A sequence is anomalous if at least one observed key falls outside the
model's Top-K prediction set at its position, or if it contains the UNSEEN
key (which can never be a legitimate training-time key). Detection is
deterministic and embarrassingly parallel: a verdict depends only on the
model parameters, the sequence, and K.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .corpus import BOS_ID, RESERVED_TOKENS, UNSEEN_ID, KeySequence
from .fileio import atomic_write_text
from .model import GptModel, ensure_vocab_match, key_rank

# Effective rank assigned to UNSEEN keys: outside every possible Top-K.
UNSEEN_RANK = 10 ** 9


@dataclass(frozen=True)
class DetectorConfig:
    top_k_ratio: float = 0.5
    score_first_key: bool = True

    def __post_init__(self):
        if not 0.0 < self.top_k_ratio <= 1.0:
            raise ValueError("top_k_ratio must be in (0, 1]")

    def k_for_vocab(self, vocab_size: int) -> int:
        """K = ceil(ratio * mined training keys), clamped to [1, mined]."""
        mined = vocab_size - RESERVED_TOKENS
        if mined < 1:
            raise ValueError(f"vocab_size {vocab_size} has no mined keys")
        return min(max(1, math.ceil(self.top_k_ratio * mined)), mined)


@dataclass
class Verdict:
    provenance: str
    flag: int
    first_violation: int | None
    violation_count: int
    ranks: list | None = None  # per scored position: effective observed-key rank

    def line(self) -> str:
        first = "-" if self.first_violation is None else str(self.first_violation)
        return f"{self.provenance}\t{self.flag}\t{first}\t{self.violation_count}"


def observed_key_ranks(model: GptModel, keys, score_first_key: bool = True):
    """Effective rank of each scored observed key, in one causal forward.

    Returns (positions, ranks): position j scores keys[j] against the model
    distribution given BOS + keys[:j]. UNSEEN keys get UNSEEN_RANK. Shares
    `key_rank` with the RL reward so both measure the same quantity.
    """
    keys = list(keys)
    length = len(keys)
    positions = list(range(0 if score_first_key else 1, length))
    if not positions:
        return [], []
    dists = model.next_key_distributions([BOS_ID] + keys[:-1])
    ranks = []
    for j in positions:
        if keys[j] == UNSEEN_ID:
            ranks.append(UNSEEN_RANK)
        else:
            ranks.append(key_rank(dists[j], keys[j]))
    return positions, ranks


def detect(model: GptModel, sequence: KeySequence, cfg: DetectorConfig,
           trace: bool = False) -> Verdict:
    """Single-violation Top-K verdict for one sequence."""
    keys = list(sequence.keys)
    if not keys:
        raise ValueError("cannot score an empty sequence")
    k = cfg.k_for_vocab(model.config.vocab_size)
    positions, ranks = observed_key_ranks(model, keys, cfg.score_first_key)
    violations = {pos for pos, rank in zip(positions, ranks) if rank >= k}
    # UNSEEN anywhere is an automatic violation, scored position or not.
    violations.update(j for j, key in enumerate(keys) if key == UNSEEN_ID)
    ordered = sorted(violations)
    return Verdict(
        provenance=sequence.provenance,
        flag=1 if ordered else 0,
        first_violation=ordered[0] if ordered else None,
        violation_count=len(ordered),
        ranks=ranks if trace else None,
    )


def detect_batch(model: GptModel, sequences, cfg: DetectorConfig, jobs: int = 1,
                 trace: bool = False, vocab_size: int | None = None):
    """Verdicts for many sequences, in input order; returns (verdicts, stats).

    Any parallelism level yields verdicts identical to sequential detection.
    """
    if vocab_size is not None:
        ensure_vocab_match(model, vocab_size)
    sequences = list(sequences)
    if jobs > 1 and len(sequences) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            verdicts = list(pool.map(lambda s: detect(model, s, cfg, trace), sequences))
    else:
        verdicts = [detect(model, s, cfg, trace) for s in sequences]
    vacuous = sum(1 for s in sequences
                  if len(s.keys) == 1 and not cfg.score_first_key and UNSEEN_ID not in s.keys)
    stats = {
        "sequences": len(sequences),
        "flagged": sum(v.flag for v in verdicts),
        "vacuous_normal": vacuous,
        "unseen_sequences": sum(1 for s in sequences if UNSEEN_ID in s.keys),
    }
    return verdicts, stats


def write_verdicts(verdicts, path: str) -> None:
    """One line per sequence: `provenance\\tflag\\tfirst_violation|-\\tviolation_count`."""
    atomic_write_text(path, "\n".join(v.line() for v in verdicts) + "\n")


def write_trace(verdicts, path: str) -> None:
    """JSON-lines trace with the per-position effective rank of each observed key."""
    lines = [json.dumps({"provenance": v.provenance, "flag": v.flag,
                         "first_violation": v.first_violation, "ranks": v.ranks})
             for v in verdicts]
    atomic_write_text(path, "\n".join(lines) + "\n")
