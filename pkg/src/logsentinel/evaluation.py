"""Metrics, synthetic benchmark corpora, and sweep experiments.

Anomalous is the positive class throughout. Synthetic corpora come from
small transition grammars with exact labels by construction: every injected
anomaly is verified non-generatable before it is emitted, so benchmark
ground truth is never noisy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import LABEL_ANOMALOUS, LABEL_NORMAL, CorpusSplit, KeySequence, build_split
from .detector import DetectorConfig, detect_batch, observed_key_ranks
from .fileio import atomic_write_text, sha256_bytes
from .model import GptModel, ModelConfig
from .training import TrainConfig, pretrain


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0


def score(verdicts, labels) -> MetricsReport:
    """Confusion counts for predicted flags vs labels (1 = anomalous)."""
    flags = [v.flag if hasattr(v, "flag") else int(v) for v in verdicts]
    labels = [int(l) for l in labels]
    if len(flags) != len(labels):
        raise ValueError(f"verdicts ({len(flags)}) and labels ({len(labels)}) differ in length")
    tp = sum(1 for f, l in zip(flags, labels) if f == 1 and l == 1)
    fp = sum(1 for f, l in zip(flags, labels) if f == 1 and l == 0)
    tn = sum(1 for f, l in zip(flags, labels) if f == 0 and l == 0)
    fn = sum(1 for f, l in zip(flags, labels) if f == 0 and l == 1)
    return MetricsReport(tp=tp, fp=fp, tn=tn, fn=fn)


# ---------------------------------------------------------------------------
# Transition grammars
# ---------------------------------------------------------------------------

STOP = None  # sentinel successor meaning "the sequence may end here"


@dataclass
class TransitionGrammar:
    """Weighted first-order transition structure over synthetic keys.

    `edges[key]` lists (successor, weight) pairs where successor STOP ends
    the walk. Every key must reach STOP (checked), so sampling terminates.
    """

    starts: list
    edges: dict
    hard_cap: int = 64

    def __post_init__(self):
        reachable_stop = {k for k, succs in self.edges.items()
                          if any(s is STOP and w > 0 for s, w in succs)}
        frontier = set(reachable_stop)
        while frontier:
            frontier = {k for k, succs in self.edges.items()
                        if k not in reachable_stop
                        and any(s in reachable_stop and w > 0 for s, w in succs if s is not STOP)}
            reachable_stop |= frontier
        missing = set(self.edges) - reachable_stop
        if missing:
            raise ValueError(f"grammar keys cannot reach a terminal: {sorted(missing)}")

    @property
    def alphabet(self) -> set:
        return set(self.edges)

    def sample(self, rng: np.random.Generator, min_len: int = 2):
        """One normal walk of length >= min_len (rejection-sampled)."""
        for _ in range(1000):
            walk = self._walk(rng)
            if len(walk) >= min_len:
                return walk
        raise RuntimeError(f"grammar cannot produce length >= {min_len}")

    def _walk(self, rng):
        keys, weights = zip(*self.starts)
        probs = np.asarray(weights, dtype=np.float64)
        current = int(rng.choice(keys, p=probs / probs.sum()))
        walk = [current]
        while True:
            succs, weights = zip(*self.edges[current])
            probs = np.asarray(weights, dtype=np.float64)
            nxt = succs[int(rng.choice(len(succs), p=probs / probs.sum()))]
            if nxt is STOP:
                return walk
            walk.append(int(nxt))
            current = int(nxt)
            if len(walk) > self.hard_cap:
                raise RuntimeError(f"grammar walk exceeded hard cap {self.hard_cap}")

    def is_generatable(self, keys) -> bool:
        """Whether `keys` is exactly a start-to-stop walk with positive weights."""
        if not keys:
            return False
        start_ok = any(k == keys[0] and w > 0 for k, w in self.starts)
        if not start_ok or keys[0] not in self.edges:
            return False
        for a, b in zip(keys, keys[1:]):
            if b not in self.edges:
                return False
            if not any(s == b and w > 0 for s, w in self.edges[a] if s is not STOP):
                return False
        return any(s is STOP and w > 0 for s, w in self.edges[keys[-1]])


def chain_grammar(n_keys: int) -> TransitionGrammar:
    """Deterministic chain 0 -> 1 -> ... -> n-1; every walk is identical."""
    edges = {i: [(i + 1, 1.0)] for i in range(n_keys - 1)}
    edges[n_keys - 1] = [(STOP, 1.0)]
    return TransitionGrammar(starts=[(0, 1.0)], edges=edges)


def deterministic_chain_grammar(n_keys: int = 30, continue_prob: float = 0.9) -> TransitionGrammar:
    """Chain with geometric stopping: the next key is always determined.

    Whenever a successor exists it is unique, so next-key entropy is zero at
    every position while walk lengths still vary enough to exercise padding.
    """
    edges = {}
    for i in range(n_keys - 1):
        edges[i] = [(i + 1, continue_prob), (STOP, 1.0 - continue_prob)]
    edges[n_keys - 1] = [(STOP, 1.0)]
    return TransitionGrammar(starts=[(0, 1.0)], edges=edges, hard_cap=n_keys + 2)


def two_branch_grammar(tail: int = 5) -> TransitionGrammar:
    """Chain with one equiprobable branch that rejoins.

    Keys 0..3, then 4 or 5 with probability 1/2 each, then 6..6+tail-1.
    The observed key at position 4 carries exactly ln 2 of entropy.
    """
    edges = {0: [(1, 1.0)], 1: [(2, 1.0)], 2: [(3, 1.0)],
             3: [(4, 0.5), (5, 0.5)], 4: [(6, 1.0)], 5: [(6, 1.0)]}
    last = 6 + tail - 1
    for i in range(6, last):
        edges[i] = [(i + 1, 1.0)]
    edges[last] = [(STOP, 1.0)]
    return TransitionGrammar(starts=[(0, 1.0)], edges=edges)


def parallel_chains_grammar(n_chains: int = 3, chain_len: int = 10,
                            continue_prob: float = 0.92) -> TransitionGrammar:
    """Stochastic choice among parallel deterministic chains; geometric lengths.

    The default detection benchmark: 30 keys, branching <= 3 (at the start),
    stochastic start/stop weights. Low per-position entropy makes a converged
    model rank out-of-place keys deep, so injected transition violations are
    reliably separable at Top-K ratio 0.5.
    """
    edges = {}
    starts = []
    weights = [0.5, 0.3, 0.2] + [1.0] * max(0, n_chains - 3)
    for chain in range(n_chains):
        base = chain * chain_len
        starts.append((base, weights[chain]))
        for i in range(chain_len - 1):
            edges[base + i] = [(base + i + 1, continue_prob), (STOP, 1.0 - continue_prob)]
        edges[base + chain_len - 1] = [(STOP, 1.0)]
    return TransitionGrammar(starts=starts, edges=edges, hard_cap=chain_len + 2)


def layered_grammar(n_keys: int = 30, layer_width: int = 3, max_branching: int = 3,
                    seed: int = 0, weight_floor: float = 0.15,
                    min_branching: int = 1) -> TransitionGrammar:
    """Random layered DAG grammar: stochastic branching, bounded walk length.

    Keys are split into consecutive layers of `layer_width`; each key gets
    min_branching..max_branching weighted successors in the next layer. Walks
    are one key per layer, so the length always equals the layer count. A
    small `weight_floor` allows heavily skewed branch weights (rare-but-normal
    continuations), which is what makes a corpus "high variability".
    """
    if n_keys < 2 * layer_width:
        raise ValueError("need at least two layers")
    if not 1 <= min_branching <= max_branching:
        raise ValueError("need 1 <= min_branching <= max_branching")
    rng = np.random.default_rng(seed)
    layers = [list(range(i, min(i + layer_width, n_keys)))
              for i in range(0, n_keys, layer_width)]
    edges = {}
    for current, nxt in zip(layers, layers[1:]):
        for key in current:
            fanout = int(rng.integers(min_branching, max_branching + 1))
            targets = rng.choice(nxt, size=min(fanout, len(nxt)), replace=False)
            weights = weight_floor + rng.random(len(targets))
            edges[key] = [(int(t), float(w)) for t, w in zip(targets, weights)]
    for key in layers[-1]:
        edges[key] = [(STOP, 1.0)]
    starts = [(k, 1.0) for k in layers[0]]
    return TransitionGrammar(starts=starts, edges=edges, hard_cap=len(layers) + 2)


# ---------------------------------------------------------------------------
# Synthetic corpus generation with anomaly injection
# ---------------------------------------------------------------------------

ANOMALY_KINDS = ("foreign", "swap", "truncate_foreign")


@dataclass
class SyntheticSpec:
    grammar: TransitionGrammar
    n_normal: int
    n_anomalous: int
    anomaly_kinds: tuple = ANOMALY_KINDS
    seed: int = 0
    min_len: int = 2

    def __post_init__(self):
        unknown = set(self.anomaly_kinds) - set(ANOMALY_KINDS)
        if unknown:
            raise ValueError(f"unknown anomaly kinds: {sorted(unknown)}")
        if self.n_anomalous > 0 and not self.anomaly_kinds:
            raise ValueError("anomalies requested but no anomaly kinds enabled")


def _inject_anomaly(kind: str, base, grammar: TransitionGrammar, rng) -> list:
    keys = list(base)
    foreign_base = max(grammar.alphabet) + 1
    if kind == "foreign":
        position = int(rng.integers(0, len(keys)))
        keys[position] = foreign_base + int(rng.integers(0, 5))
    elif kind == "swap":
        if len(keys) < 2:
            return []
        position = int(rng.integers(0, len(keys) - 1))
        keys[position], keys[position + 1] = keys[position + 1], keys[position]
    elif kind == "truncate_foreign":
        cut = int(rng.integers(1, len(keys) + 1))
        tail = [foreign_base + int(rng.integers(0, 5))
                for _ in range(int(rng.integers(1, 4)))]
        keys = keys[:cut] + tail
    return keys


def generate_synthetic(spec: SyntheticSpec) -> list:
    """Labeled raw-key corpus: normals first, then verified anomalies.

    Every anomalous sequence is checked to be non-generatable by the grammar
    before emission (retrying the injection otherwise), so labels are exact.
    """
    rng = np.random.default_rng(spec.seed)
    sequences = [KeySequence(keys=spec.grammar.sample(rng, spec.min_len),
                             label=LABEL_NORMAL, provenance=f"norm{i}")
                 for i in range(spec.n_normal)]
    for i in range(spec.n_anomalous):
        kind = spec.anomaly_kinds[i % len(spec.anomaly_kinds)]
        for _attempt in range(100):
            base = spec.grammar.sample(rng, spec.min_len)
            mutated = _inject_anomaly(kind, base, spec.grammar, rng)
            if mutated and not spec.grammar.is_generatable(mutated):
                sequences.append(KeySequence(keys=mutated, label=LABEL_ANOMALOUS,
                                             provenance=f"anom{i}.{kind}"))
                break
        else:
            raise RuntimeError(f"could not inject a {kind} anomaly in 100 attempts")
    return sequences


# ---------------------------------------------------------------------------
# Sweeps and ablation
# ---------------------------------------------------------------------------

@dataclass
class SweepPoint:
    value: float  # ratio or training size
    k: int
    report: MetricsReport
    flags: list = field(default_factory=list)


def sweep_top_k(model: GptModel, sequences, ratios, score_first_key: bool = True):
    """Detection metrics per Top-K ratio, from one scoring pass.

    Distributions are computed once per sequence; each ratio only re-checks
    rank-vs-K membership, so flagged sets nest across ratios by construction.
    """
    sequences = list(sequences)
    labels = [s.label for s in sequences]
    max_ranks = []
    for seq in sequences:
        _, ranks = observed_key_ranks(model, seq.keys, score_first_key)
        max_ranks.append(max(ranks) if ranks else -1)
    points = []
    for ratio in ratios:
        cfg = DetectorConfig(top_k_ratio=ratio, score_first_key=score_first_key)
        k = cfg.k_for_vocab(model.config.vocab_size)
        flags = [1 if rank >= k else 0 for rank in max_ranks]
        points.append(SweepPoint(value=ratio, k=k, report=score(flags, labels), flags=flags))
    return points


@dataclass
class PipelineParams:
    """Everything needed to run pretrain(+RL)+detect on a raw labeled corpus."""

    n_train: int
    train: TrainConfig
    detector: DetectorConfig
    model_overrides: dict = field(default_factory=dict)
    seed: int = 0
    rl: object = None  # RlConfig when the fine-tuning stage is enabled


def run_pipeline(sequences, params: PipelineParams):
    """build_split -> pretrain -> optional finetune -> detect -> metrics."""
    from .finetune import finetune  # local import: finetune depends on detector

    split = build_split(sequences, n_train=params.n_train, seed=params.seed)
    config = ModelConfig(vocab_size=split.vocab.size, **params.model_overrides)
    model = GptModel(config, seed=params.seed)
    model, _ = pretrain(model, split.train, params.train, vocab_size=split.vocab.size)
    if params.rl is not None:
        model, _ = finetune(model, split.train, params.rl)
    test = split.test_normal + split.test_anomalous
    verdicts, _ = detect_batch(model, test, params.detector)
    return score(verdicts, [s.label for s in test]), split, model


def sweep_training_size(sequences, sizes, params: PipelineParams):
    """Full pipeline per training size with fixed seeds; returns sweep points."""
    points = []
    for size in sizes:
        report, _, _ = run_pipeline(sequences, replace(params, n_train=int(size)))
        cfg = params.detector
        points.append(SweepPoint(value=float(size), k=0, report=report))
    return points


@dataclass
class AblationResult:
    pretrained: MetricsReport
    finetuned: MetricsReport
    pretrain_checkpoint_hash: str
    pretrained_clean_normal_fraction: float
    finetuned_clean_normal_fraction: float
    reward_curve: list


def _clean_normal_fraction(model, normals, det_cfg) -> float:
    """Fraction of normal sequences with zero Top-K violations."""
    if not normals:
        return 1.0
    verdicts, _ = detect_batch(model, normals, det_cfg)
    return sum(1 for v in verdicts if v.flag == 0) / len(verdicts)


def ablate_rl(split: CorpusSplit, train_cfg: TrainConfig, rl_cfg, det_cfg: DetectorConfig,
              model_overrides: dict | None = None, seed: int = 0) -> AblationResult:
    """Identical-seed comparison of pretrained-only vs pretrained+RL detection.

    Both branches share one pretraining run; the fine-tuned branch starts
    from the same snapshot whose hash is reported.
    """
    from .finetune import finetune

    config = ModelConfig(vocab_size=split.vocab.size, **(model_overrides or {}))
    model = GptModel(config, seed=seed)
    model, _ = pretrain(model, split.train, train_cfg, vocab_size=split.vocab.size)
    snapshot = model.state_snapshot()
    checkpoint_hash = sha256_bytes(b"".join(snapshot[name].tobytes() for name in sorted(snapshot)))

    test = split.test_normal + split.test_anomalous
    labels = [s.label for s in test]
    verdicts, _ = detect_batch(model, test, det_cfg)
    pretrained_report = score(verdicts, labels)
    pretrained_clean = _clean_normal_fraction(model, split.test_normal, det_cfg)

    tuned = GptModel(config, seed=seed)
    tuned.load_state(snapshot)
    tuned, history = finetune(tuned, split.train, rl_cfg, validation=split.test_normal)
    verdicts, _ = detect_batch(tuned, test, det_cfg)
    finetuned_report = score(verdicts, labels)
    finetuned_clean = _clean_normal_fraction(tuned, split.test_normal, det_cfg)

    return AblationResult(
        pretrained=pretrained_report,
        finetuned=finetuned_report,
        pretrain_checkpoint_hash=checkpoint_hash,
        pretrained_clean_normal_fraction=pretrained_clean,
        finetuned_clean_normal_fraction=finetuned_clean,
        reward_curve=[row["mean_reward"] for row in history],
    )


def write_report(points, path: str, config_hash: str) -> None:
    """Plot-ready TSV: `config_hash\\tratio_or_size\\tprecision\\trecall\\tf1`."""
    lines = ["config_hash\tratio_or_size\tprecision\trecall\tf1"]
    for point in points:
        r = point.report
        lines.append(f"{config_hash}\t{point.value:g}\t{r.precision:.6f}\t{r.recall:.6f}\t{r.f1:.6f}")
    atomic_write_text(path, "\n".join(lines) + "\n")
