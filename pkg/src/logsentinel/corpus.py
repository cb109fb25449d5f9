"""Key sequences, vocabulary management, train/test splits, and corpus files.

Sequences enter as raw parser key ids; `build_split` fixes the vocabulary
from the training sample only and re-encodes everything into dense model ids.
Reserved ids are pinned: PAD=0, BOS=1, UNSEEN=2; mined keys follow. Test-time
keys that were never seen in training encode to UNSEEN.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InsufficientNormalError
from .fileio import atomic_write_text

PAD_ID = 0
BOS_ID = 1
UNSEEN_ID = 2
RESERVED_TOKENS = 3

LABEL_NORMAL = 0
LABEL_ANOMALOUS = 1

# Model context is 512 positions including the prepended BOS slot.
MAX_SEQUENCE_KEYS = 511

_CORPUS_MAGIC = "LOGSEQ"
_CORPUS_VERSION = "v1"


@dataclass
class KeySequence:
    """Ordered key ids with a label and a provenance (session id or window)."""

    keys: list
    label: int = LABEL_NORMAL
    provenance: str = ""

    def __post_init__(self):
        if not self.keys:
            raise ValueError("KeySequence.keys must be non-empty")
        if self.label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    def __len__(self) -> int:
        return len(self.keys)


class Vocabulary:
    """Dense model-id space over training-observed keys plus reserved tokens."""

    def __init__(self, size: int, key_to_id: dict | None = None):
        self.size = int(size)
        self.key_to_id = key_to_id

    @classmethod
    def from_training(cls, sequences) -> "Vocabulary":
        raw_keys = sorted({k for seq in sequences for k in seq.keys})
        key_to_id = {raw: RESERVED_TOKENS + i for i, raw in enumerate(raw_keys)}
        return cls(size=RESERVED_TOKENS + len(raw_keys), key_to_id=key_to_id)

    @property
    def mined_keys(self) -> int:
        return self.size - RESERVED_TOKENS

    def encode(self, keys) -> list:
        if self.key_to_id is None:
            raise ValueError("vocabulary has no raw-key mapping (loaded from encoded corpus)")
        return [self.key_to_id.get(k, UNSEEN_ID) for k in keys]

    def encode_sequence(self, seq: KeySequence) -> KeySequence:
        # Head truncation: keep the earliest keys; label never changes.
        encoded = self.encode(seq.keys)[:MAX_SEQUENCE_KEYS]
        return KeySequence(keys=encoded, label=seq.label, provenance=seq.provenance)


@dataclass
class CorpusSplit:
    """One-class split: train holds only normal sequences, already encoded."""

    train: list = field(default_factory=list)
    test_normal: list = field(default_factory=list)
    test_anomalous: list = field(default_factory=list)
    vocab: Vocabulary = None

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        save_corpus(self.train, self.vocab.size, os.path.join(directory, "train.tsv"))
        save_corpus(self.test_normal, self.vocab.size, os.path.join(directory, "test_normal.tsv"))
        save_corpus(self.test_anomalous, self.vocab.size, os.path.join(directory, "test_anomalous.tsv"))

    @classmethod
    def load(cls, directory: str) -> "CorpusSplit":
        parts = {}
        sizes = set()
        for name in ("train", "test_normal", "test_anomalous"):
            sequences, vocab_size = load_corpus(os.path.join(directory, f"{name}.tsv"))
            parts[name] = sequences
            sizes.add(vocab_size)
        if len(sizes) != 1:
            raise FormatError(f"split partitions disagree on vocab size: {sorted(sizes)}")
        return cls(train=parts["train"], test_normal=parts["test_normal"],
                   test_anomalous=parts["test_anomalous"],
                   vocab=Vocabulary(size=sizes.pop()))


def group_by_session(stream, session_regex: str, label_map: dict | None = None):
    """Partition a parsed key stream into one sequence per session id.

    `stream` yields (line_id, key_id, raw_line); the regex must have exactly
    one capture group, evaluated against the raw line. Lines without a match
    are dropped and counted. Returns (sequences, dropped_count).
    """
    pattern = re.compile(session_regex)
    if pattern.groups != 1:
        raise ValueError(f"session regex must have exactly one capture group, has {pattern.groups}")
    sessions: dict = {}
    dropped = 0
    for _line_id, key_id, raw_line in stream:
        match = pattern.search(raw_line)
        if match is None:
            dropped += 1
            continue
        sessions.setdefault(match.group(1), []).append(key_id)
    label_map = label_map or {}
    sequences = [KeySequence(keys=keys, label=int(label_map.get(sid, LABEL_NORMAL)), provenance=sid)
                 for sid, keys in sessions.items()]
    return sequences, dropped


def group_by_time_window(stream, window_seconds: float):
    """Group (timestamp, key_id, label) events into tumbling time windows.

    Windows are aligned to multiples of `window_seconds`; a window is
    anomalous if any member line is. Empty windows emit nothing.
    """
    if window_seconds <= 0:
        raise ValueError("window_seconds must be positive")
    events = []
    for ts, key_id, label in stream:
        try:
            ts = float(ts)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"unparseable timestamp: {ts!r}") from exc
        events.append((ts, key_id, int(label)))
    events.sort(key=lambda e: e[0])  # stable, preserves in-window line order
    windows: dict = {}
    for ts, key_id, label in events:
        idx = int(ts // window_seconds)
        bucket = windows.setdefault(idx, ([], [False]))
        bucket[0].append(key_id)
        bucket[1][0] = bucket[1][0] or bool(label)
    return [KeySequence(keys=keys, label=LABEL_ANOMALOUS if flagged[0] else LABEL_NORMAL,
                        provenance=f"w{idx}")
            for idx, (keys, flagged) in sorted(windows.items())]


def build_split(sequences, n_train: int, seed: int) -> CorpusSplit:
    """Sample n_train normal sequences for training; the rest becomes test data.

    The vocabulary is built from the training sample only, so test sequences
    may contain UNSEEN keys. Deterministic for a fixed seed.
    """
    normal_idx = [i for i, s in enumerate(sequences) if s.label == LABEL_NORMAL]
    if len(normal_idx) < n_train:
        raise InsufficientNormalError(
            f"need {n_train} normal sequences, found {len(normal_idx)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(normal_idx))
    train_positions = {normal_idx[j] for j in order[:n_train]}

    vocab = Vocabulary.from_training([sequences[i] for i in sorted(train_positions)])
    split = CorpusSplit(vocab=vocab)
    for i, seq in enumerate(sequences):
        encoded = vocab.encode_sequence(seq)
        if i in train_positions:
            split.train.append(encoded)
        elif seq.label == LABEL_ANOMALOUS:
            split.test_anomalous.append(encoded)
        else:
            split.test_normal.append(encoded)
    return split


def save_corpus(sequences, vocab_size: int, path: str) -> None:
    """Write encoded sequences: header `LOGSEQ v1 vocab=<n>`, one sequence per line."""
    lines = [f"{_CORPUS_MAGIC} {_CORPUS_VERSION} vocab={vocab_size}"]
    for seq in sequences:
        provenance = re.sub(r"\s+", "_", seq.provenance) if seq.provenance else ""
        lines.append(f"{seq.label}\t{provenance}\t{' '.join(str(k) for k in seq.keys)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_corpus(path: str):
    """Read a corpus file; returns (sequences, vocab_size)."""
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().rstrip("\n")
        match = re.fullmatch(rf"{_CORPUS_MAGIC} (v\d+) vocab=(\d+)", header)
        if match is None:
            raise FormatError(f"{path}: bad corpus header {header!r}")
        if match.group(1) != _CORPUS_VERSION:
            raise FormatError(f"{path}: unsupported corpus version {match.group(1)}")
        vocab_size = int(match.group(2))
        sequences = []
        for lineno, line in enumerate(handle, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            label_text, provenance, keys_text = fields
            try:
                label = int(label_text)
                keys = [int(k) for k in keys_text.split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if label not in (LABEL_NORMAL, LABEL_ANOMALOUS):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1")
            if not keys:
                raise FormatError(f"{path}:{lineno}: empty key list")
            if any(k < 0 or k >= vocab_size for k in keys):
                raise FormatError(f"{path}:{lineno}: key id outside vocab {vocab_size}")
            sequences.append(KeySequence(keys=keys, label=label, provenance=provenance))
    return sequences, vocab_size
