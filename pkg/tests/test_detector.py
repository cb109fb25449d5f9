"""Detector verdicts: the single-violation rule, UNSEEN handling, parallelism."""

import numpy as np
import pytest

from logsentinel.corpus import UNSEEN_ID, KeySequence
from logsentinel.detector import (DetectorConfig, UNSEEN_RANK, detect, detect_batch,
                                  observed_key_ranks, write_trace, write_verdicts)
from logsentinel.model import GptModel, ModelConfig
from tests.conftest import SMALL_MODEL


def encoded(keys, label=0, provenance="seq"):
    return KeySequence(keys=keys, label=label, provenance=provenance)


class TestDetectorConfig:
    def test_k_is_ceil_of_ratio_times_mined(self):
        # 15 mined keys at ratio 0.5 -> ceil(7.5) = 8, the HDFS-style default.
        assert DetectorConfig(top_k_ratio=0.5).k_for_vocab(15 + 3) == 8
        assert DetectorConfig(top_k_ratio=1.0).k_for_vocab(15 + 3) == 15
        assert DetectorConfig(top_k_ratio=0.01).k_for_vocab(15 + 3) == 1

    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            DetectorConfig(top_k_ratio=0.0)
        with pytest.raises(ValueError):
            DetectorConfig(top_k_ratio=1.5)


class TestDetect:
    def test_full_coverage_k_keeps_in_vocab_sequences_normal(self, det_model, det_split):
        cfg = DetectorConfig(top_k_ratio=1.0)
        for seq in det_split.test_normal[:30]:
            assert detect(det_model, seq, cfg).flag == 0

    def test_unseen_key_always_anomalous(self, det_model):
        cfg = DetectorConfig(top_k_ratio=1.0)
        verdict = detect(det_model, encoded([3, 4, UNSEEN_ID, 6]), cfg)
        assert verdict.flag == 1
        assert verdict.first_violation == 2

    def test_unseen_flags_even_unscored_position(self, det_model):
        cfg = DetectorConfig(top_k_ratio=1.0, score_first_key=False)
        verdict = detect(det_model, encoded([UNSEEN_ID]), cfg)
        assert verdict.flag == 1
        assert verdict.first_violation == 0

    def test_injected_wrong_key_found_at_position(self, det_model, det_split):
        # Converged chain model, K=1: a wrong key at position 5 is the first miss.
        base = next(s for s in det_split.test_normal if len(s.keys) >= 8)
        keys = list(base.keys)
        keys[5] = keys[5] + 2 if keys[5] + 2 < det_split.vocab.size else keys[5] - 2
        verdict = detect(det_model, encoded(keys), DetectorConfig(top_k_ratio=0.01))
        assert verdict.flag == 1
        assert verdict.first_violation == 5

    def test_length_one_vacuously_normal_without_first_key_scoring(self, det_model):
        cfg = DetectorConfig(top_k_ratio=0.01, score_first_key=False)
        assert detect(det_model, encoded([5]), cfg).flag == 0

    def test_trace_ranks(self, det_model):
        cfg = DetectorConfig(top_k_ratio=0.5)
        verdict = detect(det_model, encoded([3, 4, UNSEEN_ID]), cfg, trace=True)
        assert len(verdict.ranks) == 3
        assert verdict.ranks[2] == UNSEEN_RANK

    def test_monotone_in_k(self, det_model, det_split):
        sequences = (det_split.test_normal + det_split.test_anomalous)[:40]
        flagged_by_ratio = []
        for ratio in (0.1, 0.3, 0.5, 0.8, 1.0):
            cfg = DetectorConfig(top_k_ratio=ratio)
            flags = {i for i, s in enumerate(sequences)
                     if detect(det_model, s, cfg).flag}
            flagged_by_ratio.append(flags)
        for smaller_k, larger_k in zip(flagged_by_ratio, flagged_by_ratio[1:]):
            assert larger_k <= smaller_k


class TestObservedKeyRanks:
    def test_positions_respect_score_first_key(self, det_model):
        keys = [3, 4, 5, 6]
        pos_with, _ = observed_key_ranks(det_model, keys, score_first_key=True)
        pos_without, _ = observed_key_ranks(det_model, keys, score_first_key=False)
        assert pos_with == [0, 1, 2, 3]
        assert pos_without == [1, 2, 3]

    def test_converged_model_ranks_chain_keys_first(self, det_model, det_split):
        seq = next(s for s in det_split.test_normal if len(s.keys) >= 5)
        _, ranks = observed_key_ranks(det_model, seq.keys)
        assert all(r == 0 for r in ranks)


class TestDetectBatch:
    def test_matches_sequential(self, det_model, det_split):
        sequences = (det_split.test_normal + det_split.test_anomalous)[:25]
        cfg = DetectorConfig(top_k_ratio=0.5)
        singles = [detect(det_model, s, cfg) for s in sequences]
        batch, stats = detect_batch(det_model, sequences, cfg)
        assert [v.__dict__ for v in batch] == [v.__dict__ for v in singles]
        assert stats["sequences"] == 25

    def test_parallel_equals_serial(self, det_model, det_split):
        sequences = (det_split.test_normal + det_split.test_anomalous)[:25]
        cfg = DetectorConfig(top_k_ratio=0.5)
        serial, _ = detect_batch(det_model, sequences, cfg, jobs=1)
        parallel, _ = detect_batch(det_model, sequences, cfg, jobs=8)
        assert [v.__dict__ for v in serial] == [v.__dict__ for v in parallel]

    def test_empty_input(self, det_model):
        verdicts, stats = detect_batch(det_model, [], DetectorConfig())
        assert verdicts == []
        assert stats["sequences"] == 0

    def test_vocab_mismatch_checked(self, det_split):
        from logsentinel.errors import VocabMismatchError
        wrong = GptModel(ModelConfig(vocab_size=det_split.vocab.size + 4, **SMALL_MODEL))
        with pytest.raises(VocabMismatchError):
            detect_batch(wrong, det_split.test_normal[:1], DetectorConfig(),
                         vocab_size=det_split.vocab.size)


class TestVerdictFiles:
    def test_verdict_lines(self, det_model, tmp_path):
        cfg = DetectorConfig(top_k_ratio=0.5)
        verdicts, _ = detect_batch(
            det_model, [encoded([3, 4, 5], provenance="s0"),
                        encoded([3, UNSEEN_ID], provenance="s1")], cfg)
        path = tmp_path / "verdicts.tsv"
        write_verdicts(verdicts, str(path))
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 2
        fields = lines[1].split("\t")
        assert fields[0] == "s1"
        assert fields[1] == "1"
        assert fields[2] == "1"

    def test_trace_jsonl(self, det_model, tmp_path):
        import json
        cfg = DetectorConfig(top_k_ratio=0.5)
        verdicts, _ = detect_batch(det_model, [encoded([3, 4, 5])], cfg, trace=True)
        path = tmp_path / "trace.jsonl"
        write_trace(verdicts, str(path))
        row = json.loads(path.read_text().strip())
        assert isinstance(row["ranks"], list) and len(row["ranks"]) == 3
