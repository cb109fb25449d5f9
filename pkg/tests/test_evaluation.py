"""Metrics arithmetic, grammar generation, anomaly injection, sweeps."""

import numpy as np
import pytest

from logsentinel import evaluation as ev
from logsentinel.corpus import LABEL_ANOMALOUS, LABEL_NORMAL


class TestMetrics:
    def test_all_correct(self):
        report = ev.score([1, 0, 1, 0], [1, 0, 1, 0])
        assert (report.precision, report.recall, report.f1) == (1.0, 1.0, 1.0)

    def test_all_normal_predictions(self):
        report = ev.score([0, 0, 0, 0], [1, 0, 1, 0])
        assert report.recall == 0.0
        assert report.f1 == 0.0

    def test_arithmetic(self):
        # tp=2, fp=1, fn=2, tn=1
        report = ev.score([1, 1, 1, 0, 0, 0], [1, 1, 0, 1, 1, 0])
        assert report.precision == pytest.approx(0.667, abs=1e-3)
        assert report.recall == pytest.approx(0.5, abs=1e-3)
        assert report.f1 == pytest.approx(0.571, abs=1e-3)

    def test_zero_denominators(self):
        report = ev.score([0, 0], [0, 0])
        assert (report.precision, report.recall, report.f1) == (0.0, 0.0, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            ev.score([1], [1, 0])


class TestGrammars:
    def test_chain_grammar_all_identical(self):
        grammar = ev.chain_grammar(10)
        rng = np.random.default_rng(0)
        walks = {tuple(grammar.sample(rng)) for _ in range(20)}
        assert walks == {tuple(range(10))}

    def test_deterministic_chain_next_key_unique(self):
        grammar = ev.deterministic_chain_grammar(n_keys=8, continue_prob=0.8)
        rng = np.random.default_rng(1)
        for _ in range(50):
            walk = grammar.sample(rng)
            assert walk == list(range(len(walk)))
            assert grammar.is_generatable(walk)

    def test_two_branch_splits_at_position_4(self):
        grammar = ev.two_branch_grammar()
        rng = np.random.default_rng(2)
        seen = {grammar.sample(rng)[4] for _ in range(100)}
        assert seen == {4, 5}

    def test_layered_grammar_fixed_length_walks(self):
        grammar = ev.layered_grammar(n_keys=12, layer_width=3, seed=3)
        rng = np.random.default_rng(3)
        for _ in range(30):
            walk = grammar.sample(rng)
            assert len(walk) == 4  # one key per layer
            assert grammar.is_generatable(walk)

    def test_unterminated_grammar_rejected(self):
        with pytest.raises(ValueError):
            ev.TransitionGrammar(starts=[(0, 1.0)], edges={0: [(1, 1.0)], 1: [(0, 1.0)]})

    def test_is_generatable_rejects_foreign_and_broken(self):
        grammar = ev.chain_grammar(5)
        assert grammar.is_generatable([0, 1, 2, 3, 4])
        assert not grammar.is_generatable([0, 1, 2, 3])      # stops early
        assert not grammar.is_generatable([1, 2, 3, 4])      # bad start
        assert not grammar.is_generatable([0, 1, 99, 3, 4])  # foreign key


class TestGenerateSynthetic:
    def _spec(self, **overrides):
        grammar = ev.layered_grammar(n_keys=18, layer_width=3, seed=4)
        defaults = dict(grammar=grammar, n_normal=30, n_anomalous=12, seed=5)
        defaults.update(overrides)
        return ev.SyntheticSpec(**defaults)

    def test_counts_and_labels(self):
        sequences = ev.generate_synthetic(self._spec())
        assert sum(1 for s in sequences if s.label == LABEL_NORMAL) == 30
        assert sum(1 for s in sequences if s.label == LABEL_ANOMALOUS) == 12

    def test_same_seed_identical_corpus(self):
        a = ev.generate_synthetic(self._spec())
        b = ev.generate_synthetic(self._spec())
        assert [(s.keys, s.label, s.provenance) for s in a] == \
            [(s.keys, s.label, s.provenance) for s in b]

    def test_anomalies_never_generatable(self):
        spec = self._spec()
        for seq in ev.generate_synthetic(spec):
            if seq.label == LABEL_ANOMALOUS:
                assert not spec.grammar.is_generatable(seq.keys)
            else:
                assert spec.grammar.is_generatable(seq.keys)

    def test_foreign_anomalies_use_outside_alphabet(self):
        spec = self._spec(anomaly_kinds=("foreign",))
        alphabet = spec.grammar.alphabet
        for seq in ev.generate_synthetic(spec):
            if seq.label == LABEL_ANOMALOUS:
                assert any(k not in alphabet for k in seq.keys)

    def test_swap_anomalies_stay_in_alphabet(self):
        spec = self._spec(anomaly_kinds=("swap",))
        alphabet = spec.grammar.alphabet
        for seq in ev.generate_synthetic(spec):
            if seq.label == LABEL_ANOMALOUS:
                assert all(k in alphabet for k in seq.keys)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            self._spec(anomaly_kinds=("nope",))


class TestSweepTopK:
    def test_nesting_and_recall_monotone(self, det_model, det_split):
        sequences = det_split.test_normal[:40] + det_split.test_anomalous
        ratios = [round(0.1 * i, 1) for i in range(1, 11)]
        points = ev.sweep_top_k(det_model, sequences, ratios)
        assert [p.value for p in points] == ratios
        for narrow, wide in zip(points, points[1:]):
            flagged_wide = {i for i, f in enumerate(wide.flags) if f}
            flagged_narrow = {i for i, f in enumerate(narrow.flags) if f}
            assert flagged_wide <= flagged_narrow
            assert wide.report.recall <= narrow.report.recall + 1e-12

    def test_ratio_one_flags_exactly_unseen(self, det_model, det_split):
        from logsentinel.corpus import UNSEEN_ID
        sequences = det_split.test_normal[:40] + det_split.test_anomalous
        point = ev.sweep_top_k(det_model, sequences, [1.0])[0]
        expected = [1 if UNSEEN_ID in s.keys else 0 for s in sequences]
        assert point.flags == expected


class TestReportFile:
    def test_format(self, tmp_path):
        points = [ev.SweepPoint(value=0.5, k=3, report=ev.MetricsReport(2, 1, 5, 2))]
        path = tmp_path / "report.tsv"
        ev.write_report(points, str(path), config_hash="abc123")
        header, row = path.read_text().strip().split("\n")
        assert header == "config_hash\tratio_or_size\tprecision\trecall\tf1"
        fields = row.split("\t")
        assert fields[0] == "abc123"
        assert fields[1] == "0.5"
        assert float(fields[2]) == pytest.approx(2 / 3, abs=1e-6)
