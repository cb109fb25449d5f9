"""Model forward contracts: causality, shapes, Top-K utilities, checkpoints."""

import numpy as np
import pytest

from logsentinel import autograd as ag
from logsentinel.corpus import PAD_ID
from logsentinel.errors import FormatError, InvalidKeyIdError, SequenceTooLongError, VocabMismatchError
from logsentinel.model import (GptModel, ModelConfig, ensure_vocab_match, key_rank,
                               sample_top_k, top_k_set)


def small_config(vocab_size=11, **overrides):
    defaults = dict(vocab_size=vocab_size, n_layers=2, n_heads=2, d_model=16,
                    max_len=32, dropout=0.1)
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture(autouse=True)
def fresh_tape():
    ag.clear_tape()
    yield
    ag.clear_tape()


class TestForward:
    def test_output_shape(self):
        model = GptModel(small_config(), seed=0)
        out = model.forward([1, 3, 4, 5])
        assert out.data.shape == (4, 11)
        out_batched = model.forward(np.array([[1, 2, 3], [4, 5, 6]]))
        assert out_batched.data.shape == (2, 3, 11)

    def test_causality_bit_exact(self):
        model = GptModel(small_config(), seed=1)
        base = np.array([1, 3, 4, 5, 6, 7, 8, 9])
        logits_a = model.forward(base).data
        for t in range(1, len(base)):
            edited = base.copy()
            edited[t] = (edited[t] + 1) % 11 or 1
            logits_b = model.forward(edited).data
            assert np.array_equal(logits_a[:t], logits_b[:t]), f"position {t} leaked backward"

    def test_zero_head_gives_uniform_softmax(self):
        model = GptModel(small_config(), seed=2)
        model.params["head.w"].data[:] = 0.0
        logits = model.forward([1, 2, 3]).data
        probs = np.exp(logits) / np.exp(logits).sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(probs, 1.0 / 11, atol=1e-7)

    def test_eval_forward_deterministic_no_rng(self):
        model = GptModel(small_config(), seed=3)
        rng_state_before = model._dropout_rng.bit_generator.state
        a = model.forward([1, 2, 3, 4]).data
        b = model.forward([1, 2, 3, 4]).data
        assert np.array_equal(a, b)
        assert model._dropout_rng.bit_generator.state == rng_state_before

    def test_train_mode_uses_dropout(self):
        model = GptModel(small_config(), seed=4)
        a = model.forward([1, 2, 3, 4], train_mode=True).data
        b = model.forward([1, 2, 3, 4], train_mode=True).data
        assert not np.array_equal(a, b)

    def test_over_length_rejected(self):
        model = GptModel(small_config(max_len=8), seed=0)
        with pytest.raises(SequenceTooLongError):
            model.forward(list(range(1, 10)))

    def test_bad_id_rejected(self):
        model = GptModel(small_config(), seed=0)
        with pytest.raises(InvalidKeyIdError):
            model.forward([1, 11])
        with pytest.raises(InvalidKeyIdError):
            model.forward([-1, 2])

    def test_param_count_closed_form(self):
        cfg = small_config()
        model = GptModel(cfg, seed=0)
        d, v, L = cfg.d_model, cfg.vocab_size, cfg.n_layers
        expected = (
            v * d + cfg.max_len * d                      # embeddings
            + L * (4 * (d * d + d)                       # attention projections
                   + (d * 4 * d + 4 * d)                 # MLP up
                   + (4 * d * d + d)                     # MLP down
                   + 4 * d)                              # two layer norms
            + 2 * d                                      # final norm
            + d * v                                      # LM head
        )
        assert model.param_count() == expected

    def test_default_config_matches_paper_scale(self):
        cfg = ModelConfig(vocab_size=18)
        assert (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.head_dim) == (6, 6, 60, 10)


class TestNextKeyDistribution:
    def test_sums_to_one_and_reserved_masked(self):
        model = GptModel(small_config(), seed=5)
        dist = model.next_key_distribution([1, 4, 7])
        assert dist.shape == (11,)
        assert dist.sum() == pytest.approx(1.0, abs=1e-6)
        # Reserved ids (PAD/BOS/UNSEEN) are never prediction candidates.
        assert dist[PAD_ID] == 0.0
        assert dist[1] == 0.0 and dist[2] == 0.0

    def test_all_positions_match_per_prefix(self):
        model = GptModel(small_config(), seed=6)
        seq = [1, 5, 6, 7, 8]
        rows = model.next_key_distributions(seq)
        for t in range(1, len(seq) + 1):
            np.testing.assert_allclose(rows[t - 1], model.next_key_distribution(seq[:t]),
                                       atol=1e-12)

    def test_empty_prefix_rejected(self):
        model = GptModel(small_config(), seed=0)
        with pytest.raises(ValueError):
            model.next_key_distribution([])


class TestTopK:
    def test_full_vocab(self):
        dist = np.array([0.1, 0.2, 0.3, 0.4])
        assert top_k_set(dist, 4) == {0, 1, 2, 3}

    def test_k_one_is_argmax(self):
        assert top_k_set(np.array([0.1, 0.7, 0.2]), 1) == {1}

    def test_tie_breaks_to_lower_id(self):
        dist = np.zeros(12)
        dist[[1, 4, 9]] = [0.5, 0.25, 0.25]
        # Ids 4 and 9 tie at the K-th slot; the lower id wins.
        assert top_k_set(dist, 2) == {1, 4}

    def test_bad_k(self):
        with pytest.raises(ValueError):
            top_k_set(np.array([1.0]), 0)
        with pytest.raises(ValueError):
            top_k_set(np.array([1.0]), 2)

    def test_rank_membership_equivalence(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            v = rng.integers(2, 12)
            dist = rng.dirichlet(np.ones(v))
            if rng.random() < 0.3:
                dist[rng.integers(v)] = dist[rng.integers(v)]  # inject ties sometimes
                dist = dist / dist.sum()
            for k in range(1, v + 1):
                members = top_k_set(dist, k)
                for key in range(v):
                    assert (key in members) == (key_rank(dist, key) < k)


class TestSampleTopK:
    def test_k_one_always_argmax(self):
        rng = np.random.default_rng(8)
        dist = np.array([0.1, 0.7, 0.2])
        for _ in range(20):
            key, logp = sample_top_k(dist, 1, rng)
            assert key == 1
            assert logp == pytest.approx(0.0, abs=1e-12)

    def test_renormalized_logp(self):
        rng = np.random.default_rng(9)
        dist = np.array([0.5, 0.3, 0.15, 0.05])
        seen = {}
        for _ in range(200):
            key, logp = sample_top_k(dist, 2, rng)
            seen[key] = logp
        assert set(seen) == {0, 1}
        assert seen[0] == pytest.approx(np.log(0.5 / 0.8), abs=1e-12)
        assert seen[1] == pytest.approx(np.log(0.3 / 0.8), abs=1e-12)

    def test_full_vocab_frequencies_match(self):
        rng = np.random.default_rng(10)
        dist = np.array([0.4, 0.3, 0.2, 0.1])
        n = 100_000
        counts = np.zeros(4)
        for _ in range(n):
            key, _ = sample_top_k(dist, 4, rng)
            counts[key] += 1
        # 3-sigma multinomial bounds per key.
        for i in range(4):
            sigma = np.sqrt(n * dist[i] * (1 - dist[i]))
            assert abs(counts[i] - n * dist[i]) < 3 * sigma


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = GptModel(small_config(), seed=11)
        path = str(tmp_path / "model.bin")
        model.save(path)
        loaded = GptModel.load(path)
        assert loaded.config == model.config
        for name, p in model.named_parameters():
            assert np.array_equal(loaded.params[name].data, p.data), name
        fixed = [1, 2, 3, 4, 5]
        assert np.array_equal(model.forward(fixed).data, loaded.forward(fixed).data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(FormatError):
            GptModel.load(str(path))

    def test_truncated_file(self, tmp_path):
        model = GptModel(small_config(), seed=0)
        path = tmp_path / "model.bin"
        model.save(str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            GptModel.load(str(path))

    def test_vocab_mismatch_is_explicit(self, tmp_path):
        model = GptModel(small_config(vocab_size=11), seed=0)
        with pytest.raises(VocabMismatchError, match="11"):
            ensure_vocab_match(model, 14)
        ensure_vocab_match(model, 11)

    def test_state_snapshot_round_trip(self):
        model = GptModel(small_config(), seed=12)
        snap = model.state_snapshot()
        before = model.forward([1, 2, 3]).data.copy()
        model.params["head.w"].data += 1.0
        assert not np.array_equal(model.forward([1, 2, 3]).data, before)
        model.load_state(snap)
        assert np.array_equal(model.forward([1, 2, 3]).data, before)
