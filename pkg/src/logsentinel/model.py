"""Decoder-only transformer language model over log-key ids.

GPT-2 style: learned positional embeddings, pre-norm residual blocks, GELU
MLPs, causal self-attention, and a bias-free LM head. Also houses the Top-K
prediction utilities (`top_k_set`, `key_rank`, `sample_top_k`) shared by the
detector and the policy-gradient reward so both measure the exact same
quantity, and the binary checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .corpus import RESERVED_TOKENS
from .errors import FormatError, InvalidKeyIdError, SequenceTooLongError, VocabMismatchError
from .fileio import atomic_write_bytes

_CHECKPOINT_MAGIC = b"LGPT"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 6
    n_heads: int = 6
    d_model: int = 60
    max_len: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class GptModel:
    """Causal next-key language model.

    A frozen (eval-mode) model is immutable and shareable across threads;
    training mutates parameters under exclusive ownership.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self._dropout_rng = np.random.default_rng((seed, 1))
        self._mask_cache: dict = {}
        d, v = config.d_model, config.vocab_size

        def weight(*shape):
            return ag.Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True, dtype=self.dtype)

        def zeros(*shape):
            return ag.Tensor(np.zeros(shape), requires_grad=True, dtype=self.dtype)

        def ones(*shape):
            return ag.Tensor(np.ones(shape), requires_grad=True, dtype=self.dtype)

        params: dict = {"tok_emb": weight(v, d), "pos_emb": weight(config.max_len, d)}
        for i in range(config.n_layers):
            params[f"h{i}.ln1.g"] = ones(d)
            params[f"h{i}.ln1.b"] = zeros(d)
            for proj in ("q", "k", "v", "o"):
                params[f"h{i}.attn.w{proj}"] = weight(d, d)
                params[f"h{i}.attn.b{proj}"] = zeros(d)
            params[f"h{i}.ln2.g"] = ones(d)
            params[f"h{i}.ln2.b"] = zeros(d)
            params[f"h{i}.mlp.w1"] = weight(d, 4 * d)
            params[f"h{i}.mlp.b1"] = zeros(4 * d)
            params[f"h{i}.mlp.w2"] = weight(4 * d, d)
            params[f"h{i}.mlp.b2"] = zeros(d)
        params["ln_f.g"] = ones(d)
        params["ln_f.b"] = zeros(d)
        params["head.w"] = weight(d, v)
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def seed_dropout(self, seed: int) -> None:
        self._dropout_rng = np.random.default_rng((seed, 1))

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_snapshot(self) -> dict:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for name, p in self.params.items():
            if name not in state or state[name].shape != p.data.shape:
                raise ValueError(f"state snapshot missing or mis-shaped for {name}")
            p.data = state[name].astype(self.dtype).copy()

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def _causal_mask(self, length: int) -> np.ndarray:
        mask = self._mask_cache.get(length)
        if mask is None:
            mask = np.triu(np.full((length, length), ag.MASK_FILL, dtype=self.dtype), k=1)
            self._mask_cache[length] = mask
        return mask

    def _maybe_dropout(self, x, train_mode: bool):
        if train_mode and self.config.dropout > 0.0:
            return ag.dropout(x, self.config.dropout, self._dropout_rng)
        return x

    def _layer_norm(self, x, prefix: str):
        return ag.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attention(self, x, layer: int, mask: np.ndarray, train_mode: bool, batch: int, length: int):
        cfg = self.config
        p = self.params

        def heads(name):
            proj = ag.add_bias(ag.matmul(x, p[f"h{layer}.attn.w{name}"]), p[f"h{layer}.attn.b{name}"])
            proj = ag.reshape(proj, (batch, length, cfg.n_heads, cfg.head_dim))
            return ag.transpose(proj, (0, 2, 1, 3))  # [B, h, T, hd]

        q, k, v = heads("q"), heads("k"), heads("v")
        att = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)))
        att = ag.mul_const(att, 1.0 / math.sqrt(cfg.head_dim))
        att = ag.add_const(att, mask)
        att = self._maybe_dropout(ag.softmax_rows(att), train_mode)
        out = ag.matmul(att, v)  # [B, h, T, hd]
        out = ag.reshape(ag.transpose(out, (0, 2, 1, 3)), (batch, length, cfg.d_model))
        out = ag.add_bias(ag.matmul(out, p[f"h{layer}.attn.wo"]), p[f"h{layer}.attn.bo"])
        return self._maybe_dropout(out, train_mode)

    def _mlp(self, x, layer: int, train_mode: bool):
        p = self.params
        hidden = ag.gelu(ag.add_bias(ag.matmul(x, p[f"h{layer}.mlp.w1"]), p[f"h{layer}.mlp.b1"]))
        out = ag.add_bias(ag.matmul(hidden, p[f"h{layer}.mlp.w2"]), p[f"h{layer}.mlp.b2"])
        return self._maybe_dropout(out, train_mode)

    def forward(self, ids, train_mode: bool = False):
        """Causal logits for a [T] or [B, T] id array; shape [T, V] or [B, T, V].

        Logits at position t depend only on positions <= t. Dropout is active
        only in train mode; eval mode consumes no randomness.
        """
        arr = np.asarray(ids)
        if not np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] == 0:
            raise ValueError(f"expected non-empty [T] or [B,T] ids, got shape {arr.shape}")
        batch, length = arr.shape
        cfg = self.config
        if length > cfg.max_len:
            raise SequenceTooLongError(f"sequence length {length} exceeds max_len {cfg.max_len}")
        if arr.min() < 0 or arr.max() >= cfg.vocab_size:
            raise InvalidKeyIdError(
                f"key ids must be in [0, {cfg.vocab_size}), got range [{arr.min()}, {arr.max()}]")

        positions = np.broadcast_to(np.arange(length), (batch, length))
        x = ag.add(ag.embedding(self.params["tok_emb"], arr),
                   ag.embedding(self.params["pos_emb"], positions))
        x = self._maybe_dropout(x, train_mode)
        mask = self._causal_mask(length)
        for i in range(cfg.n_layers):
            x = ag.add(x, self._attention(self._layer_norm(x, f"h{i}.ln1"), i, mask,
                                          train_mode, batch, length))
            x = ag.add(x, self._mlp(self._layer_norm(x, f"h{i}.ln2"), i, train_mode))
        x = self._layer_norm(x, "ln_f")
        logits = ag.matmul(x, self.params["head.w"])
        if single:
            logits = ag.reshape(logits, (length, cfg.vocab_size))
        return logits

    # ------------------------------------------------------------------
    # Prediction
    # ------------------------------------------------------------------

    def next_key_distributions(self, ids) -> np.ndarray:
        """Eval-mode distribution over the next key after every prefix.

        Row t is the distribution given ids[:t+1]. Reserved tokens (PAD, BOS,
        UNSEEN) are masked to zero probability and each row renormalized over
        the mined keys: only training-vocabulary keys are Top-K candidates,
        so an unseen key can never appear in a prediction set.
        """
        with ag.no_grad():
            logits = self.forward(ids).data.astype(np.float64)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(shifted)
        probs[..., :RESERVED_TOKENS] = 0.0
        probs /= probs.sum(axis=-1, keepdims=True)
        return probs

    def next_key_distribution(self, prefix) -> np.ndarray:
        """Distribution over the key following `prefix` (non-empty id sequence)."""
        prefix = np.asarray(prefix)
        if prefix.ndim != 1 or prefix.size == 0:
            raise ValueError("prefix must be a non-empty 1-D id sequence")
        return self.next_key_distributions(prefix)[-1]

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def save(self, path: str) -> None:
        """Binary checkpoint: magic, version, config JSON, named f32 tensors."""
        payload = bytearray()
        payload += _CHECKPOINT_MAGIC
        payload += struct.pack("<I", _CHECKPOINT_VERSION)
        cfg_json = json.dumps(asdict(self.config), sort_keys=True).encode("utf-8")
        payload += struct.pack("<I", len(cfg_json)) + cfg_json
        payload += struct.pack("<I", len(self.params))
        for name, tensor in self.params.items():
            encoded = name.encode("utf-8")
            payload += struct.pack("<I", len(encoded)) + encoded
            payload += struct.pack("<I", tensor.data.ndim)
            payload += struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape)
            payload += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        atomic_write_bytes(path, bytes(payload))

    @classmethod
    def load(cls, path: str) -> "GptModel":
        with open(path, "rb") as handle:
            blob = handle.read()
        view = memoryview(blob)
        offset = 0

        def take(n: int) -> memoryview:
            nonlocal offset
            if offset + n > len(view):
                raise FormatError(f"{path}: truncated checkpoint")
            chunk = view[offset:offset + n]
            offset += n
            return chunk

        if bytes(take(4)) != _CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic")
        (version,) = struct.unpack("<I", take(4))
        if version != _CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", take(4))
        try:
            config = ModelConfig(**json.loads(bytes(take(cfg_len)).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{path}: bad config block: {exc}") from exc
        model = cls(config, seed=0)
        (n_tensors,) = struct.unpack("<I", take(4))
        if n_tensors != len(model.params):
            raise FormatError(f"{path}: expected {len(model.params)} tensors, found {n_tensors}")
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", take(4))
            name = bytes(take(name_len)).decode("utf-8")
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
            target = model.params.get(name)
            if target is None or target.data.shape != tuple(shape):
                raise FormatError(f"{path}: unexpected tensor {name} {shape}")
            target.data = data.astype(np.float32).copy()
        if offset != len(view):
            raise FormatError(f"{path}: {len(view) - offset} trailing bytes")
        return model


def ensure_vocab_match(model: GptModel, vocab_size: int) -> None:
    if model.config.vocab_size != vocab_size:
        raise VocabMismatchError(
            f"model vocab_size {model.config.vocab_size} != corpus vocab size {vocab_size}")


# ---------------------------------------------------------------------------
# Top-K utilities (shared by detector and RL reward)
# ---------------------------------------------------------------------------

def _ranked_ids(dist: np.ndarray) -> np.ndarray:
    """All key ids ordered by (probability desc, id asc)."""
    return np.lexsort((np.arange(dist.shape[0]), -dist))


def top_k_set(dist: np.ndarray, k: int) -> set:
    """The k highest-probability ids; ties broken by ascending id."""
    dist = np.asarray(dist)
    if not 1 <= k <= dist.shape[0]:
        raise ValueError(f"k must be in [1, {dist.shape[0]}], got {k}")
    return set(int(i) for i in _ranked_ids(dist)[:k])


def key_rank(dist: np.ndarray, key: int) -> int:
    """Zero-based rank of `key` under (probability desc, id asc) ordering.

    `key in top_k_set(dist, k)` is equivalent to `key_rank(dist, key) < k`.
    """
    dist = np.asarray(dist)
    p = dist[key]
    higher = int(np.count_nonzero(dist > p))
    tied_before = int(np.count_nonzero(dist[:key] == p))
    return higher + tied_before


def sample_top_k(dist: np.ndarray, k: int, rng: np.random.Generator):
    """Sample from the Top-K set with probabilities renormalized over the set.

    Returns (key_id, log-probability under the renormalized distribution).
    """
    dist = np.asarray(dist)
    if not 1 <= k <= dist.shape[0]:
        raise ValueError(f"k must be in [1, {dist.shape[0]}], got {k}")
    top = _ranked_ids(dist)[:k]
    weights = dist[top].astype(np.float64)
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("top-k mass is zero; distribution is not a probability vector")
    probs = weights / total
    probs /= probs.sum()
    choice = int(rng.choice(k, p=probs))
    return int(top[choice]), float(np.log(probs[choice]))
