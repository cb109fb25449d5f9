"""Next-key language-model pretraining on normal sequences.

The loss is per-token mean cross-entropy over every next-key position of
every training sequence, with PAD targets excluded, so long sequences are
not down-weighted. BOS is prepended so the first real key is predicted too.
Fixed seed means a bitwise-reproducible loss curve on one thread.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .corpus import BOS_ID, PAD_ID
from .errors import NumericalError
from .fileio import atomic_write_text
from .model import GptModel, ensure_vocab_match

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def batchify(sequences, batch_size: int, pad_id: int = PAD_ID):
    """Right-pad id sequences to the batch max length and shift for targets.

    Yields (inputs, targets) with width `max_len - 1`: inputs drop the last
    column, targets drop the first. Targets equal to `pad_id` are the mask.
    """
    if not sequences:
        raise ValueError("batchify requires at least one sequence")
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start:start + batch_size]
        width = max(len(s) for s in chunk)
        padded = np.full((len(chunk), width), pad_id, dtype=np.int64)
        for row, seq in enumerate(chunk):
            padded[row, :len(seq)] = seq
        yield padded[:, :-1], padded[:, 1:]


def _batch_loss(model: GptModel, inputs: np.ndarray, targets: np.ndarray, train_mode: bool):
    """(loss tensor, valid target count, top-1 hit count) for one padded batch."""
    logits = model.forward(inputs, train_mode=train_mode)
    flat_logits = ag.reshape(logits, (-1, model.config.vocab_size))
    flat_targets = targets.reshape(-1)
    loss = ag.cross_entropy(flat_logits, flat_targets, ignore_id=PAD_ID)
    valid = flat_targets != PAD_ID
    hits = int((flat_logits.data.argmax(axis=-1)[valid] == flat_targets[valid]).sum())
    return loss, int(valid.sum()), hits


def pretrain(model: GptModel, sequences, cfg: TrainConfig, vocab_size: int | None = None,
             metrics_path: str | None = None, checkpoint_dir: str | None = None):
    """Train the model on normal sequences; returns (model, per-epoch history).

    History rows carry `epoch`, `mean_loss` (exact per-token mean), and
    `top1_acc` measured on the training batches as seen (dropout active).
    """
    if not sequences:
        raise ValueError("training corpus is empty")
    if vocab_size is not None:
        ensure_vocab_match(model, vocab_size)
    rng = np.random.default_rng(cfg.seed)
    model.seed_dropout(cfg.seed)
    rows = [[BOS_ID] + list(seq.keys) for seq in sequences]
    params = model.parameters()
    opt_state = ag.AdamState.for_params(params)

    history = []
    metric_lines = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(rows))
        shuffled = [rows[i] for i in order]
        nll_sum = 0.0
        token_count = 0
        hit_count = 0
        for batch_no, (inputs, targets) in enumerate(batchify(shuffled, cfg.batch_size)):
            ag.clear_tape()
            model.zero_grads()
            loss, n_valid, hits = _batch_loss(model, inputs, targets, train_mode=True)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no} "
                    f"(batch shape {inputs.shape})")
            ag.backward(loss)
            grads = [p.grad for p in params]
            if cfg.grad_clip_norm > 0:
                ag.clip_grad_norm(grads, cfg.grad_clip_norm)
            ag.adam_step(params, grads, opt_state, lr=cfg.lr)
            nll_sum += value * n_valid
            token_count += n_valid
            hit_count += hits
        ag.clear_tape()
        mean_loss = nll_sum / token_count
        top1_acc = hit_count / token_count
        history.append({"epoch": epoch, "mean_loss": mean_loss, "top1_acc": top1_acc})
        metric_lines.append(f"{epoch}\t{mean_loss:.6f}\t{top1_acc:.6f}")
        logger.info("epoch %d: loss %.4f, top1 %.4f", epoch, mean_loss, top1_acc)
        if checkpoint_dir and cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
            model.save(os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.bin"))
    if metrics_path:
        atomic_write_text(metrics_path, "\n".join(metric_lines) + "\n")
    return model, history


def evaluate_next_key(model: GptModel, sequences, batch_size: int = 64):
    """Eval-mode per-token mean loss and top-1 accuracy over sequences."""
    rows = [[BOS_ID] + list(seq.keys) for seq in sequences]
    nll_sum = 0.0
    token_count = 0
    hit_count = 0
    with ag.no_grad():
        for inputs, targets in batchify(rows, batch_size):
            loss, n_valid, hits = _batch_loss(model, inputs, targets, train_mode=False)
            nll_sum += loss.item() * n_valid
            token_count += n_valid
            hit_count += hits
    return nll_sum / token_count, hit_count / token_count


def position_loss(model: GptModel, sequences, position: int) -> float:
    """Eval-mode mean NLL of the observed key at one sequence position.

    Position is a 0-based index into the key list; sequences shorter than
    position+1 are skipped. Used to check entropy floors at branch points.
    """
    nll_sum = 0.0
    count = 0
    with ag.no_grad():
        for seq in sequences:
            keys = list(seq.keys)
            if len(keys) <= position:
                continue
            dists = model.next_key_distributions([BOS_ID] + keys[:-1])
            prob = dists[position][keys[position]]
            nll_sum += -math.log(max(prob, 1e-300))
            count += 1
    if count == 0:
        raise ValueError(f"no sequence reaches position {position}")
    return nll_sum / count
