"""Policy-gradient fine-tuning with a Top-K reward.

Each episode rolls the current policy forward from sequence prompts: at
every step the reward is +1 if the observed ground-truth key is inside the
policy's Top-K set at that state and -1 otherwise, the action is sampled
from the renormalized Top-K distribution, and the state advances with the
sampled action. Updates maximize the importance-ratio objective
mean(ratio * reward) with optional clipping, via gradient ascent.

The reference ("old") log-probabilities used in the ratio are the values
computed on the first optimization pass of each round, before any step is
taken, so the ratio is exactly 1 there and the first-pass objective equals
the mean reward bit-for-bit. Rollout-recorded log-probs are kept on the
step records and cross-checked, not optimized against, because unbatched
and batched forwards may differ in the last float.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .corpus import BOS_ID, PAD_ID, RESERVED_TOKENS
from .detector import DetectorConfig, detect_batch
from .fileio import atomic_write_text
from .model import GptModel, key_rank, sample_top_k, top_k_set

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RlConfig:
    lr: float = 1e-6
    episodes: int = 20
    prompt_ratio: float = 0.5
    ppo_epochs: int = 4
    clip_epsilon: float | None = 0.2  # None runs the unclipped objective
    early_stop_patience: int = 3
    top_k_ratio: float = 0.5
    batch_prompts: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.prompt_ratio < 1.0:
            raise ValueError("prompt_ratio must be inside (0, 1)")
        if self.clip_epsilon is not None and self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive or None")
        if self.batch_prompts < 1:
            raise ValueError("batch_prompts must be at least 1")


@dataclass
class StepRecord:
    row: int       # logits row in the rolled sequence that scores this step
    action: int
    logp_old: float  # log-prob under the rollout policy's renormalized Top-K
    reward: int

    def __post_init__(self):
        if self.reward not in (1, -1):
            raise ValueError("reward must be +1 or -1")


@dataclass
class Episode:
    rolled: list   # BOS + prompt keys + sampled actions (model ids)
    steps: list
    provenance: str = ""


def rollout(model: GptModel, keys, prompt_ratio: float, k: int,
            rng: np.random.Generator, provenance: str = "") -> Episode | None:
    """Generate one episode from a sequence prompt; None if too short (< 2 keys).

    The prompt is the first max(1, floor(prompt_ratio * T)) keys. Rewards are
    judged against the rollout-time policy's Top-K set at each state, through
    the same rank computation the detector uses.
    """
    keys = list(keys)
    length = len(keys)
    if length < 2:
        return None
    prompt_len = max(1, int(prompt_ratio * length))
    state = [BOS_ID] + keys[:prompt_len]
    steps = []
    for j in range(prompt_len, length):
        dist = model.next_key_distribution(state)
        reward = 1 if key_rank(dist, keys[j]) < k else -1
        action, logp = sample_top_k(dist, k, rng)
        steps.append(StepRecord(row=j, action=action, logp_old=logp, reward=reward))
        state.append(action)
    return Episode(rolled=state, steps=steps, provenance=provenance)


def _pad_rolled(episodes):
    """Stack rolled sequences (minus their final action) into a PAD-filled batch."""
    rows = [ep.rolled[:-1] for ep in episodes]
    width = max(len(r) for r in rows)
    batch = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        batch[i, :len(row)] = row
    return batch


def _step_arrays(episodes):
    batch_idx, row_idx, actions, rewards, logp_rollout = [], [], [], [], []
    for i, ep in enumerate(episodes):
        for step in ep.steps:
            batch_idx.append(i)
            row_idx.append(step.row)
            actions.append(step.action)
            rewards.append(step.reward)
            logp_rollout.append(step.logp_old)
    return (np.array(batch_idx), np.array(row_idx), np.array(actions),
            np.array(rewards, dtype=np.float64), np.array(logp_rollout))


def _topk_masks(step_logits: np.ndarray, actions: np.ndarray, k: int):
    """Per-step Top-K membership of the action plus the additive subset mask.

    The mask keeps only the Top-K ids minus the reserved tokens, matching the
    renormalized sampling distribution (reserved probability is zero there).
    """
    n, vocab = step_logits.shape
    shifted = step_logits.astype(np.float64)
    shifted -= shifted.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs[:, :RESERVED_TOKENS] = 0.0
    probs /= probs.sum(axis=-1, keepdims=True)
    member = np.zeros(n, dtype=bool)
    mask = np.full((n, vocab), ag.MASK_FILL, dtype=step_logits.dtype)
    for i in range(n):
        top = top_k_set(probs[i], k)
        keep = sorted(key for key in top if key >= RESERVED_TOKENS)
        mask[i, keep] = 0.0
        member[i] = key_rank(probs[i], actions[i]) < k
    return member, mask


def ppo_update(model: GptModel, episodes, cfg: RlConfig, k: int,
               opt_state: ag.AdamState) -> dict:
    """Run cfg.ppo_epochs ascent passes over the collected episodes.

    Steps whose action falls outside the current policy's Top-K set (so its
    renormalized probability is zero and the ratio non-finite) are skipped
    and counted. Returns first/final objective and diagnostics.
    """
    episodes = [ep for ep in episodes if ep.steps]
    if not episodes:
        raise ValueError("ppo_update needs at least one non-empty episode")
    batch = _pad_rolled(episodes)
    batch_idx, row_idx, actions, rewards, logp_rollout = _step_arrays(episodes)
    n_steps = len(actions)
    params = model.parameters()
    logp_reference = np.full(n_steps, np.nan)
    stats = {"skipped_steps": 0, "first_pass_objective": None,
             "final_objective": None, "rollout_logp_max_dev": 0.0,
             "objectives": [], "mean_logp_new": []}

    for pass_no in range(cfg.ppo_epochs):
        ag.clear_tape()
        model.zero_grads()
        logits = model.forward(batch, train_mode=False)
        step_values = logits.data[batch_idx, row_idx]
        member, mask = _topk_masks(step_values, actions, k)
        keep = member if pass_no == 0 else member & np.isfinite(logp_reference)
        stats["skipped_steps"] += int(n_steps - keep.sum())
        if not keep.any():
            logger.warning("ppo pass %d: every step skipped", pass_no)
            continue
        kept = np.flatnonzero(keep)
        step_logits = ag.gather_rows(logits, batch_idx[kept], row_idx[kept])
        masked = ag.add_const(step_logits, mask[kept])
        logp_new = ag.gather_log_softmax(masked, actions[kept])
        if pass_no == 0:
            logp_reference[kept] = logp_new.data
            stats["rollout_logp_max_dev"] = float(
                np.abs(logp_new.data - logp_rollout[kept]).max())
        ratio = ag.exp(ag.add_const(logp_new, -logp_reference[kept]))
        objective = ag.mul_const(ratio, rewards[kept])
        if cfg.clip_epsilon is not None:
            clipped = ag.mul_const(ag.clip(ratio, 1.0 - cfg.clip_epsilon,
                                           1.0 + cfg.clip_epsilon), rewards[kept])
            objective = ag.minimum(objective, clipped)
        j_value = ag.mean_all(objective)
        if stats["first_pass_objective"] is None:
            stats["first_pass_objective"] = j_value.item()
        stats["final_objective"] = j_value.item()
        stats["objectives"].append(j_value.item())
        stats["mean_logp_new"].append(float(logp_new.data.mean()))
        if not math.isfinite(j_value.item()):
            logger.warning("ppo pass %d: non-finite objective, skipping update", pass_no)
            continue
        ag.backward(ag.mul_const(j_value, -1.0))  # ascent on J
        ag.adam_step(params, [p.grad for p in params], opt_state, lr=cfg.lr)
    ag.clear_tape()
    return stats


def finetune(model: GptModel, sequences, cfg: RlConfig, validation=None,
             metrics_path: str | None = None):
    """Episode loop with early stopping; returns the best-reward model.

    Each episode rolls out a shuffled batch of prompts, updates the policy,
    and tracks mean reward. The returned model is the snapshot that achieved
    the highest mean rollout reward.
    """
    k = DetectorConfig(top_k_ratio=cfg.top_k_ratio).k_for_vocab(model.config.vocab_size)
    eligible = [seq for seq in sequences if len(seq.keys) >= 2]
    skipped_short = len(sequences) - len(eligible)
    if not eligible:
        raise ValueError("no sequence has the 2+ keys needed for a rollout")
    rng = np.random.default_rng(cfg.seed)
    opt_state = ag.AdamState.for_params(model.parameters())
    val_cfg = DetectorConfig(top_k_ratio=cfg.top_k_ratio)

    history = []
    metric_lines = []
    best_reward = -math.inf
    best_state = None
    stale_episodes = 0
    for episode_no in range(1, cfg.episodes + 1):
        order = rng.permutation(len(eligible))[:cfg.batch_prompts]
        pre_update_state = model.state_snapshot()
        episodes = []
        for idx in order:
            seq = eligible[idx]
            ep = rollout(model, seq.keys, cfg.prompt_ratio, k, rng, seq.provenance)
            if ep is not None and ep.steps:
                episodes.append(ep)
        step_rewards = [s.reward for ep in episodes for s in ep.steps]
        mean_reward = float(np.mean(step_rewards))
        update_stats = ppo_update(model, episodes, cfg, k, opt_state)

        violation_rate = None
        if validation:
            verdicts, _ = detect_batch(model, validation, val_cfg)
            violation_rate = sum(v.flag for v in verdicts) / len(verdicts)
        history.append({"episode": episode_no, "mean_reward": mean_reward,
                        "violation_rate": violation_rate, **update_stats})
        rate_text = "-" if violation_rate is None else f"{violation_rate:.6f}"
        metric_lines.append(f"{episode_no}\t{mean_reward:.6f}\t{rate_text}")
        logger.info("episode %d: mean reward %.4f, violation rate %s",
                    episode_no, mean_reward, rate_text)

        if mean_reward > best_reward:
            best_reward = mean_reward
            best_state = pre_update_state
            stale_episodes = 0
        else:
            stale_episodes += 1
            if stale_episodes >= cfg.early_stop_patience:
                logger.info("early stop after %d stale episodes", stale_episodes)
                break
    if best_state is not None:
        model.load_state(best_state)
    if metrics_path:
        atomic_write_text(metrics_path, "\n".join(metric_lines) + "\n")
    if skipped_short:
        logger.info("skipped %d sequences shorter than 2 keys", skipped_short)
    return model, history
