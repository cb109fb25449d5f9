"""Log anomaly detection toolkit.

Pipeline: mine templates from raw logs, group key streams into labeled
sequences, pretrain a small decoder-only language model on normal sequences,
optionally fine-tune it with a Top-K-reward policy gradient, then flag test
sequences whose observed keys fall outside the model's Top-K predictions.
"""

from .corpus import (BOS_ID, PAD_ID, RESERVED_TOKENS, UNSEEN_ID, CorpusSplit,
                     KeySequence, Vocabulary, build_split, group_by_session,
                     group_by_time_window, load_corpus, save_corpus)
from .detector import DetectorConfig, Verdict, detect, detect_batch, observed_key_ranks
from .evaluation import (MetricsReport, SyntheticSpec, TransitionGrammar, ablate_rl,
                         chain_grammar, deterministic_chain_grammar, generate_synthetic,
                         layered_grammar, parallel_chains_grammar, score, sweep_top_k,
                         sweep_training_size, two_branch_grammar)
from .finetune import Episode, RlConfig, StepRecord, finetune, ppo_update, rollout
from .model import (GptModel, ModelConfig, ensure_vocab_match, key_rank, sample_top_k,
                    top_k_set)
from .parsing import (PRESETS, DatasetPreset, FrozenTemplateTable, LogTemplate,
                      MaskingRule, TemplateMiner, load_templates)
from .training import TrainConfig, batchify, evaluate_next_key, position_loss, pretrain

__version__ = "0.1.0"
