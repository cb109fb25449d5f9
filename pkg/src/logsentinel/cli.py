"""Command-line pipeline wiring all stages.

Subcommands: parse, corpus, pretrain, finetune, detect, eval, sweep, run-all.
Configuration is a JSON file of nested key/value sections; every field can be
overridden with `--set section.key=value`, and the resolved config plus its
content hash is written next to every artifact for provenance. `run-all`
caches stages: a stage is skipped when its config subset and input artifact
hashes match the previous run.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical
failure. LOGSENTINEL_SEED provides the seed when neither flag nor config
sets one.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import re
import sys

from . import corpus as cp
from . import evaluation as ev
from . import parsing as ps
from .detector import DetectorConfig, detect_batch, write_trace, write_verdicts
from .errors import FormatError, LogSentinelError, NumericalError
from .fileio import atomic_write_text, sha256_bytes, sha256_file
from .finetune import RlConfig, finetune
from .model import GptModel, ModelConfig, ensure_vocab_match
from .training import TrainConfig, pretrain

logger = logging.getLogger(__name__)


class UsageError(LogSentinelError):
    """Bad command-line arguments or configuration keys."""


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "artifacts",
    "jobs": 1,
    "dataset": {
        "kind": "synthetic",          # "synthetic" or "raw"
        "path": "",
        "preset": "generic",
        "labels": "",                 # optional provenance->label csv (HDFS style)
        "grouping": "session",        # "session" or "window"
        "window_seconds": 60.0,
        "n_train": 2000,
        "parser": {"depth": 4, "sim_threshold": 0.5, "max_children": 100},
        "synthetic": {
            "grammar": "layered",     # "layered", "deterministic_chain", "two_branch"
            "n_keys": 30,
            "layer_width": 3,
            "max_branching": 3,
            "grammar_seed": 0,
            "n_normal": 3000,
            "n_anomalous": 200,
            "kinds": "foreign,swap,truncate_foreign",
        },
    },
    "model": {"n_layers": 6, "n_heads": 6, "d_model": 60, "max_len": 512, "dropout": 0.1},
    "train": {"lr": 1e-4, "batch_size": 16, "epochs": 100, "grad_clip_norm": 1.0,
              "checkpoint_every": 0},
    "rl": {"enabled": True, "lr": 1e-6, "episodes": 20, "prompt_ratio": 0.5,
           "ppo_epochs": 4, "clip_epsilon": 0.2, "early_stop_patience": 3,
           "batch_prompts": 64},
    "detector": {"top_k_ratio": 0.5, "score_first_key": True},
}


# ---------------------------------------------------------------------------
# Configuration plumbing
# ---------------------------------------------------------------------------

def _flatten(tree: dict, prefix: str = ""):
    for key, value in tree.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            yield from _flatten(value, path)
        else:
            yield path, value


def _set_path(tree: dict, path: str, value) -> None:
    keys = path.split(".")
    node = tree
    for key in keys[:-1]:
        if key not in node or not isinstance(node[key], dict):
            raise UsageError(f"unknown config section {path!r}")
        node = node[key]
    if keys[-1] not in node:
        raise UsageError(f"unknown config field {path!r}")
    node[keys[-1]] = value


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in base:
            raise UsageError(f"unknown config field {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config field {path!r} must be a section")
            _merge(base[key], value, path)
        else:
            base[key] = value


def load_config(config_path: str | None, overrides, seed_flag=None) -> dict:
    """Resolve defaults <- config file <- --set overrides, then the seed.

    Seed precedence: --seed flag, explicit config value, LOGSENTINEL_SEED
    environment variable, built-in default.
    """
    config = copy.deepcopy(DEFAULT_CONFIG)
    seed_in_file = False
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as handle:
                file_config = json.load(handle)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{config_path}: invalid JSON: {exc}") from exc
        if not isinstance(file_config, dict):
            raise FormatError(f"{config_path}: config must be a JSON object")
        seed_in_file = "seed" in file_config
        _merge(config, file_config)
    seed_in_overrides = False
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        path, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(config, path.strip(), value)
        seed_in_overrides = seed_in_overrides or path.strip() == "seed"
    if seed_flag is not None:
        config["seed"] = seed_flag
    elif not seed_in_file and not seed_in_overrides and "LOGSENTINEL_SEED" in os.environ:
        config["seed"] = int(os.environ["LOGSENTINEL_SEED"])
    return config


def config_hash(config: dict) -> str:
    """Hash of the result-relevant configuration.

    out_dir and jobs never change results, so they are excluded: fixed-seed
    reruns produce byte-identical reports wherever they are written.
    """
    relevant = {k: v for k, v in config.items() if k not in ("out_dir", "jobs")}
    return sha256_bytes(json.dumps(relevant, sort_keys=True).encode("utf-8"))


def _write_resolved_config(config: dict, out_dir: str) -> str:
    digest = config_hash(config)
    payload = dict(config)
    payload["config_hash"] = digest
    atomic_write_text(os.path.join(out_dir, "resolved_config.json"),
                      json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return digest


def _config_epilog() -> str:
    lines = ["configuration fields (override with --set field=value):"]
    for path, value in _flatten(DEFAULT_CONFIG):
        lines.append(f"  {path} = {value!r}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Stage cache
# ---------------------------------------------------------------------------

def _stage_fresh(meta_path: str, stage_hash: str, outputs) -> bool:
    if not os.path.exists(meta_path):
        return False
    try:
        with open(meta_path, "r", encoding="utf-8") as handle:
            meta = json.load(handle)
    except (OSError, json.JSONDecodeError):
        return False
    if meta.get("stage_hash") != stage_hash:
        return False
    for path, digest in meta.get("outputs", {}).items():
        if not os.path.exists(path) or sha256_file(path) != digest:
            return False
    return set(meta.get("outputs", {})) == {os.path.abspath(p) for p in outputs}


def _stage_done(meta_path: str, stage_hash: str, outputs) -> None:
    meta = {"stage_hash": stage_hash,
            "outputs": {os.path.abspath(p): sha256_file(p) for p in outputs}}
    atomic_write_text(meta_path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _stage_hash(subset: dict, input_paths=()) -> str:
    payload = {"config": subset, "inputs": [sha256_file(p) for p in input_paths]}
    return sha256_bytes(json.dumps(payload, sort_keys=True).encode("utf-8"))


# ---------------------------------------------------------------------------
# Stage implementations (shared by single commands and run-all)
# ---------------------------------------------------------------------------

def _require_file(path: str, what: str) -> str:
    if not path:
        raise UsageError(f"missing required {what}")
    if not os.path.exists(path):
        raise FormatError(f"{what} not found: {path}")
    return path

def stage_parse(input_path: str, preset_name: str, parser_cfg: dict, out_dir: str):
    """Mine templates and emit the per-line key stream."""
    if preset_name not in ps.PRESETS:
        raise UsageError(
            f"unknown preset {preset_name!r}; available: {', '.join(sorted(ps.PRESETS))}")
    preset = ps.PRESETS[preset_name]
    miner = ps.TemplateMiner(depth=int(parser_cfg["depth"]),
                             sim_threshold=float(parser_cfg["sim_threshold"]),
                             max_children=int(parser_cfg["max_children"]),
                             masking_rules=preset.masking)
    session_pattern = re.compile(preset.session_regex) if preset.session_regex else None
    rows = []
    skipped = 0
    with open(input_path, "r", encoding="utf-8", errors="replace") as handle:
        for line_no, line in enumerate(handle):
            parsed = preset.extract(line)
            if parsed is None or not parsed.content.strip():
                skipped += 1
                continue
            key_id = miner.parse_line(parsed.content)
            ts = "-" if parsed.timestamp is None else f"{parsed.timestamp:.6f}"
            session = "-"
            if session_pattern is not None:
                match = session_pattern.search(line)
                if match:
                    session = match.group(1)
            rows.append(f"{line_no}\t{key_id}\t{parsed.label}\t{ts}\t{session}")
    if not rows:
        raise FormatError(f"{input_path}: no parseable log lines")
    os.makedirs(out_dir, exist_ok=True)
    templates_path = os.path.join(out_dir, "templates.tsv")
    keystream_path = os.path.join(out_dir, "keystream.tsv")
    miner.freeze().save(templates_path)
    atomic_write_text(keystream_path, "\n".join(rows) + "\n")
    logger.info("parsed %d lines into %d templates (%d skipped)",
                len(rows), len(miner.templates), skipped)
    return templates_path, keystream_path


def _read_keystream(path: str):
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 fields")
            rows.append(fields)
    return rows


def _load_label_map(path: str):
    label_map = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.lower().startswith("blockid"):
                continue
            provenance, _, text = line.partition(",")
            label_map[provenance] = 0 if text.strip().lower() == "normal" else 1
    return label_map


def stage_corpus_from_keystream(keystream_path: str, grouping: str, window_seconds: float,
                                labels_path: str, n_train: int, seed: int, out_dir: str):
    rows = _read_keystream(keystream_path)
    if grouping == "session":
        stream = [(int(r[0]), int(r[1]), r[4]) for r in rows if r[4] != "-"]
        dropped_no_session = len(rows) - len(stream)
        label_map = _load_label_map(labels_path) if labels_path else None
        sequences, dropped = cp.group_by_session(stream, r"(.+)", label_map=label_map)
        dropped += dropped_no_session
    elif grouping == "window":
        bad = [r for r in rows if r[3] == "-"]
        if bad:
            raise FormatError(f"{keystream_path}: {len(bad)} lines lack timestamps "
                              "required for window grouping")
        sequences = cp.group_by_time_window(
            [(float(r[3]), int(r[1]), int(r[2])) for r in rows], window_seconds)
        dropped = 0
    else:
        raise UsageError(f"unknown grouping {grouping!r}; use 'session' or 'window'")
    split = cp.build_split(sequences, n_train=n_train, seed=seed)
    corpus_dir = os.path.join(out_dir, "corpus")
    split.save(corpus_dir)
    logger.info("grouped %d sequences (%d lines dropped), vocab %d",
                len(sequences), dropped, split.vocab.size)
    return corpus_dir


def _build_grammar(synth: dict):
    name = synth["grammar"]
    if name == "layered":
        return ev.layered_grammar(n_keys=int(synth["n_keys"]),
                                  layer_width=int(synth["layer_width"]),
                                  max_branching=int(synth["max_branching"]),
                                  seed=int(synth["grammar_seed"]))
    if name == "deterministic_chain":
        return ev.deterministic_chain_grammar(n_keys=int(synth["n_keys"]))
    if name == "two_branch":
        return ev.two_branch_grammar()
    raise UsageError(f"unknown synthetic grammar {name!r}")


def stage_corpus_synthetic(dataset_cfg: dict, seed: int, out_dir: str):
    synth = dataset_cfg["synthetic"]
    spec = ev.SyntheticSpec(
        grammar=_build_grammar(synth),
        n_normal=int(synth["n_normal"]),
        n_anomalous=int(synth["n_anomalous"]),
        anomaly_kinds=tuple(k for k in str(synth["kinds"]).split(",") if k),
        seed=seed,
    )
    sequences = ev.generate_synthetic(spec)
    split = cp.build_split(sequences, n_train=int(dataset_cfg["n_train"]), seed=seed)
    corpus_dir = os.path.join(out_dir, "corpus")
    split.save(corpus_dir)
    return corpus_dir


def _model_config(model_cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size,
                       n_layers=int(model_cfg["n_layers"]),
                       n_heads=int(model_cfg["n_heads"]),
                       d_model=int(model_cfg["d_model"]),
                       max_len=int(model_cfg["max_len"]),
                       dropout=float(model_cfg["dropout"]))


def _train_config(train_cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(lr=float(train_cfg["lr"]), batch_size=int(train_cfg["batch_size"]),
                       epochs=int(train_cfg["epochs"]), seed=seed,
                       grad_clip_norm=float(train_cfg["grad_clip_norm"]),
                       checkpoint_every=int(train_cfg["checkpoint_every"]))


def _rl_config(rl_cfg: dict, top_k_ratio: float, seed: int) -> RlConfig:
    clip = rl_cfg["clip_epsilon"]
    return RlConfig(lr=float(rl_cfg["lr"]), episodes=int(rl_cfg["episodes"]),
                    prompt_ratio=float(rl_cfg["prompt_ratio"]),
                    ppo_epochs=int(rl_cfg["ppo_epochs"]),
                    clip_epsilon=None if clip in (None, "none") else float(clip),
                    early_stop_patience=int(rl_cfg["early_stop_patience"]),
                    top_k_ratio=top_k_ratio,
                    batch_prompts=int(rl_cfg["batch_prompts"]), seed=seed)


def stage_pretrain(corpus_dir: str, model_cfg: dict, train_cfg: dict, seed: int,
                   out_dir: str) -> str:
    split = cp.CorpusSplit.load(corpus_dir)
    model = GptModel(_model_config(model_cfg, split.vocab.size), seed=seed)
    model, _ = pretrain(model, split.train, _train_config(train_cfg, seed),
                        vocab_size=split.vocab.size,
                        metrics_path=os.path.join(out_dir, "pretrain_metrics.tsv"),
                        checkpoint_dir=out_dir)
    model_path = os.path.join(out_dir, "model.bin")
    model.save(model_path)
    return model_path


def stage_finetune(model_path: str, corpus_dir: str, rl_cfg: dict, top_k_ratio: float,
                   seed: int, out_dir: str) -> str:
    split = cp.CorpusSplit.load(corpus_dir)
    model = GptModel.load(model_path)
    ensure_vocab_match(model, split.vocab.size)
    model, _ = finetune(model, split.train, _rl_config(rl_cfg, top_k_ratio, seed),
                        validation=split.test_normal[:200] or None,
                        metrics_path=os.path.join(out_dir, "rl_metrics.tsv"))
    tuned_path = os.path.join(out_dir, "model_rl.bin")
    model.save(tuned_path)
    return tuned_path


def stage_detect(model_path: str, corpus_path: str, detector_cfg: dict, jobs: int,
                 out_path: str, trace: bool = False):
    sequences, vocab_size = cp.load_corpus(corpus_path)
    model = GptModel.load(model_path)
    ensure_vocab_match(model, vocab_size)
    cfg = DetectorConfig(top_k_ratio=float(detector_cfg["top_k_ratio"]),
                         score_first_key=bool(detector_cfg["score_first_key"]))
    verdicts, stats = detect_batch(model, sequences, cfg, jobs=jobs, trace=trace)
    write_verdicts(verdicts, out_path)
    if trace:
        write_trace(verdicts, out_path + ".trace.jsonl")
    logger.info("detect: %s", stats)
    return verdicts, [s.label for s in sequences]


def _read_verdict_flags(path: str):
    flags = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 fields")
            flags.append(int(fields[1]))
    return flags


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_parse(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    parser_cfg = config["dataset"]["parser"]
    out_dir = args.out_dir or config["out_dir"]
    stage_parse(_require_file(args.input, "input log"), args.preset, parser_cfg, out_dir)
    _write_resolved_config(config, out_dir)
    return 0


def cmd_corpus(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    dataset = config["dataset"]
    out_dir = args.out_dir or config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    if args.keystream:
        corpus_dir = stage_corpus_from_keystream(
            _require_file(args.keystream, "keystream"),
            args.group_by or dataset["grouping"],
            args.window_seconds or float(dataset["window_seconds"]),
            args.labels or dataset["labels"],
            args.n_train or int(dataset["n_train"]),
            config["seed"], out_dir)
    else:
        if dataset["kind"] != "synthetic":
            raise UsageError("raw corpus needs --keystream (run `parse` first)")
        if args.n_train:
            dataset["n_train"] = args.n_train
        corpus_dir = stage_corpus_synthetic(dataset, config["seed"], out_dir)
    _write_resolved_config(config, out_dir)
    print(corpus_dir)
    return 0


def cmd_pretrain(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    out_dir = args.out_dir or config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    model_path = stage_pretrain(_require_file(args.corpus_dir, "corpus directory"),
                                config["model"], config["train"], config["seed"], out_dir)
    _write_resolved_config(config, out_dir)
    print(model_path)
    return 0


def cmd_finetune(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    out_dir = args.out_dir or config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    tuned = stage_finetune(_require_file(args.model, "model checkpoint"),
                           _require_file(args.corpus_dir, "corpus directory"),
                           config["rl"], float(config["detector"]["top_k_ratio"]),
                           config["seed"], out_dir)
    _write_resolved_config(config, out_dir)
    print(tuned)
    return 0


def cmd_detect(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    if args.ratio is not None:
        config["detector"]["top_k_ratio"] = args.ratio
    out_path = args.out or os.path.join(config["out_dir"], "verdicts.tsv")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    stage_detect(_require_file(args.model, "model checkpoint"),
                 _require_file(args.corpus, "corpus file"),
                 config["detector"], args.jobs or int(config["jobs"]),
                 out_path, trace=args.trace)
    return 0


def cmd_eval(args) -> int:
    flags = _read_verdict_flags(_require_file(args.verdicts, "verdict file"))
    sequences, _ = cp.load_corpus(_require_file(args.corpus, "corpus file"))
    if len(flags) != len(sequences):
        raise FormatError(f"verdict count {len(flags)} != corpus count {len(sequences)}")
    report = ev.score(flags, [s.label for s in sequences])
    print(f"tp={report.tp} fp={report.fp} tn={report.tn} fn={report.fn}")
    print(f"precision={report.precision:.4f} recall={report.recall:.4f} f1={report.f1:.4f}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    out_path = args.out or os.path.join(config["out_dir"], f"sweep_{args.mode}.tsv")
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    digest = config_hash(config)
    if args.mode == "topk":
        sequences, vocab_size = cp.load_corpus(_require_file(args.corpus, "corpus file"))
        model = GptModel.load(_require_file(args.model, "model checkpoint"))
        ensure_vocab_match(model, vocab_size)
        ratios = [float(r) for r in args.ratios.split(",")]
        points = ev.sweep_top_k(model, sequences, ratios,
                                score_first_key=bool(config["detector"]["score_first_key"]))
    elif args.mode == "size":
        dataset = config["dataset"]
        if dataset["kind"] != "synthetic":
            raise UsageError("size sweeps are supported for synthetic datasets")
        synth = dataset["synthetic"]
        spec = ev.SyntheticSpec(grammar=_build_grammar(synth),
                                n_normal=int(synth["n_normal"]),
                                n_anomalous=int(synth["n_anomalous"]),
                                anomaly_kinds=tuple(str(synth["kinds"]).split(",")),
                                seed=config["seed"])
        sequences = ev.generate_synthetic(spec)
        sizes = [int(s) for s in args.sizes.split(",")]
        rl_cfg = None
        if config["rl"]["enabled"] and not args.no_rl:
            rl_cfg = _rl_config(config["rl"], float(config["detector"]["top_k_ratio"]),
                                config["seed"])
        params = ev.PipelineParams(
            n_train=max(sizes),
            train=_train_config(config["train"], config["seed"]),
            detector=DetectorConfig(top_k_ratio=float(config["detector"]["top_k_ratio"]),
                                    score_first_key=bool(config["detector"]["score_first_key"])),
            model_overrides={k: v for k, v in _model_config(config["model"], 10).__dict__.items()
                             if k != "vocab_size"},
            seed=config["seed"], rl=rl_cfg)
        points = ev.sweep_training_size(sequences, sizes, params)
    else:
        raise UsageError(f"unknown sweep mode {args.mode!r}; use 'topk' or 'size'")
    ev.write_report(points, out_path, digest)
    print(out_path)
    return 0


def cmd_run_all(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    if args.no_rl:
        config["rl"]["enabled"] = False
    out_dir = args.out_dir or config["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    digest = _write_resolved_config(config, out_dir)
    dataset = config["dataset"]
    seed = config["seed"]

    # Stage: corpus (synthetic) or parse+corpus (raw).
    corpus_dir = os.path.join(out_dir, "corpus")
    corpus_outputs = [os.path.join(corpus_dir, name)
                      for name in ("train.tsv", "test_normal.tsv", "test_anomalous.tsv")]
    if dataset["kind"] == "synthetic":
        corpus_hash = _stage_hash({"dataset": dataset, "seed": seed})
        meta = os.path.join(out_dir, "stage_corpus.json")
        if _stage_fresh(meta, corpus_hash, corpus_outputs):
            logger.info("corpus: cache hit")
        else:
            stage_corpus_synthetic(dataset, seed, out_dir)
            _stage_done(meta, corpus_hash, corpus_outputs)
    elif dataset["kind"] == "raw":
        input_path = _require_file(dataset["path"], "dataset.path")
        parse_hash = _stage_hash({"preset": dataset["preset"],
                                  "parser": dataset["parser"]}, [input_path])
        templates = os.path.join(out_dir, "templates.tsv")
        keystream = os.path.join(out_dir, "keystream.tsv")
        meta = os.path.join(out_dir, "stage_parse.json")
        if _stage_fresh(meta, parse_hash, [templates, keystream]):
            logger.info("parse: cache hit")
        else:
            stage_parse(input_path, dataset["preset"], dataset["parser"], out_dir)
            _stage_done(meta, parse_hash, [templates, keystream])
        corpus_hash = _stage_hash({"grouping": dataset["grouping"],
                                   "window_seconds": dataset["window_seconds"],
                                   "labels": dataset["labels"],
                                   "n_train": dataset["n_train"], "seed": seed},
                                  [keystream])
        meta = os.path.join(out_dir, "stage_corpus.json")
        if _stage_fresh(meta, corpus_hash, corpus_outputs):
            logger.info("corpus: cache hit")
        else:
            stage_corpus_from_keystream(keystream, dataset["grouping"],
                                        float(dataset["window_seconds"]),
                                        dataset["labels"], int(dataset["n_train"]),
                                        seed, out_dir)
            _stage_done(meta, corpus_hash, corpus_outputs)
    else:
        raise UsageError(f"unknown dataset.kind {dataset['kind']!r}")

    # Stage: pretrain.
    model_path = os.path.join(out_dir, "model.bin")
    pretrain_hash = _stage_hash({"model": config["model"], "train": config["train"],
                                 "seed": seed}, corpus_outputs)
    meta = os.path.join(out_dir, "stage_pretrain.json")
    if _stage_fresh(meta, pretrain_hash, [model_path]):
        logger.info("pretrain: cache hit")
    else:
        stage_pretrain(corpus_dir, config["model"], config["train"], seed, out_dir)
        _stage_done(meta, pretrain_hash, [model_path])

    # Stage: finetune (optional).
    detect_model = model_path
    if config["rl"]["enabled"]:
        tuned_path = os.path.join(out_dir, "model_rl.bin")
        rl_hash = _stage_hash({"rl": config["rl"],
                               "top_k_ratio": config["detector"]["top_k_ratio"],
                               "seed": seed}, [model_path] + corpus_outputs)
        meta = os.path.join(out_dir, "stage_finetune.json")
        if _stage_fresh(meta, rl_hash, [tuned_path]):
            logger.info("finetune: cache hit")
        else:
            stage_finetune(model_path, corpus_dir, config["rl"],
                           float(config["detector"]["top_k_ratio"]), seed, out_dir)
            _stage_done(meta, rl_hash, [tuned_path])
        detect_model = tuned_path

    # Stage: detect + eval over the combined test partitions.
    test_path = os.path.join(out_dir, "test_combined.tsv")
    test_normal, vocab_size = cp.load_corpus(corpus_outputs[1])
    test_anomalous, _ = cp.load_corpus(corpus_outputs[2])
    cp.save_corpus(test_normal + test_anomalous, vocab_size, test_path)
    verdicts_path = os.path.join(out_dir, "verdicts.tsv")
    report_path = os.path.join(out_dir, "report.tsv")
    detect_hash = _stage_hash({"detector": config["detector"]},
                              [detect_model, test_path])
    meta = os.path.join(out_dir, "stage_detect.json")
    if _stage_fresh(meta, detect_hash, [verdicts_path, report_path]):
        logger.info("detect: cache hit")
    else:
        verdicts, labels = stage_detect(detect_model, test_path, config["detector"],
                                        int(config["jobs"]), verdicts_path)
        report = ev.score(verdicts, labels)
        point = ev.SweepPoint(value=float(config["detector"]["top_k_ratio"]),
                              k=0, report=report)
        ev.write_report([point], report_path, digest)
        _stage_done(meta, detect_hash, [verdicts_path, report_path])
    with open(report_path, "r", encoding="utf-8") as handle:
        print(handle.read().strip().split("\n")[-1])
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--set", action="append", metavar="FIELD=VALUE",
                     help="override a config field (repeatable)")
    sub.add_argument("--seed", type=int, help="seed for every stochastic choice")
    sub.add_argument("--out-dir", help="artifact output directory")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logsentinel",
        description="Log anomaly detection: template mining, next-key language "
                    "modeling, Top-K reward fine-tuning, Top-K violation detection.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("parse", help="mine templates from a raw log file")
    p.add_argument("--input", required=True)
    p.add_argument("--preset", default="generic")
    _add_common(p)
    p.set_defaults(func=cmd_parse)

    p = commands.add_parser("corpus", help="group key streams into a labeled split")
    p.add_argument("--keystream", help="keystream.tsv from `parse` (omit for synthetic)")
    p.add_argument("--group-by", choices=["session", "window"])
    p.add_argument("--window-seconds", type=float)
    p.add_argument("--labels", help="provenance,label csv for session labeling")
    p.add_argument("--n-train", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_corpus)

    p = commands.add_parser("pretrain", help="train the language model on the corpus")
    p.add_argument("--corpus-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = commands.add_parser("finetune", help="policy-gradient fine-tuning with Top-K reward")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = commands.add_parser("detect", help="score a corpus file and write verdicts")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ratio", type=float, help="override detector.top_k_ratio")
    p.add_argument("--jobs", type=int)
    p.add_argument("--trace", action="store_true", help="emit JSON-lines rank trace")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = commands.add_parser("eval", help="score a verdict file against corpus labels")
    p.add_argument("--verdicts", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("sweep", help="Top-K ratio or training-size sweeps")
    p.add_argument("--mode", choices=["topk", "size"], required=True)
    p.add_argument("--model", help="model checkpoint (topk mode)")
    p.add_argument("--corpus", help="corpus file (topk mode)")
    p.add_argument("--ratios", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--sizes", default="50,200,1000,2000")
    p.add_argument("--no-rl", action="store_true")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = commands.add_parser("run-all", help="full pipeline with stage caching")
    p.add_argument("--no-rl", action="store_true", help="skip the RL stage")
    _add_common(p)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except LogSentinelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
