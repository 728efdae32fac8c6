"""Operator surface: ``synth``, ``train``, ``eval``, and ``analyze``.

One JSON config document drives everything; every field is optional and
falls back to the documented default, unknown keys are rejected, and a
handful of command-line flags override their config counterparts (flag
wins). Reports echo the fully resolved config plus content hashes of the
inputs, so any report is reproducible from what it records. Wall-clock
timings go to a sidecar file, never into reports: rerunning a pipeline
with identical configs must reproduce report bytes exactly.

Exit codes: 0 success, 2 config error, 3 I/O or malformed-input error,
4 training divergence, 5 missing/unusable evaluation data, 6 analysis
sample-size infeasibility.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import diagnostics
from .data import PairCorpus, SynthConfig, generate_synthetic, load_corpus, save_corpus, unique_document_rate
from .encoder import TowerConfig, atomic_write_text, encode_batch, load_checkpoint, save_checkpoint, tokenize
from .errors import DataError, DivergenceError, DualEncError, SampleSizeError
from .losses import LossConfig
from .numerics import Rng
from .retrieval import (
    build_index,
    load_judgments_tsv,
    mrr,
    ndcg_at_10,
    precision_at_1,
    rank_queries,
    save_judgments_tsv,
    save_rankings_tsv,
)
from .trainer import TrainConfig, train

__all__ = ["main", "DEFAULT_CONFIG", "load_effective_config", "canonical_json", "content_hash"]


class ConfigError(DualEncError):
    """Configuration file or flag problem; maps to exit code 2."""


class EvalInputError(DualEncError):
    """Evaluation inputs missing or unusable; maps to exit code 5."""


DEFAULT_CONFIG = {
    "data": {
        "num_topics": 8,
        "queries_per_topic": 125,
        "vocab_size": 512,
        "tokens_per_text": [6, 12],
        "unique_doc_rate": 0.95,
        "noise_rate": 0.1,
        "seed": 7,
    },
    "model": {
        "architecture": "ade-spl",
        "vocab_size": 4096,
        "embed_dim": 32,
        "out_dim": 32,
    },
    "train": {
        "steps": 2000,
        "batch_size": 32,
        "lr0": 1e-3,
        "optimizer": "adam",
        "seed": 7,
        "checkpoint_every": 0,
        "loss": {
            "objective": "standard",
            "temperature": 0.01,
            "pair_alpha": 0.1,
            "samtone_mode": "off",
            "bidirectional_base": True,
            "mask_duplicate_docs": False,
        },
    },
    "eval": {
        "mrr_cutoff": None,
    },
    "analyze": {
        "seed": 7,
        "sample_queries": 100,
        "ratio_samples": 10000,
        "ratio_bins": 80,
        "ratio_range": [-3.0, 5.0],
        "top1_bins": 40,
        "tsne": {
            "perplexity": 30.0,
            "iterations": 1000,
            "learning_rate": 100.0,
            "momentum": 0.5,
            "final_momentum": 0.8,
            "momentum_switch_iter": 250,
            "exaggeration": 12.0,
            "exaggeration_iters": 250,
            "seed": 0,
        },
    },
}

LOSS_CHOICES = {
    "standard": {"objective": "standard", "samtone_mode": "off"},
    "samtone": {"objective": "samtone", "samtone_mode": "query_side"},
    "samtone-bi": {"objective": "samtone", "samtone_mode": "bidirectional"},
    "pair": {"objective": "pair", "samtone_mode": "off"},
}


def _merge_validate(defaults: dict, user: dict, path: str = "") -> dict:
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<top>'} must be a JSON object")
    unknown = sorted(set(user) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} in section {path or '<top>'}")
    merged = {}
    for key, dval in defaults.items():
        if key in user and isinstance(dval, dict):
            merged[key] = _merge_validate(dval, user[key], f"{path}{key}.")
        elif key in user:
            merged[key] = user[key]
        else:
            merged[key] = copy.deepcopy(dval)
    return merged


def load_effective_config(config_path: str | None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- flag overrides, validated at each level."""
    user = {}
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: malformed JSON ({exc.msg})") from exc
    cfg = _merge_validate(DEFAULT_CONFIG, user)
    for dotted, value in (overrides or {}).items():
        node = cfg
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    return cfg


def _synth_config(cfg: dict) -> SynthConfig:
    section = dict(cfg["data"])
    section["tokens_per_text"] = tuple(section["tokens_per_text"])
    try:
        return SynthConfig(**section)
    except DualEncError as exc:
        raise ConfigError(f"data section: {exc}") from exc


def _model_config(cfg: dict) -> TowerConfig:
    try:
        return TowerConfig(**cfg["model"])
    except DualEncError as exc:
        raise ConfigError(f"model section: {exc}") from exc


def _train_config(cfg: dict) -> TrainConfig:
    section = dict(cfg["train"])
    loss = section.pop("loss")
    try:
        return TrainConfig(loss=LossConfig(**loss), **section)
    except DualEncError as exc:
        raise ConfigError(f"train section: {exc}") from exc


def _tsne_config(cfg: dict) -> diagnostics.TsneConfig:
    try:
        return diagnostics.TsneConfig(**cfg["analyze"]["tsne"])
    except DualEncError as exc:
        raise ConfigError(f"analyze.tsne section: {exc}") from exc


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def content_hash(path) -> str:
    """Git-style blob hash of a file's bytes."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_timings(out_dir: str, phases: list[tuple[str, float]]):
    lines = [f"{name}\t{seconds:.3f}s" for name, seconds in phases]
    atomic_write_text(os.path.join(out_dir, "timings.txt"), "\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    cfg = load_effective_config(args.config, _overrides(args, {"seed": "data.seed"}))
    synth_cfg = _synth_config(cfg)
    started = time.perf_counter()
    train_corpus, test_corpus, judgments = generate_synthetic(synth_cfg)
    os.makedirs(args.out, exist_ok=True)
    save_corpus(os.path.join(args.out, "train.jsonl"), train_corpus)
    save_corpus(os.path.join(args.out, "test.jsonl"), test_corpus)
    save_judgments_tsv(os.path.join(args.out, "judgments.tsv"), judgments)
    report = {
        "command": "synth",
        "config": cfg,
        "inputs": {} if args.config is None else {args.config: content_hash(args.config)},
        "train_pairs": len(train_corpus),
        "test_pairs": len(test_corpus),
        "realized_unique_doc_rate": {
            "train": unique_document_rate(train_corpus),
            "test": unique_document_rate(test_corpus),
        },
    }
    atomic_write_text(os.path.join(args.out, "synth_report.json"), canonical_json(report))
    _write_timings(args.out, [("synth", time.perf_counter() - started)])
    return 0


def _overrides(args, extra_map: dict | None = None) -> dict:
    mapping = {
        "arch": "model.architecture",
        "steps": "train.steps",
        "batch": "train.batch_size",
        "tau": "train.loss.temperature",
        "alpha": "train.loss.pair_alpha",
    }
    mapping.update(extra_map or {})
    overrides = {}
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[dotted] = value
    if getattr(args, "loss", None) is not None:
        for key, value in LOSS_CHOICES[args.loss].items():
            overrides[f"train.loss.{key}"] = value
    if getattr(args, "mask_dups", False):
        overrides["train.loss.mask_duplicate_docs"] = True
    return overrides


def cmd_train(args) -> int:
    cfg = load_effective_config(args.config, _overrides(args, {"seed": "train.seed"}))
    model_cfg = _model_config(cfg)
    train_cfg = _train_config(cfg)
    corpus = load_corpus(args.corpus)
    os.makedirs(args.out, exist_ok=True)
    started = time.perf_counter()

    def checkpoint_cb(params, step):
        name = "checkpoint.json" if step == train_cfg.steps else f"checkpoint_step{step:06d}.json"
        save_checkpoint(os.path.join(args.out, name), params, train_cfg.seed, step)

    params, logbook = train(train_cfg, corpus, model_cfg, checkpoint_cb=checkpoint_cb)
    atomic_write_text(os.path.join(args.out, "trainlog.csv"), logbook.to_csv())
    report = {
        "command": "train",
        "config": cfg,
        "inputs": {args.corpus: content_hash(args.corpus)},
        "steps": train_cfg.steps,
        "initial_loss": logbook.losses[0],
        "final_loss": logbook.losses[-1],
        "checkpoint": "checkpoint.json",
        "notes": {
            "pair_training_schedule": "single-stage",
        },
    }
    atomic_write_text(os.path.join(args.out, "train_report.json"), canonical_json(report))
    _write_timings(args.out, [("train", time.perf_counter() - started)])
    return 0


def cmd_eval(args) -> int:
    cfg = load_effective_config(args.config)
    if not os.path.exists(args.judgments):
        raise EvalInputError(f"judgments file not found: {args.judgments}")
    params, _, step = load_checkpoint(args.checkpoint)
    started = time.perf_counter()
    try:
        corpus = load_corpus(args.corpus)
        judgments = load_judgments_tsv(args.judgments)
        index = build_index(params, corpus.doc_items())
        rankings = rank_queries(params, index, [(r.query_id, r.query) for r in corpus])
        metrics = {
            "p_at_1": precision_at_1(rankings, judgments),
            "mrr": mrr(rankings, judgments, cutoff=cfg["eval"]["mrr_cutoff"]),
            "ndcg_at_10": ndcg_at_10(rankings, judgments),
        }
    except DataError as exc:
        raise EvalInputError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    save_rankings_tsv(os.path.join(args.out, "rankings.tsv"), rankings)
    report = {
        "command": "eval",
        "config": cfg,
        "inputs": {
            args.checkpoint: content_hash(args.checkpoint),
            args.corpus: content_hash(args.corpus),
            args.judgments: content_hash(args.judgments),
        },
        "checkpoint_step": step,
        "num_queries": len(rankings),
        "num_candidates": len(index),
        "metrics": metrics,
    }
    atomic_write_text(os.path.join(args.out, "eval_report.json"), canonical_json(report))
    _write_timings(args.out, [("eval", time.perf_counter() - started)])
    return 0


def _analyze_one(params, corpus: PairCorpus, cfg: dict, out_subdir: str) -> dict:
    a = cfg["analyze"]
    n_sample = a["sample_queries"]
    if n_sample > len(corpus):
        raise SampleSizeError(
            f"analyze sample of {n_sample} queries exceeds corpus size {len(corpus)}"
        )
    rng = Rng(a["seed"])
    pick = np.sort(rng.split("points").choice(len(corpus), n_sample, replace=False))
    sampled = [corpus.records[i] for i in pick]

    vocab = params.config.vocab_size
    q_emb = encode_batch(params, "query", [tokenize(r.query, vocab) for r in sampled])
    p_emb = encode_batch(params, "doc", [tokenize(r.doc, vocab) for r in sampled])

    index = build_index(params, corpus.doc_items())
    all_q = encode_batch(params, "query", [tokenize(r.query, vocab) for r in corpus])
    top1 = diagnostics.top1_similarity_distribution(all_q, index, a["top1_bins"])

    lo, hi = a["ratio_range"]
    ratio_edges = np.linspace(lo, hi, a["ratio_bins"] + 1)
    ratio = diagnostics.qq_qd_ratio_histogram(
        q_emb, p_emb, a["ratio_samples"], rng.split("ratio_pairs"), ratio_edges
    )

    projection = diagnostics.tsne(
        np.vstack([q_emb, p_emb]),
        ["query"] * n_sample + ["doc"] * n_sample,
        _tsne_config(cfg),
    )
    alignment = diagnostics.inter_tower_alignment(projection)

    os.makedirs(out_subdir, exist_ok=True)
    atomic_write_text(os.path.join(out_subdir, "top1_hist.csv"),
                      diagnostics.histogram_csv(top1.histogram))
    atomic_write_text(os.path.join(out_subdir, "ratio_hist.csv"),
                      diagnostics.histogram_csv(ratio.histogram))
    atomic_write_text(os.path.join(out_subdir, "projection.csv"),
                      diagnostics.projection_csv(projection))
    atomic_write_text(os.path.join(out_subdir, "projection.svg"),
                      diagnostics.projection_svg(projection))
    return {
        "top1_similarity": top1.summary(),
        "qq_qd_ratio": ratio.summary(),
        "inter_tower_alignment": alignment,
        "tsne": {
            "n_points": 2 * n_sample,
            "final_kl": projection.final_kl,
            "kl_after_exaggeration": projection.kl_after_exaggeration,
            "bandwidth_failures": len(projection.bandwidth_failures),
        },
    }


def cmd_analyze(args) -> int:
    cfg = load_effective_config(args.config, _overrides(args, {"seed": "analyze.seed"}))
    corpus = load_corpus(args.corpus)
    started = time.perf_counter()
    os.makedirs(args.out, exist_ok=True)
    sections = {}
    inputs = {args.corpus: content_hash(args.corpus)}
    for i, ckpt_path in enumerate(args.checkpoints):
        params, _, _ = load_checkpoint(ckpt_path)
        name = f"{i:02d}_{os.path.splitext(os.path.basename(ckpt_path))[0]}"
        sections[name] = _analyze_one(params, corpus, cfg, os.path.join(args.out, name))
        inputs[ckpt_path] = content_hash(ckpt_path)
    report = {
        "command": "analyze",
        "config": cfg,
        "inputs": inputs,
        "ratio_pair_seed": cfg["analyze"]["seed"],
        "checkpoints": sections,
    }
    atomic_write_text(os.path.join(args.out, "analyze_report.json"), canonical_json(report))
    _write_timings(args.out, [("analyze", time.perf_counter() - started)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualenc",
        description="Dual-encoder retrieval lab: synthesize corpora, train, evaluate, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file (defaults apply)")
        p.add_argument("--seed", type=int, default=None, help="override the command's seed")
        p.add_argument("--out", required=True, help="output directory")

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a dual encoder")
    common(p_train)
    p_train.add_argument("--corpus", required=True, help="training corpus (JSON-lines)")
    p_train.add_argument("--arch", choices=["sde", "ade", "ade-spl"], default=None)
    p_train.add_argument("--loss", choices=sorted(LOSS_CHOICES), default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--batch", type=int, default=None)
    p_train.add_argument("--tau", type=float, default=None)
    p_train.add_argument("--alpha", type=float, default=None)
    p_train.add_argument("--mask-dups", action="store_true", dest="mask_dups")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="rank a corpus and score it against judgments")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--corpus", required=True, help="test corpus (JSON-lines)")
    p_eval.add_argument("--judgments", required=True, help="judgments TSV")
    p_eval.set_defaults(func=cmd_eval)

    p_analyze = sub.add_parser("analyze", help="emit histograms, t-SNE projection, alignment")
    common(p_analyze)
    p_analyze.add_argument("checkpoints", nargs="+", help="checkpoint file(s)")
    p_analyze.add_argument("--corpus", required=True, help="corpus providing queries and gold docs")
    p_analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SampleSizeError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return 6
    except EvalInputError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return 5
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except (OSError, DataError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except DualEncError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
