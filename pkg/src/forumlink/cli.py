"""Pipeline command line.

Subcommands: synth, ingest, vocab, graph build, graph train, train, embed,
eval, ablate, manifest verify. Every subcommand writes its outputs, the
resolved configuration, and a manifest with input/output hashes into its
--out directory. Exit codes: 0 success, 1 usage error, 2 data/validation
error, 3 internal failure; errors are emitted as one JSON line on stderr.
The URM4DMU_LOG environment variable sets log verbosity (DEBUG..ERROR).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import (
    IdentityMap,
    SynthSpec,
    identity_from_usernames,
    infer_thread_starters,
    parse_posts_file,
    posts_to_jsonl,
    synth_corpus,
    write_posts_jsonl,
)
from .evaluator import EpisodeEmbeddingSet, evaluate, load_embedding_set, save_embedding_set
from .graph_context import (
    DEFAULT_SCHEMES,
    MetaPathScheme,
    build_graph,
    generate_walks,
    load_embeddings,
    merge_embeddings,
    save_embeddings,
    train_skipgram_from_keys,
    walk_keys,
)
from .manifest import MANIFEST_NAME, verify_manifest, write_manifest
from .tokenizer import Vocab, build_vocab
from .trainer import (
    ConfigError,
    TrainConfig,
    featurize_episodes,
    load_checkpoint,
    prepare_eval_episodes,
    prepare_training_episodes,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

log = logging.getLogger("forumlink")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line, machine-parsable errors
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config loading


def load_run_config(path: str | None) -> tuple[TrainConfig, dict[str, str]]:
    """Read a JSON or TOML run config; returns (config, paths section)."""
    if path is None:
        return TrainConfig(), {}
    p = Path(path)
    if p.suffix == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(p, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON/TOML table")
    paths = data.pop("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("config 'paths' must be a table")
    unknown = sorted(set(paths) - {"posts", "vocab", "graph_embeddings", "identity"})
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} at paths.")
    return TrainConfig.from_dict(data), {k: str(v) for k, v in paths.items()}


def _apply_train_overrides(cfg: TrainConfig, args) -> TrainConfig:
    updates = {}
    for attr, key in (
        ("mode", "mode"),
        ("market", "market"),
        ("epochs", "epochs"),
        ("batch_size", "batch_size"),
        ("step_size", "step_size"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            updates[key] = value
    if getattr(args, "no_time", False):
        updates["use_time"] = False
    if getattr(args, "no_graph", False):
        updates["use_graph_context"] = False
    if getattr(args, "no_cross", False):
        updates["use_cross_task"] = False
    cfg = cfg.replace_train(**updates) if updates else cfg
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _resolve_path(flag_value: str | None, paths: dict[str, str], key: str) -> str | None:
    return flag_value if flag_value is not None else paths.get(key)


def _require(value: str | None, what: str) -> str:
    if value is None:
        raise UsageError(f"missing required {what}")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_resolved_config(out: Path, cfg: TrainConfig, paths: dict[str, str]) -> Path:
    target = out / "config.json"
    _write_json(target, {"config": cfg.to_dict(), "paths": paths})
    return target


def _load_posts_resolved(path: str):
    return infer_thread_starters(parse_posts_file(path))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec_data = json.load(fh)
    if args.seed is not None:
        spec_data["seed"] = args.seed
    if "seed" not in spec_data:
        raise UsageError("synth requires --seed or a seed in the spec file")
    spec = SynthSpec.from_dict(spec_data)
    posts_by_market, identity = synth_corpus(spec)

    out = _out_dir(args)
    posts_path = out / "posts.jsonl"
    with open(posts_path, "w", encoding="utf-8", newline="\n") as fh:
        for market in sorted(posts_by_market):
            fh.write(posts_to_jsonl(posts_by_market[market]))
    identity_path = out / "identity.json"
    identity.save(identity_path)
    spec_path = out / "spec.resolved.json"
    _write_json(spec_path, spec.to_dict())
    write_manifest(
        out,
        "synth",
        spec.to_dict(),
        inputs={"spec": args.spec},
        outputs={"posts": posts_path, "identity": identity_path, "spec_resolved": spec_path},
    )
    log.info("synth: %d markets, %d posts", len(posts_by_market), sum(map(len, posts_by_market.values())))
    return EXIT_OK


def cmd_ingest(args) -> int:
    posts = _load_posts_resolved(args.posts)
    out = _out_dir(args)
    posts_path = out / "posts.jsonl"
    write_posts_jsonl(posts, posts_path)

    markets = sorted({p.market_id for p in posts})
    stats = {
        "posts": len(posts),
        "markets": {
            m: {
                "posts": sum(p.market_id == m for p in posts),
                "authors": len({p.author_id for p in posts if p.market_id == m}),
                "threads": len({p.thread_id for p in posts if p.market_id == m}),
                "subforums": len({p.subforum_id for p in posts if p.market_id == m}),
            }
            for m in markets
        },
    }
    stats_path = out / "stats.json"
    _write_json(stats_path, stats)
    outputs = {"posts": posts_path, "stats": stats_path}
    if args.link_usernames:
        identity_path = out / "identity.json"
        identity_from_usernames(posts).save(identity_path)
        outputs["identity"] = identity_path
    write_manifest(out, "ingest", {"link_usernames": args.link_usernames},
                   inputs={"posts": args.posts}, outputs=outputs)
    return EXIT_OK


def cmd_vocab(args) -> int:
    cfg, paths = load_run_config(args.config)
    posts_path = _require(_resolve_path(args.posts, paths, "posts"), "--posts")
    max_size = args.max_size if args.max_size is not None else cfg.tokenizer.max_size
    min_count = args.min_count if args.min_count is not None else cfg.tokenizer.min_count
    posts = parse_posts_file(posts_path)
    vocab = build_vocab((p.text for p in posts), max_size=max_size, min_count=min_count)
    out = _out_dir(args)
    vocab_path = out / "vocab.json"
    vocab.save(vocab_path)
    write_manifest(out, "vocab", {"max_size": max_size, "min_count": min_count},
                   inputs={"posts": posts_path}, outputs={"vocab": vocab_path})
    log.info("vocab: %d tokens", len(vocab))
    return EXIT_OK


def cmd_graph_build(args) -> int:
    cfg, paths = load_run_config(args.config)
    posts_path = _require(_resolve_path(args.posts, paths, "posts"), "--posts")
    seed = args.seed if args.seed is not None else cfg.seed
    if args.seed is None and args.config is None:
        raise UsageError("graph build requires --seed or a config with one")
    walks_per_start = args.walks_per_start or cfg.graph.walks_per_start
    target_len = args.target_len or cfg.graph.target_len

    posts = _load_posts_resolved(posts_path)
    markets = sorted({p.market_id for p in posts})
    schemes = [MetaPathScheme(s) for s in DEFAULT_SCHEMES]
    out = _out_dir(args)
    walks_path = out / "walks.jsonl"
    nodes: dict[str, list[str]] = {}
    n_walks = 0
    with open(walks_path, "w", encoding="utf-8", newline="\n") as fh:
        for mi, market in enumerate(markets):
            graph = build_graph([p for p in posts if p.market_id == market])
            nodes[market] = graph.node_keys()
            walks = generate_walks(graph, schemes, walks_per_start, target_len, seed=seed + mi)
            for walk in walks:
                fh.write(json.dumps({"market": market, "nodes": walk_keys(graph, walk)},
                                    separators=(",", ":")) + "\n")
            n_walks += len(walks)
    nodes_path = out / "nodes.json"
    _write_json(nodes_path, nodes)
    write_manifest(
        out,
        "graph build",
        {"walks_per_start": walks_per_start, "target_len": target_len, "seed": seed,
         "schemes": list(DEFAULT_SCHEMES)},
        inputs={"posts": posts_path},
        outputs={"walks": walks_path, "nodes": nodes_path},
    )
    log.info("graph build: %d markets, %d walks", len(markets), n_walks)
    return EXIT_OK


def cmd_graph_train(args) -> int:
    cfg, _paths = load_run_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    if args.seed is None and args.config is None:
        raise UsageError("graph train requires --seed or a config with one")
    g = cfg.graph
    d_m = args.d_m or g.d_m
    window = args.window or g.window
    negatives = args.negatives or g.negatives
    epochs = args.epochs if args.epochs is not None else g.epochs
    step_size = args.step_size or g.step_size

    with open(args.nodes, "r", encoding="utf-8") as fh:
        nodes = json.load(fh)
    walks_by_market: dict[str, list[list[str]]] = {m: [] for m in nodes}
    with open(args.walks, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            walks_by_market[rec["market"]].append(rec["nodes"])

    per_market = {}
    for mi, market in enumerate(sorted(nodes)):
        per_market[market] = train_skipgram_from_keys(
            walks_by_market[market], nodes[market], d_m,
            window=window, negatives=negatives, epochs=epochs,
            step_size=step_size, seed=seed + mi,
        )
    merged = merge_embeddings(per_market)
    out = _out_dir(args)
    emb_path = out / "graph_embeddings.urm4g"
    save_embeddings(merged, emb_path)
    write_manifest(
        out,
        "graph train",
        {"d_m": d_m, "window": window, "negatives": negatives, "epochs": epochs,
         "step_size": step_size, "seed": seed},
        inputs={"walks": args.walks, "nodes": args.nodes},
        outputs={"embeddings": emb_path, "sidecar": str(emb_path) + ".json"},
    )
    log.info("graph train: %d nodes, d_m=%d", merged.matrix.shape[0], d_m)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, paths = load_run_config(args.config)
    cfg = _apply_train_overrides(cfg, args)
    posts_path = _require(_resolve_path(args.posts, paths, "posts"), "--posts")
    vocab_path = _require(_resolve_path(args.vocab, paths, "vocab"), "--vocab")
    graph_path = _resolve_path(args.graph_embeddings, paths, "graph_embeddings")
    identity_path = _resolve_path(args.identity, paths, "identity")

    posts = _load_posts_resolved(posts_path)
    vocab = Vocab.load(vocab_path)
    graph = None
    if cfg.train.use_graph_context:
        graph_path = _require(graph_path, "--graph-embeddings (or --no-graph)")
        graph = load_embeddings(graph_path)
    identity = IdentityMap.load(identity_path) if identity_path else None
    if identity is None and cfg.corpus.link_usernames and cfg.train.mode == "multitask":
        identity = identity_from_usernames(posts)

    out = _out_dir(args)
    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8", newline="\n") as log_fh:
        ckpt, epoch_losses = train(
            cfg, posts, vocab, graph=graph, identity=identity, log_fh=log_fh,
            vocab_ref=str(Path(vocab_path).resolve()),
            graph_ref=str(Path(graph_path).resolve()) if graph_path else None,
        )
    ckpt_path = out / "checkpoint.urm4c"
    save_checkpoint(ckpt, ckpt_path)
    resolved_paths = {"posts": posts_path, "vocab": vocab_path}
    if graph_path:
        resolved_paths["graph_embeddings"] = graph_path
    if identity_path:
        resolved_paths["identity"] = identity_path
    config_path = _write_resolved_config(out, cfg, resolved_paths)
    write_manifest(
        out,
        "train",
        cfg.to_dict(),
        inputs={role: path for role, path in resolved_paths.items()},
        outputs={"checkpoint": ckpt_path, "config": config_path},
        unhashed_outputs={"train_log": log_path},
    )
    if epoch_losses:
        log.info("train: %d epochs, loss %.4f -> %.4f", len(epoch_losses), epoch_losses[0], epoch_losses[-1])
    return EXIT_OK


def _embedding_set_from_checkpoint(ckpt, posts, vocab, graph, identity, split: str) -> EpisodeEmbeddingSet:
    from .trainer import embed_episodes  # local import to keep CLI import light

    cfg = ckpt.config
    episodes = (
        prepare_eval_episodes(posts, cfg) if split == "test" else prepare_training_episodes(posts, cfg)
    )
    if not episodes:
        raise ValueError(f"no full episode windows in the {split} split")
    features = featurize_episodes(
        episodes, vocab, cfg.tokenizer.seq_len, cfg.graph.d_m,
        graph if cfg.train.use_graph_context else None,
    )
    model, _heads = ckpt.build()
    matrix = embed_episodes(model, features)
    groups = [
        identity.group_index(ep.market_id, ep.author_id) if identity else None
        for ep in episodes
    ]
    return EpisodeEmbeddingSet(
        matrix=matrix,
        episode_ids=[ep.episode_id for ep in episodes],
        markets=[ep.market_id for ep in episodes],
        authors=[ep.author_id for ep in episodes],
        groups=groups,
    )


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    posts = _load_posts_resolved(args.posts)
    vocab_path = args.vocab or ckpt.vocab_ref
    vocab = Vocab.load(_require(vocab_path, "--vocab (checkpoint has no vocab reference)"))
    graph = None
    graph_path = args.graph_embeddings or ckpt.graph_ref
    if cfg.train.use_graph_context:
        graph = load_embeddings(_require(graph_path, "--graph-embeddings"))
    identity = IdentityMap.load(args.identity) if args.identity else None

    emb = _embedding_set_from_checkpoint(ckpt, posts, vocab, graph, identity, args.split)
    out = _out_dir(args)
    emb_path = out / "embeddings.urm4e"
    save_embedding_set(emb, emb_path)
    inputs = {"checkpoint": args.checkpoint, "posts": args.posts, "vocab": vocab_path}
    if graph is not None:
        inputs["graph_embeddings"] = graph_path
    if args.identity:
        inputs["identity"] = args.identity
    write_manifest(
        out, "embed", {"split": args.split}, inputs=inputs,
        outputs={"embeddings": emb_path, "sidecar": str(emb_path) + ".json"},
    )
    log.info("embed: %d episodes, width %d", emb.matrix.shape[0], emb.matrix.shape[1])
    return EXIT_OK


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --ks value {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError("--ks needs positive integers")
    return ks


def cmd_eval(args) -> int:
    if not Path(args.embeddings).exists():
        raise FileNotFoundError(f"embeddings file not found: {args.embeddings}")
    if args.sample is not None and args.seed is None:
        raise UsageError("--sample requires --seed")
    emb = load_embedding_set(args.embeddings)
    report = evaluate(
        emb,
        mode=args.mode,
        ks=_parse_ks(args.ks),
        max_pos=args.max_pos,
        sample=args.sample,
        seed=args.seed if args.seed is not None else 0,
    )
    out = _out_dir(args)
    report_path = out / "report.json"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    hist_path = out / "histogram.csv"
    report.write_histogram_csv(hist_path)
    write_manifest(
        out,
        "eval",
        {"mode": args.mode, "ks": list(_parse_ks(args.ks)), "max_pos": args.max_pos,
         "sample": args.sample, "seed": args.seed},
        inputs={"embeddings": args.embeddings, "sidecar": str(args.embeddings) + ".json"},
        outputs={"report": report_path, "histogram": hist_path},
    )
    sys.stdout.write(report.to_json())
    return EXIT_OK


_ABLATION_COMPONENTS = {"graph", "time"}


def parse_ablation_rows(text: str) -> list[tuple[str, frozenset[str]]]:
    rows = []
    for token in text.split(","):
        token = token.strip()
        if token == "full":
            rows.append((token, frozenset()))
            continue
        if not token.startswith("-"):
            raise UsageError(f"bad ablation row {token!r} (use 'full' or '-graph', '-time', '-graph-time')")
        parts = token[1:].split("-")
        bad = set(parts) - _ABLATION_COMPONENTS
        if bad or not parts:
            raise UsageError(f"bad ablation row {token!r}: unknown component(s) {sorted(bad)}")
        rows.append((token, frozenset(parts)))
    return rows


def _row_dir_name(drops: frozenset[str]) -> str:
    return "full" if not drops else "no_" + "_".join(sorted(drops))


def _run_ablation_row(payload: dict) -> tuple[str, dict]:
    """One ablation row: train, embed the test split, evaluate. Process-safe."""
    cfg = TrainConfig.from_dict(payload["config"])
    drops = frozenset(payload["drops"])
    updates = {}
    if "time" in drops:
        updates["use_time"] = False
    if "graph" in drops:
        updates["use_graph_context"] = False
    if updates:
        cfg = cfg.replace_train(**updates)

    posts = _load_posts_resolved(payload["posts"])
    vocab = Vocab.load(payload["vocab"])
    graph = load_embeddings(payload["graph"]) if cfg.train.use_graph_context else None
    identity = IdentityMap.load(payload["identity"]) if payload.get("identity") else None

    row_dir = Path(payload["row_dir"])
    row_dir.mkdir(parents=True, exist_ok=True)
    with open(row_dir / "train_log.jsonl", "w", encoding="utf-8", newline="\n") as log_fh:
        ckpt, _losses = train(cfg, posts, vocab, graph=graph, identity=identity, log_fh=log_fh)
    save_checkpoint(ckpt, row_dir / "checkpoint.urm4c")
    emb = _embedding_set_from_checkpoint(ckpt, posts, vocab, graph, identity, "test")
    save_embedding_set(emb, row_dir / "embeddings.urm4e")
    report = evaluate(emb, mode=payload["eval_mode"], ks=_parse_ks(payload["ks"]))
    with open(row_dir / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    return payload["row"], report.to_dict()


def cmd_ablate(args) -> int:
    cfg, paths = load_run_config(args.config)
    cfg = _apply_train_overrides(cfg, args)
    posts_path = _require(_resolve_path(args.posts, paths, "posts"), "--posts")
    vocab_path = _require(_resolve_path(args.vocab, paths, "vocab"), "--vocab")
    graph_path = _resolve_path(args.graph_embeddings, paths, "graph_embeddings")
    identity_path = _resolve_path(args.identity, paths, "identity")
    rows = parse_ablation_rows(args.rows)
    needs_graph = any("graph" not in drops for _, drops in rows) and cfg.train.use_graph_context
    if needs_graph:
        graph_path = _require(graph_path, "--graph-embeddings")

    out = _out_dir(args)
    payloads = []
    for token, drops in rows:
        payloads.append(
            {
                "row": token,
                "drops": sorted(drops),
                "config": cfg.to_dict(),
                "posts": posts_path,
                "vocab": vocab_path,
                "graph": graph_path,
                "identity": identity_path,
                "row_dir": str(out / _row_dir_name(drops)),
                "eval_mode": args.eval_mode,
                "ks": args.ks,
            }
        )
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(_run_ablation_row, payloads))
    else:
        results = dict(map(_run_ablation_row, payloads))

    summary = {token: results[token] for token, _ in rows}
    summary_path = out / "summary.json"
    _write_json(summary_path, summary)
    config_path = _write_resolved_config(out, cfg, {"posts": posts_path, "vocab": vocab_path})
    inputs = {"posts": posts_path, "vocab": vocab_path}
    if graph_path:
        inputs["graph_embeddings"] = graph_path
    if identity_path:
        inputs["identity"] = identity_path
    write_manifest(out, "ablate", {"rows": [t for t, _ in rows], "config": cfg.to_dict()},
                   inputs=inputs, outputs={"summary": summary_path, "config": config_path})
    for token, _drops in rows:
        metrics = summary[token]
        log.info("ablate %s: mrr=%.4f", token, metrics["mrr"])
    sys.stdout.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_manifest_verify(args) -> int:
    problems = verify_manifest(args.run)
    if problems:
        for problem in problems:
            sys.stderr.write(json.dumps({"error": "HashMismatch", "message": problem, "exit": EXIT_DATA}) + "\n")
        return EXIT_DATA
    sys.stdout.write(json.dumps({"ok": True, "run": str(args.run)}) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forumlink", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic multi-market corpus")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="validate posts JSONL and resolve thread starters")
    p.add_argument("--posts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-link-usernames", dest="link_usernames", action="store_false")
    p.set_defaults(func=cmd_ingest, link_usernames=True)

    p = sub.add_parser("vocab", help="build the token vocabulary")
    p.add_argument("--posts")
    p.add_argument("--config")
    p.add_argument("--max-size", type=int, dest="max_size")
    p.add_argument("--min-count", type=int, dest="min_count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab)

    graph = sub.add_parser("graph", help="interaction-graph embedding steps")
    gsub = graph.add_subparsers(dest="graph_command", required=True, metavar="STEP")

    p = gsub.add_parser("build", help="build graphs and generate meta-path walks")
    p.add_argument("--posts")
    p.add_argument("--config")
    p.add_argument("--walks-per-start", type=int, dest="walks_per_start")
    p.add_argument("--target-len", type=int, dest="target_len")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph_build)

    p = gsub.add_parser("train", help="train node embeddings from walks")
    p.add_argument("--walks", required=True)
    p.add_argument("--nodes", required=True)
    p.add_argument("--config")
    p.add_argument("--d-m", type=int, dest="d_m")
    p.add_argument("--window", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--step-size", type=float, dest="step_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph_train)

    p = sub.add_parser("train", help="train the encoder and task heads")
    p.add_argument("--config")
    p.add_argument("--posts")
    p.add_argument("--vocab")
    p.add_argument("--graph-embeddings", dest="graph_embeddings")
    p.add_argument("--identity")
    p.add_argument("--mode", choices=("single", "multitask"))
    p.add_argument("--market")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--step-size", type=float, dest="step_size")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-time", dest="no_time", action="store_true")
    p.add_argument("--no-graph", dest="no_graph", action="store_true")
    p.add_argument("--no-cross", dest="no_cross", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed episodes with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--posts", required=True)
    p.add_argument("--vocab")
    p.add_argument("--graph-embeddings", dest="graph_embeddings")
    p.add_argument("--identity")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="retrieval metrics over an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--mode", choices=("author", "identity"), default="author")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--max-pos", type=int, dest="max_pos", default=20)
    p.add_argument("--sample", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/embed/eval ablation rows")
    p.add_argument("--config")
    p.add_argument("--posts")
    p.add_argument("--vocab")
    p.add_argument("--graph-embeddings", dest="graph_embeddings")
    p.add_argument("--identity")
    p.add_argument("--rows", default="full,-graph,-graph-time")
    p.add_argument("--eval-mode", dest="eval_mode", choices=("author", "identity"), default="author")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--market")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    man = sub.add_parser("manifest", help="manifest utilities")
    msub = man.add_subparsers(dest="manifest_command", required=True, metavar="STEP")
    p = msub.add_parser("verify", help="re-hash a run directory's outputs")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_manifest_verify)

    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("URM4DMU_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _emit_error(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _emit_error("UsageError", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    try:
        return int(args.func(args) or EXIT_OK)
    except UsageError as exc:
        _emit_error("UsageError", str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError) as exc:
        _emit_error(type(exc).__name__, str(exc), EXIT_DATA)
        return EXIT_DATA
    except Exception as exc:  # invariant failures and bugs
        _emit_error(type(exc).__name__, str(exc), EXIT_INTERNAL)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
