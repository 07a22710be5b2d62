import dataclasses
import io
import json

import numpy as np
import pytest
import torch

from forumlink.corpus import IdentityMap, SynthSpec, synth_corpus
from forumlink.graph_context import NodeEmbeddings
from forumlink.tokenizer import build_vocab
from forumlink.trainer import (
    MICRO_CONFIG,
    ConfigError,
    CorpusParams,
    CorruptFile,
    EpisodeParams,
    GraphParams,
    MissingGraphEmbeddings,
    NoTrainingEpisodes,
    TextParams,
    TimeParams,
    TokenizerParams,
    TrainConfig,
    TrainParams,
    VersionMismatch,
    build_model,
    build_tasks,
    embed_episodes,
    featurize_episodes,
    grad_check,
    load_checkpoint,
    prepare_eval_episodes,
    prepare_training_episodes,
    save_checkpoint,
    train,
)

from conftest import make_post


def tiny_config(**train_overrides) -> TrainConfig:
    cfg = TrainConfig(
        seed=5,
        corpus=CorpusParams(episode_len=2, train_stride=1, eval_stride=1),
        tokenizer=TokenizerParams(max_size=200, min_count=1, seq_len=8),
        text=TextParams(d_tok=8, filters=2, kernel_sizes=(2, 3), d_c=8, d_s=8,
                        n_heads=2, n_blocks=1, d_ff=16),
        time=TimeParams(d_tau=4),
        graph=GraphParams(d_m=4),
        episode=EpisodeParams(d_agg=8, n_heads=2, d_ff=16, out_dim=4),
        train=TrainParams(mode="single", epochs=2, batch_size=4, optimizer="sgd"),
    )
    return cfg.replace_train(**train_overrides) if train_overrides else cfg


def toy_posts(words_a="alpha beta gamma delta", words_b="omega psi chi phi", n=12):
    """Two authors with disjoint vocabularies posting alternately."""
    posts = []
    for i in range(n):
        posts.append(make_post(pid=f"a{i:02d}", author="ann", ts=i * 100,
                               text=words_a, thread="t0", starter=(i == 0)))
        posts.append(make_post(pid=f"b{i:02d}", author="bob", ts=i * 100 + 50,
                               text=words_b, thread="t0", starter=False))
    return posts


def toy_vocab(posts):
    return build_vocab((p.text for p in posts), max_size=200, min_count=1)


def zero_graph(d_m=4):
    return NodeEmbeddings(np.zeros((1, d_m), dtype=np.float32), ["P:none"])


class TestConfig:
    def test_roundtrip(self):
        cfg = tiny_config()
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            TrainConfig.from_dict({"seed": 1, "bogus": {}})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="text"):
            TrainConfig.from_dict({"text": {"d_tok": 8, "wrong": 1}})

    def test_kernel_sizes_list_becomes_tuple(self):
        cfg = TrainConfig.from_dict({"text": {"kernel_sizes": [2, 3]}})
        assert cfg.text.kernel_sizes == (2, 3)

    def test_invalid_values_surface_as_config_errors(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"train": {"mode": "both"}})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"train": {"optimizer": "lbfgs"}})


class TestTraining:
    def test_zero_epochs_checkpoint_equals_seeded_init(self):
        cfg = tiny_config(epochs=0)
        posts = toy_posts()
        vocab = toy_vocab(posts)
        ckpt, losses = train(cfg, posts, vocab, graph=zero_graph())
        assert losses == []
        model = build_model(cfg, len(vocab))
        fresh = {f"encoder.{k}": v for k, v in model.state_dict().items()}
        for name, tensor in fresh.items():
            assert torch.equal(ckpt.tensors[name], tensor), name

    def test_toy_corpus_loss_halves(self):
        cfg = tiny_config(epochs=30, step_size=0.05)
        posts = toy_posts()
        vocab = toy_vocab(posts)
        ckpt, losses = train(cfg, posts, vocab, graph=zero_graph())
        assert losses[-1] < 0.5 * losses[0]
        assert ckpt.step > 0

    def test_time_ablation_is_timestamp_invariant(self):
        cfg = tiny_config(use_time=False)
        posts = toy_posts()
        vocab = toy_vocab(posts)
        ckpt, _ = train(cfg, posts, vocab, graph=zero_graph())
        model, _ = ckpt.build()
        episodes = prepare_eval_episodes(posts, cfg)
        shifted = [
            dataclasses.replace(
                ep,
                posts=tuple(dataclasses.replace(p, timestamp=p.timestamp + 86400 * 40) for p in ep.posts),
            )
            for ep in episodes
        ]
        f1 = featurize_episodes(episodes, vocab, 8, 4, None)
        f2 = featurize_episodes(shifted, vocab, 8, 4, None)
        assert np.array_equal(embed_episodes(model, f1), embed_episodes(model, f2))

    def test_graph_ablation_ignores_embedding_contents(self):
        cfg = tiny_config(use_graph_context=False)
        posts = toy_posts()
        vocab = toy_vocab(posts)
        ckpt, _ = train(cfg, posts, vocab, graph=None)
        model, _ = ckpt.build()
        episodes = prepare_eval_episodes(posts, cfg)
        noisy = NodeEmbeddings(
            np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
            [f"m0|P:{episodes[0].posts[0].post_id}", "m0|P:x", "m0|P:y"],
        )
        f_zero = featurize_episodes(episodes, vocab, 8, 4, None)
        f_noise = featurize_episodes(episodes, vocab, 8, 4, noisy)
        assert np.array_equal(embed_episodes(model, f_zero), embed_episodes(model, f_noise))

    def test_seed_determinism_produces_identical_bytes(self, tmp_path):
        cfg = tiny_config(epochs=2)
        posts = toy_posts()
        vocab = toy_vocab(posts)
        paths = []
        for run in range(2):
            ckpt, _ = train(cfg, posts, vocab, graph=zero_graph())
            path = tmp_path / f"run{run}.urm4c"
            save_checkpoint(ckpt, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_missing_graph_embeddings_rejected(self):
        cfg = tiny_config()
        posts = toy_posts()
        with pytest.raises(MissingGraphEmbeddings):
            train(cfg, posts, toy_vocab(posts), graph=None)

    def test_no_training_episodes_rejected(self):
        cfg = tiny_config()
        posts = toy_posts(n=1)  # one post per author: no window of length 2
        with pytest.raises(NoTrainingEpisodes):
            train(cfg, posts, toy_vocab(posts), graph=zero_graph())

    def test_single_mode_needs_market_when_ambiguous(self):
        cfg = tiny_config()
        posts = toy_posts() + [
            make_post(market="m1", pid=f"x{i}", author="zed", ts=i * 10, text="foo bar", starter=(i == 0))
            for i in range(6)
        ]
        vocab = toy_vocab(posts)
        with pytest.raises(ConfigError):
            train(cfg, posts, vocab, graph=zero_graph())
        ok = cfg.replace_train(market="m1")
        ckpt, _ = train(ok, posts, vocab, graph=zero_graph())
        assert ckpt.task_ids == ["market:m1"]

    def test_multitask_builds_market_and_cross_heads(self):
        spec = SynthSpec(markets=2, authors_per_market=4, shared_author_fraction=0.5,
                         posts_per_author=8, vocab_signature_size=3,
                         subforums_per_market=2, seed=1)
        posts_by_market, identity = synth_corpus(spec)
        posts = [p for m in sorted(posts_by_market) for p in posts_by_market[m]]
        cfg = tiny_config(mode="multitask")
        episodes = prepare_training_episodes(posts, cfg)
        tasks = build_tasks(episodes, cfg, identity)
        ids = [t.task_id for t in tasks]
        assert ids[:2] == ["market:m0", "market:m1"]
        assert "cross" in ids
        cross = tasks[-1]
        assert len(set(cross.label_map.values())) == 2  # two spanning persons
        ckpt, _ = train(cfg, posts, toy_vocab(posts), graph=zero_graph(), identity=identity)
        assert set(ckpt.task_ids) == set(ids)

    def test_training_log_lines(self):
        cfg = tiny_config(epochs=1)
        posts = toy_posts()
        buf = io.StringIO()
        train(cfg, posts, toy_vocab(posts), graph=zero_graph(), log_fh=buf)
        lines = [json.loads(l) for l in buf.getvalue().splitlines()]
        assert any(l.get("task") == "total" for l in lines)
        assert all("wall_time" in l for l in lines)
        assert any("epoch" in l for l in lines)


class TestCheckpointIO:
    def _trained(self, tmp_path):
        cfg = tiny_config(epochs=1)
        posts = toy_posts()
        vocab = toy_vocab(posts)
        ckpt, _ = train(cfg, posts, vocab, graph=zero_graph(), vocab_ref="v.json", graph_ref="g.urm4g")
        path = tmp_path / "ckpt.urm4c"
        save_checkpoint(ckpt, path)
        return cfg, posts, vocab, ckpt, path

    def test_roundtrip_forward_identical(self, tmp_path):
        cfg, posts, vocab, ckpt, path = self._trained(tmp_path)
        again = load_checkpoint(path)
        assert again.config == cfg
        assert again.vocab_ref == "v.json" and again.graph_ref == "g.urm4g"
        episodes = prepare_eval_episodes(posts, cfg)
        feats = featurize_episodes(episodes, vocab, 8, 4, None)
        m1, _ = ckpt.build()
        m2, _ = again.build()
        assert np.array_equal(embed_episodes(m1, feats), embed_episodes(m2, feats))

    def test_truncated_file_is_corrupt(self, tmp_path):
        *_, path = self._trained(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptFile):
            load_checkpoint(path)

    def test_flipped_byte_fails_checksum(self, tmp_path):
        *_, path = self._trained(tmp_path)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptFile):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        *_, path = self._trained(tmp_path)
        data = bytearray(path.read_bytes())
        data[5] = 99  # version field sits right after the magic
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatch):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "junk.urm4c"
        path.write_bytes(b"JUNKY" + b"\x00" * 30)
        with pytest.raises(CorruptFile):
            load_checkpoint(path)


class TestGradCheck:
    def test_smoke_report_covers_all_groups(self):
        report = grad_check(fd_budget=2)
        expected = {"token_table", "conv_filters", "attention", "pooling",
                    "gate", "time", "episode_aggregator", "heads"}
        assert expected <= set(report["groups"])
        assert all(np.isfinite(v) for v in report["groups"].values())

    def test_corrupted_gradient_is_flagged(self):
        report = grad_check(fd_budget=2, _corrupt="gate")
        assert report["groups"]["gate"] > report["tolerance"]
        assert not report["passed"]

    def test_micro_config_is_micro(self):
        assert MICRO_CONFIG.tokenizer.seq_len <= 6
        assert MICRO_CONFIG.text.d_tok <= 8
        assert MICRO_CONFIG.corpus.episode_len <= 3
