"""Training driver: task assembly, optimization, checkpoints, gradient checks.

Single-task mode trains one market head; multi-task mode trains one head
per market plus an optional cross-market head labeled by identity groups
that span several markets. Every step draws one batch per task and sums
the per-task mean losses through the shared encoder.
"""

from __future__ import annotations

import dataclasses
import json
import struct
import time as _time
import zlib
from dataclasses import dataclass, field
from typing import get_origin, get_type_hints

import numpy as np
import torch

from .corpus import Episode, IdentityMap, Post, build_episodes, split_posts
from .episode_model import (
    AuthorEncoder,
    EpisodeEncoder,
    EpisodeEncoderConfig,
    MarketHead,
    softmax_xent,
)
from .graph_context import NodeEmbeddings, post_context
from .text_encoder import TextEncoder, TextEncoderConfig, init_parameters
from .time_encoder import TimeEncoder, timestamp_to_fields
from .tokenizer import Vocab, encode

CKPT_MAGIC = b"URM4C"
CKPT_VERSION = 1


class ConfigError(ValueError):
    pass


class NoTrainingEpisodes(ValueError):
    pass


class MissingGraphEmbeddings(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptFile(ValueError):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class CorpusParams:
    episode_len: int = 5
    train_stride: int = 5
    eval_stride: int = 1
    split_quantile: float = 0.5
    link_usernames: bool = True


@dataclass(frozen=True)
class TokenizerParams:
    max_size: int = 20000
    min_count: int = 2
    seq_len: int = 128


@dataclass(frozen=True)
class TextParams:
    d_tok: int = 64
    filters: int = 32
    kernel_sizes: tuple[int, ...] = (2, 3, 4, 5)
    d_c: int = 64
    d_s: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    d_ff: int = 128
    epsilon: float = 0.3
    fusion: str = "residual"
    mask_pad: bool = False


@dataclass(frozen=True)
class TimeParams:
    d_tau: int = 32


@dataclass(frozen=True)
class GraphParams:
    d_m: int = 64
    walks_per_start: int = 10
    target_len: int = 41
    window: int = 5
    negatives: int = 5
    epochs: int = 3
    step_size: float = 0.025


@dataclass(frozen=True)
class EpisodeParams:
    d_agg: int = 128
    n_heads: int = 4
    d_ff: int = 256
    out_dim: int = 128


@dataclass(frozen=True)
class TrainParams:
    mode: str = "single"  # "single" | "multitask"
    market: str | None = None  # single mode; defaults to the only market present
    use_cross_task: bool = True
    use_time: bool = True
    use_graph_context: bool = True
    epochs: int = 10
    batch_size: int = 32
    step_size: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in ("single", "multitask"):
            raise ConfigError("train.mode must be 'single' or 'multitask'")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer must be 'adam' or 'sgd'")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    corpus: CorpusParams = field(default_factory=CorpusParams)
    tokenizer: TokenizerParams = field(default_factory=TokenizerParams)
    text: TextParams = field(default_factory=TextParams)
    time: TimeParams = field(default_factory=TimeParams)
    graph: GraphParams = field(default_factory=GraphParams)
    episode: EpisodeParams = field(default_factory=EpisodeParams)
    train: TrainParams = field(default_factory=TrainParams)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        return _dataclass_from_dict(TrainConfig, data, "")

    def replace_train(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **kwargs))


def _dataclass_from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a table at {path or 'top level'}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {unknown} at {path or 'top level'}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = _dataclass_from_dict(hint, value, f"{path}{name}.")
        elif get_origin(hint) is tuple and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config at {path or 'top level'}: {exc}") from exc


# ---------------------------------------------------------------------------
# Featurization


@dataclass
class EpisodeFeatures:
    tokens: torch.Tensor  # (N, L_e, L_p) int64
    dows: torch.Tensor  # (N, L_e) int64
    doys: torch.Tensor  # (N, L_e) int64
    contexts: torch.Tensor  # (N, L_e, d_m) float32
    episodes: list[Episode]

    def __len__(self) -> int:
        return len(self.episodes)

    def select(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(idx, dtype=torch.long)
        return self.tokens[idx], self.dows[idx], self.doys[idx], self.contexts[idx]


def featurize_episodes(
    episodes: list[Episode],
    vocab: Vocab,
    seq_len: int,
    d_m: int,
    graph: NodeEmbeddings | None,
) -> EpisodeFeatures:
    n = len(episodes)
    l_e = len(episodes[0].posts) if episodes else 0
    tokens = np.zeros((n, l_e, seq_len), dtype=np.int64)
    dows = np.zeros((n, l_e), dtype=np.int64)
    doys = np.ones((n, l_e), dtype=np.int64)
    contexts = np.zeros((n, l_e, d_m), dtype=np.float32)
    for i, ep in enumerate(episodes):
        for j, post in enumerate(ep.posts):
            tokens[i, j] = encode(post.text, vocab, seq_len)
            dows[i, j], doys[i, j] = timestamp_to_fields(post.timestamp)
            if graph is not None:
                contexts[i, j] = post_context(post.post_id, graph, market_id=post.market_id)
    return EpisodeFeatures(
        tokens=torch.from_numpy(tokens),
        dows=torch.from_numpy(dows),
        doys=torch.from_numpy(doys),
        contexts=torch.from_numpy(contexts),
        episodes=episodes,
    )


# ---------------------------------------------------------------------------
# Tasks


@dataclass
class TaskSpec:
    task_id: str
    label_map: dict[str, int]  # author_id (market task) or "market|author" (cross task)
    indices: np.ndarray  # rows into the episode feature block
    labels: np.ndarray  # class per row, aligned with indices


def build_tasks(episodes: list[Episode], config: TrainConfig, identity: IdentityMap | None) -> list[TaskSpec]:
    markets = sorted({ep.market_id for ep in episodes})
    params = config.train
    tasks: list[TaskSpec] = []

    def market_task(market: str) -> TaskSpec:
        idx = [i for i, ep in enumerate(episodes) if ep.market_id == market]
        authors = sorted({episodes[i].author_id for i in idx})
        label_map = {a: c for c, a in enumerate(authors)}
        labels = np.array([label_map[episodes[i].author_id] for i in idx], dtype=np.int64)
        return TaskSpec(f"market:{market}", label_map, np.array(idx, dtype=np.int64), labels)

    if params.mode == "single":
        market = params.market
        if market is None:
            if len(markets) != 1:
                raise ConfigError("single mode needs train.market when the corpus has several markets")
            market = markets[0]
        if market not in markets:
            raise ConfigError(f"market {market!r} has no training episodes")
        tasks.append(market_task(market))
        return tasks

    for market in markets:
        tasks.append(market_task(market))
    if params.use_cross_task and identity is not None:
        spanning = [
            (gi, group)
            for gi, group in enumerate(identity.groups)
            if len({m for m, _ in group}) >= 2
        ]
        if spanning:
            pair_to_class = {}
            label_map = {}
            for cls, (gi, group) in enumerate(spanning):
                for pair in group:
                    pair_to_class[pair] = cls
                    label_map[f"{pair[0]}|{pair[1]}"] = cls
            idx, labels = [], []
            for i, ep in enumerate(episodes):
                cls = pair_to_class.get((ep.market_id, ep.author_id))
                if cls is not None:
                    idx.append(i)
                    labels.append(cls)
            if idx:
                # label_map classes must be dense; dedupe to class list for the head
                n_classes = len(spanning)
                dense = {k: v for k, v in label_map.items()}
                assert sorted(set(dense.values())) == list(range(n_classes))
                tasks.append(TaskSpec("cross", dense, np.array(idx, dtype=np.int64), np.array(labels, dtype=np.int64)))
    return tasks


# ---------------------------------------------------------------------------
# Model assembly


def build_model(config: TrainConfig, vocab_size: int) -> AuthorEncoder:
    text_cfg = TextEncoderConfig(
        vocab_size=vocab_size,
        seq_len=config.tokenizer.seq_len,
        **dataclasses.asdict(config.text),
    )
    text = TextEncoder(text_cfg)
    time_enc = TimeEncoder(config.time.d_tau)
    ep_cfg = EpisodeEncoderConfig(
        d_in=text.out_dim + config.time.d_tau + config.graph.d_m,
        episode_len=config.corpus.episode_len,
        **dataclasses.asdict(config.episode),
    )
    episode = EpisodeEncoder(ep_cfg)
    model = AuthorEncoder(
        text,
        time_enc,
        episode,
        d_m=config.graph.d_m,
        use_time=config.train.use_time,
        use_graph=config.train.use_graph_context,
    )
    init_parameters(model, config.seed)
    return model


def build_heads(tasks: list[TaskSpec], config: TrainConfig) -> dict[str, MarketHead]:
    heads = {}
    for k, task in enumerate(tasks):
        head = MarketHead(task.task_id, config.episode.out_dim, task.label_map)
        init_parameters(head, config.seed + 1 + k)
        heads[task.task_id] = head
    return heads


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class ModelCheckpoint:
    config: TrainConfig
    vocab_size: int
    tensors: dict[str, torch.Tensor]
    task_ids: list[str]
    label_maps: dict[str, dict[str, int]]
    step: int = 0
    vocab_ref: str | None = None
    graph_ref: str | None = None
    version: int = CKPT_VERSION

    def build(self) -> tuple[AuthorEncoder, dict[str, MarketHead]]:
        model = build_model(self.config, self.vocab_size)
        model.load_state_dict(
            {k[len("encoder."):]: v for k, v in self.tensors.items() if k.startswith("encoder.")}
        )
        heads = {}
        for task_id in self.task_ids:
            head = MarketHead(task_id, self.config.episode.out_dim, self.label_maps[task_id])
            head.load_state_dict(
                {
                    k[len(f"heads.{task_id}."):]: v
                    for k, v in self.tensors.items()
                    if k.startswith(f"heads.{task_id}.")
                }
            )
            heads[task_id] = head
        model.eval()
        for head in heads.values():
            head.eval()
        return model, heads


def checkpoint_from_modules(
    model: AuthorEncoder,
    heads: dict[str, MarketHead],
    config: TrainConfig,
    vocab_size: int,
    step: int,
    vocab_ref: str | None = None,
    graph_ref: str | None = None,
) -> ModelCheckpoint:
    tensors = {f"encoder.{k}": v.detach().clone() for k, v in model.state_dict().items()}
    for task_id, head in heads.items():
        tensors.update({f"heads.{task_id}.{k}": v.detach().clone() for k, v in head.state_dict().items()})
    return ModelCheckpoint(
        config=config,
        vocab_size=vocab_size,
        tensors=tensors,
        task_ids=list(heads),
        label_maps={t: dict(h.label_map) for t, h in heads.items()},
        step=step,
        vocab_ref=vocab_ref,
        graph_ref=graph_ref,
    )


_DTYPES = {"float32": ("<f4", torch.float32), "int64": ("<i8", torch.int64)}


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    names = sorted(ckpt.tensors)
    manifest = []
    for name in names:
        t = ckpt.tensors[name]
        dtype = str(t.dtype).removeprefix("torch.")
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dtype} for {name}")
        manifest.append({"name": name, "shape": list(t.shape), "dtype": dtype})
    meta = {
        "config": ckpt.config.to_dict(),
        "vocab_size": ckpt.vocab_size,
        "task_ids": ckpt.task_ids,
        "label_maps": ckpt.label_maps,
        "step": ckpt.step,
        "vocab_ref": ckpt.vocab_ref,
        "graph_ref": ckpt.graph_ref,
        "tensors": manifest,
    }
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", ckpt.version)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<Q", len(meta_bytes))
    blob += meta_bytes
    for name in names:
        t = ckpt.tensors[name]
        np_dtype = _DTYPES[str(t.dtype).removeprefix("torch.")][0]
        blob += np.ascontiguousarray(t.detach().numpy(), dtype=np_dtype).tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CKPT_MAGIC) + 8 or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 5)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    try:
        (meta_len,) = struct.unpack_from("<Q", data, 9)
        meta_start = 17
        meta = json.loads(data[meta_start : meta_start + meta_len].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable metadata") from exc
    tensors = {}
    offset = meta_start + meta_len
    for entry in meta["tensors"]:
        np_dtype, torch_dtype = _DTYPES[entry["dtype"]]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=offset).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
        offset += nbytes
    if offset != len(data) - 4:
        raise CorruptFile(f"{path}: trailing or missing tensor data")
    return ModelCheckpoint(
        config=TrainConfig.from_dict(meta["config"]),
        vocab_size=meta["vocab_size"],
        tensors=tensors,
        task_ids=meta["task_ids"],
        label_maps={t: {k: int(v) for k, v in m.items()} for t, m in meta["label_maps"].items()},
        step=meta["step"],
        vocab_ref=meta["vocab_ref"],
        graph_ref=meta["graph_ref"],
    )


# ---------------------------------------------------------------------------
# Training


def prepare_training_episodes(posts: list[Post], config: TrainConfig) -> list[Episode]:
    train_posts, _ = split_posts(posts, config.corpus.split_quantile)
    return build_episodes(train_posts, config.corpus.episode_len, config.corpus.train_stride, split="train")


def prepare_eval_episodes(posts: list[Post], config: TrainConfig) -> list[Episode]:
    _, test_posts = split_posts(posts, config.corpus.split_quantile)
    return build_episodes(test_posts, config.corpus.episode_len, config.corpus.eval_stride, split="test")


def train(
    config: TrainConfig,
    posts: list[Post],
    vocab: Vocab,
    graph: NodeEmbeddings | None = None,
    identity: IdentityMap | None = None,
    log_fh=None,
    vocab_ref: str | None = None,
    graph_ref: str | None = None,
) -> tuple[ModelCheckpoint, list[float]]:
    """Optimize encoder and heads; returns the checkpoint and per-epoch losses."""
    params = config.train
    if params.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)

    if params.use_graph_context and graph is None:
        raise MissingGraphEmbeddings("training with graph context requires node embeddings")
    episodes = prepare_training_episodes(posts, config)
    if not episodes:
        raise NoTrainingEpisodes("no full episode windows in the training split")

    features = featurize_episodes(
        episodes, vocab, config.tokenizer.seq_len, config.graph.d_m,
        graph if params.use_graph_context else None,
    )
    tasks = build_tasks(episodes, config, identity)
    model = build_model(config, len(vocab))
    heads = build_heads(tasks, config)

    trainable = list(model.parameters()) + [p for h in heads.values() for p in h.parameters()]
    if params.optimizer == "adam":
        opt = torch.optim.Adam(trainable, lr=params.step_size, betas=(0.9, 0.999), eps=1e-8)
    else:
        opt = torch.optim.SGD(trainable, lr=params.step_size)

    rng = np.random.default_rng(config.seed)
    t0 = _time.monotonic()
    step = 0
    epoch_losses: list[float] = []

    def log(record: dict) -> None:
        if log_fh is not None:
            record["wall_time"] = round(_time.monotonic() - t0, 6)
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    for epoch in range(params.epochs):
        chunks: dict[str, list[np.ndarray]] = {}
        for task in tasks:
            order = rng.permutation(len(task.indices))
            chunks[task.task_id] = [
                order[i : i + params.batch_size] for i in range(0, len(order), params.batch_size)
            ]
        n_steps = max(len(c) for c in chunks.values())
        step_losses = []
        for s in range(n_steps):
            opt.zero_grad()
            total = None
            for task in tasks:
                rows = chunks[task.task_id][s % len(chunks[task.task_id])]
                batch_idx = task.indices[rows]
                emb = model(*features.select(batch_idx))
                labels = torch.from_numpy(task.labels[rows])
                loss = softmax_xent(heads[task.task_id](emb), labels).mean()
                log({"step": step, "task": task.task_id, "loss": float(loss.item())})
                total = loss if total is None else total + loss
            total.backward()
            opt.step()
            step_losses.append(float(total.item()))
            log({"step": step, "task": "total", "loss": step_losses[-1]})
            step += 1
        epoch_losses.append(float(np.mean(step_losses)))
        log({"epoch": epoch, "task": "epoch_mean", "loss": epoch_losses[-1]})

    ckpt = checkpoint_from_modules(
        model, heads, config, len(vocab), step, vocab_ref=vocab_ref, graph_ref=graph_ref
    )
    return ckpt, epoch_losses


def embed_episodes(
    model: AuthorEncoder,
    features: EpisodeFeatures,
    batch_size: int = 64,
) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(features), batch_size):
            idx = np.arange(i, min(i + batch_size, len(features)))
            out.append(model(*features.select(idx)).numpy().astype(np.float32))
    if not out:
        return np.zeros((0, model.out_dim), dtype=np.float32)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Gradient verification


MICRO_CONFIG = TrainConfig(
    seed=7,
    corpus=CorpusParams(episode_len=3),
    tokenizer=TokenizerParams(seq_len=6),
    text=TextParams(d_tok=8, filters=3, d_c=8, d_s=8, n_heads=2, n_blocks=1, d_ff=16, epsilon=0.3),
    time=TimeParams(d_tau=4),
    graph=GraphParams(d_m=4),
    episode=EpisodeParams(d_agg=8, n_heads=2, d_ff=16, out_dim=4),
    train=TrainParams(batch_size=3),
)

_GROUP_PREFIXES = (
    ("encoder.text.token_table", "token_table"),
    ("encoder.text.conv", "conv_filters"),
    ("encoder.text.attn", "attention"),
    ("encoder.text.pool", "pooling"),
    ("encoder.text.fuse", "gate"),
    ("encoder.time", "time"),
    ("encoder.episode", "episode_aggregator"),
    ("heads.", "heads"),
)


def _group_of(name: str) -> str:
    for prefix, group in _GROUP_PREFIXES:
        if name.startswith(prefix):
            return group
    return "other"


def grad_check(
    config: TrainConfig = MICRO_CONFIG,
    tolerance: float = 1e-3,
    fd_step: float = 1e-5,
    fd_budget: int | None = None,
    _corrupt: str | None = None,
) -> dict:
    """Compare backprop gradients to central finite differences, per group.

    Runs a tiny double-precision model on a random batch. Returns a report
    with the max relative error per parameter group and a pass flag.
    fd_budget caps the probed elements per parameter (diagnostics only; the
    full sweep probes everything). The _corrupt hook perturbs one group's
    analytic gradients so tests can confirm the harness detects breakage.
    """
    torch.set_num_threads(1)
    vocab_size = 12
    n_classes = 3
    batch = config.train.batch_size
    model = build_model(config, vocab_size).double()
    head = MarketHead("grad", config.episode.out_dim, {f"a{i}": i for i in range(n_classes)}).double()
    init_parameters(head, config.seed + 1)

    gen = torch.Generator().manual_seed(config.seed + 99)
    l_e, l_p = config.corpus.episode_len, config.tokenizer.seq_len
    tokens = torch.randint(0, vocab_size, (batch, l_e, l_p), generator=gen)
    dows = torch.randint(0, 7, (batch, l_e), generator=gen)
    doys = torch.randint(1, 367, (batch, l_e), generator=gen)
    contexts = torch.rand((batch, l_e, config.graph.d_m), generator=gen, dtype=torch.float64) - 0.5
    labels = torch.randint(0, n_classes, (batch,), generator=gen)

    named = [(f"encoder.{n}", p) for n, p in model.named_parameters()]
    named += [(f"heads.grad.{n}", p) for n, p in head.named_parameters()]

    def loss_value() -> torch.Tensor:
        return softmax_xent(head(model(tokens, dows, doys, contexts)), labels).mean()

    for _, p in named:
        p.grad = None
    loss_value().backward()

    groups: dict[str, float] = {}
    for name, p in named:
        group = _group_of(name)
        analytic = p.grad.detach().clone().view(-1) if p.grad is not None else torch.zeros(p.numel())
        if _corrupt is not None and group == _corrupt:
            analytic = analytic + 10.0 * tolerance + 1.0
        flat = p.data.view(-1)
        if fd_budget is None or flat.numel() <= fd_budget:
            probe = range(flat.numel())
        else:
            probe = torch.linspace(0, flat.numel() - 1, fd_budget).long().tolist()
        worst = 0.0
        with torch.no_grad():
            for i in probe:
                orig = flat[i].item()
                flat[i] = orig + fd_step
                up = loss_value().item()
                flat[i] = orig - fd_step
                down = loss_value().item()
                flat[i] = orig
                numeric = (up - down) / (2 * fd_step)
                a = analytic[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, err)
        groups[group] = max(groups.get(group, 0.0), worst)

    return {
        "tolerance": tolerance,
        "groups": groups,
        "passed": all(v < tolerance for v in groups.values()),
    }
