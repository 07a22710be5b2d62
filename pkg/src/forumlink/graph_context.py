"""Per-post structural context from the forum interaction graph.

One market's posts induce a typed graph over users (U), subforums (S),
threads (T), and posts (P): a thread starter links its author to the thread
(U-T), a reply links its author to the reply post (U-P), every post hangs
off its thread (T-P), and every thread off its subforum (S-T). Random walks
constrained to meta-path schemes (type templates such as UTPU, repeated
end-to-start) feed a skip-gram model with negative sampling; the learned
post-node rows are served as per-post context vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .corpus import Post

NODE_TYPES = ("U", "S", "T", "P")
ALLOWED_PAIRS = frozenset({frozenset("UT"), frozenset("UP"), frozenset("TP"), frozenset("ST")})

# The seven walk templates used for forum behavior.
DEFAULT_SCHEMES = ("UPTSTPU", "UTSTPU", "UPTSTU", "UTSTU", "UPTPU", "UPTU", "UTPU")

EMB_MAGIC = b"URM4G"
EMB_VERSION = 1


class EmptyWalkSet(ValueError):
    pass


@dataclass(frozen=True)
class MetaPathScheme:
    """A node-type template for walks; starts and ends at a user node."""

    types: str

    def __post_init__(self):
        if len(self.types) < 2:
            raise ValueError("scheme needs at least two node types")
        if self.types[0] != "U" or self.types[-1] != "U":
            raise ValueError(f"scheme {self.types!r} must start and end with U")
        for t in self.types:
            if t not in NODE_TYPES:
                raise ValueError(f"unknown node type {t!r} in scheme {self.types!r}")
        for a, b in zip(self.types, self.types[1:]):
            if frozenset((a, b)) not in ALLOWED_PAIRS:
                raise ValueError(f"scheme {self.types!r} uses disallowed edge {a}-{b}")

    def __str__(self) -> str:
        return self.types


class HeteroGraph:
    """Typed node registries plus bidirectional typed adjacency lists."""

    def __init__(self):
        self._ids: dict[str, dict[str, int]] = {t: {} for t in NODE_TYPES}
        self._names: dict[str, list[str]] = {t: [] for t in NODE_TYPES}
        # adjacency[(from_type, to_type)][from_index] -> sorted list of to_index
        self._adj: dict[tuple[str, str], list[list[int]]] = {}
        for pair in ALLOWED_PAIRS:
            a, b = sorted(pair)
            self._adj[(a, b)] = []
            self._adj[(b, a)] = []

    def _node(self, node_type: str, external_id: str) -> int:
        ids = self._ids[node_type]
        idx = ids.get(external_id)
        if idx is None:
            idx = len(ids)
            ids[external_id] = idx
            self._names[node_type].append(external_id)
            for (a, _b), lists in self._adj.items():
                if a == node_type:
                    lists.append([])
        return idx

    def add_edge(self, type_a: str, id_a: str, type_b: str, id_b: str) -> None:
        if frozenset((type_a, type_b)) not in ALLOWED_PAIRS:
            raise ValueError(f"edge {type_a}-{type_b} is not allowed")
        ia = self._node(type_a, id_a)
        ib = self._node(type_b, id_b)
        if ib not in self._adj[(type_a, type_b)][ia]:
            self._adj[(type_a, type_b)][ia].append(ib)
            self._adj[(type_b, type_a)][ib].append(ia)

    def count(self, node_type: str) -> int:
        return len(self._names[node_type])

    def node_name(self, node_type: str, index: int) -> str:
        return self._names[node_type][index]

    def node_index(self, node_type: str, external_id: str) -> int | None:
        return self._ids[node_type].get(external_id)

    def neighbors(self, node_type: str, index: int, next_type: str) -> list[int]:
        return self._adj[(node_type, next_type)][index]

    def degree(self, node_type: str, index: int) -> int:
        return sum(len(self._adj[(node_type, t)][index]) for t in NODE_TYPES
                   if (node_type, t) in self._adj)

    def edges(self) -> set[tuple[str, str, str, str]]:
        """Edge set as (type_a, name_a, type_b, name_b), types in sorted order."""
        out = set()
        for (a, b), lists in self._adj.items():
            if a > b:
                continue
            for ia, nbrs in enumerate(lists):
                for ib in nbrs:
                    out.add((a, self._names[a][ia], b, self._names[b][ib]))
        return out

    def node_keys(self) -> list[str]:
        """All node keys "T:ext_id", grouped by type in U, S, T, P order."""
        keys = []
        for t in NODE_TYPES:
            keys.extend(f"{t}:{name}" for name in self._names[t])
        return keys

    def total_nodes(self) -> int:
        return sum(len(self._names[t]) for t in NODE_TYPES)


def build_graph(posts: list[Post]) -> HeteroGraph:
    """Build one market's interaction graph. Starter flags must be resolved.

    A thread starter contributes a U-T authorship edge and its message still
    appears as a P node under the thread, so post degree is 1 (starter) or
    2 (reply, which adds the U-P edge).
    """
    markets = {p.market_id for p in posts}
    if len(markets) > 1:
        raise ValueError(f"posts span multiple markets: {sorted(markets)}")
    graph = HeteroGraph()
    for p in posts:
        if p.thread_starter is None:
            raise ValueError(f"post {p.post_id!r} has an unresolved thread_starter flag")
        if p.thread_starter:
            graph.add_edge("U", p.author_id, "T", p.thread_id)
        else:
            graph.add_edge("U", p.author_id, "P", p.post_id)
        graph.add_edge("T", p.thread_id, "P", p.post_id)
        graph.add_edge("S", p.subforum_id, "T", p.thread_id)
    return graph


Walk = list[tuple[str, int]]


def generate_walks(
    graph: HeteroGraph,
    schemes: list[MetaPathScheme],
    walks_per_start: int,
    target_len: int,
    seed: int,
) -> list[Walk]:
    """Meta-path-constrained uniform random walks from every user node.

    Each walk repeats its scheme end-to-start (the closing U doubles as the
    next opening U) until it holds target_len nodes or reaches a node with
    no neighbor of the required next type. Walks that never leave their
    start node are dropped.
    """
    longest = max(len(s.types) for s in schemes)
    if target_len < longest:
        raise ValueError("target_len must cover the longest scheme")
    rng = np.random.default_rng(seed)
    walks: list[Walk] = []
    for scheme in schemes:
        steps = scheme.types[1:]  # types after the opening U, one scheme repetition
        for u in range(graph.count("U")):
            for _ in range(walks_per_start):
                walk: Walk = [("U", u)]
                cur_type, cur = "U", u
                pos = 0
                while len(walk) < target_len:
                    next_type = steps[pos % len(steps)]
                    nbrs = graph.neighbors(cur_type, cur, next_type)
                    if not nbrs:
                        break
                    cur = int(nbrs[rng.integers(0, len(nbrs))])
                    cur_type = next_type
                    walk.append((cur_type, cur))
                    pos += 1
                if len(walk) > 1:
                    walks.append(walk)
    return walks


@dataclass
class NodeEmbeddings:
    """Dense rows for every graph node, addressable by "TYPE:external_id" key."""

    matrix: np.ndarray  # (n_nodes, d_m) float32
    keys: list[str]

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.keys):
            raise ValueError("row count must equal node count")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embeddings must be finite")
        self.row_of = {k: i for i, k in enumerate(self.keys)}

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def vector(self, key: str) -> np.ndarray | None:
        row = self.row_of.get(key)
        return None if row is None else self.matrix[row]


def post_context(post_id: str, embeddings: NodeEmbeddings, market_id: str | None = None) -> np.ndarray:
    """The post node's embedding row, or a zero vector for unknown posts."""
    key = f"P:{post_id}" if market_id is None else f"{market_id}|P:{post_id}"
    vec = embeddings.vector(key)
    if vec is None:
        return np.zeros(embeddings.dim, dtype=embeddings.matrix.dtype)
    return vec


def merge_embeddings(per_market: dict[str, NodeEmbeddings]) -> NodeEmbeddings:
    """Stack per-market embeddings into one store with market-prefixed keys."""
    keys: list[str] = []
    blocks = []
    for market in sorted(per_market):
        emb = per_market[market]
        keys.extend(f"{market}|{k}" for k in emb.keys)
        blocks.append(emb.matrix)
    return NodeEmbeddings(np.concatenate(blocks, axis=0), keys)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def sgns_batch_loss(center_vecs: np.ndarray, context_vecs: np.ndarray,
                    center: int, contexts: np.ndarray, negatives: np.ndarray) -> float:
    """Negative log-likelihood of one center's positive contexts and negatives."""
    v = center_vecs[center]
    pos = -np.log(np.clip(_sigmoid(context_vecs[contexts] @ v), 1e-12, None)).sum()
    neg = -np.log(np.clip(_sigmoid(-(context_vecs[negatives] @ v)), 1e-12, None)).sum()
    return float(pos + neg)


def sgns_batch_step(center_vecs: np.ndarray, context_vecs: np.ndarray,
                    center: int, contexts: np.ndarray, negatives: np.ndarray,
                    lr: float) -> None:
    """One synchronous gradient step on the loss above, updating both tables."""
    v = center_vecs[center]
    pos_err = _sigmoid(context_vecs[contexts] @ v) - 1.0  # d(loss)/d(score)
    neg_err = _sigmoid(context_vecs[negatives] @ v)
    grad_v = pos_err @ context_vecs[contexts] + neg_err @ context_vecs[negatives]
    grad_ctx = np.outer(pos_err, v)
    grad_neg = np.outer(neg_err, v)
    center_vecs[center] -= lr * grad_v
    np.add.at(context_vecs, contexts, -lr * grad_ctx)
    np.add.at(context_vecs, negatives, -lr * grad_neg)


def _train_sgns(
    token_walks: list[np.ndarray],
    total: int,
    d_m: int,
    window: int,
    negatives: int,
    epochs: int,
    step_size: float,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Core SGNS loop over integer-token walks; returns (center, context) tables."""
    rng = np.random.default_rng(seed)
    center_vecs = (rng.random((total, d_m)) - 0.5) / d_m
    context_vecs = np.zeros((total, d_m))

    # Add-one smoothing keeps every node samplable as a negative.
    counts = np.bincount(np.concatenate(token_walks), minlength=total).astype(np.float64)
    noise = (counts + 1.0) ** 0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    n_centers = sum(len(w) for w in token_walks)
    processed = 0
    for _ in range(epochs):
        for walk in token_walks:
            for i, center in enumerate(walk):
                lr = step_size * max(1.0 - processed / (epochs * n_centers), 1e-4)
                processed += 1
                lo, hi = max(0, i - window), min(len(walk), i + window + 1)
                contexts = np.concatenate([walk[lo:i], walk[i + 1 : hi]])
                if len(contexts) == 0:
                    continue
                draws = rng.random((len(contexts), negatives))
                negs = np.minimum(np.searchsorted(noise_cdf, draws), total - 1)
                # A sampled negative that hits its pair's true context is skipped.
                negs = negs[negs != contexts[:, None]]
                sgns_batch_step(center_vecs, context_vecs, int(center), contexts, negs, lr)
    return center_vecs, context_vecs


def node_offsets(graph: HeteroGraph) -> dict[str, int]:
    offsets = {}
    total = 0
    for t in NODE_TYPES:
        offsets[t] = total
        total += graph.count(t)
    return offsets


def train_skipgram(
    walks: list[Walk],
    graph: HeteroGraph,
    d_m: int,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 3,
    step_size: float = 0.025,
    seed: int = 0,
) -> NodeEmbeddings:
    """Skip-gram with negative sampling over walk windows.

    Negatives are drawn from the (smoothed) unigram distribution over all
    graph nodes raised to the 0.75 power. The learning rate decays linearly
    over the run. Returns the center table; rows of nodes never visited keep
    their seeded initialization.
    """
    if not any(len(w) >= 2 for w in walks):
        raise EmptyWalkSet("need at least one walk of length >= 2")
    offsets = node_offsets(graph)
    total = graph.total_nodes()
    token_walks = [np.array([offsets[t] + i for t, i in walk], dtype=np.int64) for walk in walks]
    center_vecs, _ = _train_sgns(token_walks, total, d_m, window, negatives, epochs, step_size, seed)
    return NodeEmbeddings(center_vecs.astype(np.float32), graph.node_keys())


def walk_keys(graph: HeteroGraph, walk: Walk) -> list[str]:
    return [f"{t}:{graph.node_name(t, i)}" for t, i in walk]


def train_skipgram_from_keys(
    key_walks: list[list[str]],
    all_keys: list[str],
    d_m: int,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 3,
    step_size: float = 0.025,
    seed: int = 0,
) -> NodeEmbeddings:
    """train_skipgram over walks expressed as node keys (the file-based path)."""
    if not any(len(w) >= 2 for w in key_walks):
        raise EmptyWalkSet("need at least one walk of length >= 2")
    index = {k: i for i, k in enumerate(all_keys)}
    token_walks = [np.array([index[k] for k in walk], dtype=np.int64) for walk in key_walks]
    center_vecs, _ = _train_sgns(
        token_walks, len(all_keys), d_m, window, negatives, epochs, step_size, seed
    )
    return NodeEmbeddings(center_vecs.astype(np.float32), list(all_keys))


def save_embeddings(emb: NodeEmbeddings, path) -> None:
    """Binary store: magic, version, node count, width, node table, float32 rows.

    A JSON sidecar at <path>.json maps each node key to its row index.
    """
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IQI", EMB_VERSION, len(emb.keys), emb.dim))
        for key in emb.keys:
            raw = key.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(emb.matrix, dtype="<f4").tobytes())
    sidecar = {key: i for i, key in enumerate(emb.keys)}
    with open(str(path) + ".json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, ensure_ascii=False, sort_keys=True)
        fh.write("\n")


def load_embeddings(path) -> NodeEmbeddings:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != EMB_MAGIC:
            raise ValueError(f"not a graph embeddings file: bad magic {magic!r}")
        version, n, d = struct.unpack("<IQI", fh.read(16))
        if version != EMB_VERSION:
            raise ValueError(f"unsupported embeddings version {version}")
        keys = []
        for _ in range(n):
            (klen,) = struct.unpack("<H", fh.read(2))
            keys.append(fh.read(klen).decode("utf-8"))
        data = fh.read(n * d * 4)
        matrix = np.frombuffer(data, dtype="<f4").reshape(n, d).copy()
    return NodeEmbeddings(matrix, keys)
