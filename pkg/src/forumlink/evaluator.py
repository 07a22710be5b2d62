"""Retrieval quality over episode embeddings.

Every query episode is ranked against all other episodes by cosine
similarity (self excluded, ties broken by ascending row index). A query is
valid when at least one other row shares its label. Reported measures:
mean reciprocal rank of the first same-label row, recall within the top k,
and a histogram of first-match positions.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

EMB_MAGIC = b"URM4E"
EMB_VERSION = 1


class NoValidQueries(ValueError):
    pass


@dataclass
class EpisodeEmbeddingSet:
    matrix: np.ndarray  # (n, dim)
    episode_ids: list[str]
    markets: list[str]
    authors: list[str]
    groups: list[int | None]  # identity group per row, when known

    def __post_init__(self):
        n = self.matrix.shape[0]
        if not (len(self.episode_ids) == len(self.markets) == len(self.authors) == n):
            raise ValueError("labels must align with matrix rows")
        if self.groups is None:
            self.groups = [None] * n
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("embedding rows must be finite")

    def labels(self, mode: str) -> list[str]:
        """Row labels: per-market authors, or identity groups when available."""
        if mode == "author":
            return [f"{m}|{a}" for m, a in zip(self.markets, self.authors)]
        if mode == "identity":
            return [
                f"g{g}" if g is not None else f"{m}|{a}"
                for g, m, a in zip(self.groups, self.markets, self.authors)
            ]
        raise ValueError("mode must be 'author' or 'identity'")


@dataclass
class MetricReport:
    mrr: float
    recall_at: dict[int, float]
    n_queries: int
    n_skipped: int
    histogram: list[int]  # first-match counts for positions 1..max_pos
    overflow: int  # first matches beyond max_pos

    def to_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "n_queries": self.n_queries,
            "n_skipped": self.n_skipped,
            "histogram": self.histogram,
            "overflow": self.overflow,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_histogram_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["position", "count"])
            for pos, count in enumerate(self.histogram, start=1):
                writer.writerow([pos, count])
            writer.writerow(["overflow", self.overflow])


def cosine_similarities(matrix: np.ndarray) -> np.ndarray:
    """Full pairwise cosine matrix in float64; zero rows stay at similarity 0."""
    x = np.asarray(matrix, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = x / safe[:, None]
    return unit @ unit.T


def rank_by_cosine(query: int, matrix: np.ndarray, sims: np.ndarray | None = None) -> np.ndarray:
    """Indices ordered by descending similarity to the query row, self excluded."""
    if matrix.shape[0] < 2:
        raise ValueError("need at least two rows to rank")
    if sims is None:
        sims = cosine_similarities(matrix)
    row = sims[query].copy()
    row[query] = -np.inf
    order = np.argsort(-row, kind="stable")  # stable: ties by ascending index
    return order[order != query]


def first_match_ranks(
    matrix: np.ndarray,
    labels: list[str],
    queries: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(query row, rank of first same-label row) pairs for all valid queries.

    Queries whose label appears on no other row are skipped. Ranks start
    at 1. Raises when no query is valid.
    """
    n = matrix.shape[0]
    if n < 2:
        raise NoValidQueries("need at least two rows")
    labels_arr = np.asarray(labels)
    query_rows = np.arange(n) if queries is None else np.asarray(queries, dtype=np.int64)
    sims = cosine_similarities(matrix)
    rows, ranks = [], []
    for i in query_rows:
        same = labels_arr == labels_arr[i]
        if same.sum() < 2:
            continue
        order = rank_by_cosine(int(i), matrix, sims)
        hit = np.nonzero(same[order])[0]
        rows.append(int(i))
        ranks.append(int(hit[0]) + 1)
    if not rows:
        raise NoValidQueries("every query label is unique in the set")
    return np.asarray(rows, dtype=np.int64), np.asarray(ranks, dtype=np.int64)


def mrr(matrix: np.ndarray, labels: list[str], queries: np.ndarray | None = None) -> float:
    _, ranks = first_match_ranks(matrix, labels, queries)
    return float(np.mean(1.0 / ranks))


def recall_at_k(matrix: np.ndarray, labels: list[str], k: int, queries: np.ndarray | None = None) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    _, ranks = first_match_ranks(matrix, labels, queries)
    return float(np.mean(ranks <= k))


def match_position_histogram(
    matrix: np.ndarray,
    labels: list[str],
    max_pos: int,
    queries: np.ndarray | None = None,
) -> tuple[list[int], int]:
    _, ranks = first_match_ranks(matrix, labels, queries)
    counts = [int(np.sum(ranks == pos)) for pos in range(1, max_pos + 1)]
    return counts, int(np.sum(ranks > max_pos))


def evaluate(
    emb: EpisodeEmbeddingSet,
    mode: str = "author",
    ks: tuple[int, ...] = (1, 5, 10),
    max_pos: int = 20,
    sample: int | None = None,
    seed: int = 0,
) -> MetricReport:
    """Full retrieval report; one similarity pass shared by all measures."""
    labels = emb.labels(mode)
    n = emb.matrix.shape[0]
    queries = None
    if sample is not None and sample < n:
        queries = np.sort(np.random.default_rng(seed).choice(n, size=sample, replace=False))
    rows, ranks = first_match_ranks(emb.matrix, labels, queries)
    n_candidates = n if queries is None else len(queries)
    counts = [int(np.sum(ranks == pos)) for pos in range(1, max_pos + 1)]
    return MetricReport(
        mrr=float(np.mean(1.0 / ranks)),
        recall_at={k: float(np.mean(ranks <= k)) for k in ks},
        n_queries=len(rows),
        n_skipped=n_candidates - len(rows),
        histogram=counts,
        overflow=int(np.sum(ranks > max_pos)),
    )


def save_embedding_set(emb: EpisodeEmbeddingSet, path) -> None:
    """Binary matrix (magic, version, n, dim, float32 rows) + JSON label sidecar."""
    matrix = np.ascontiguousarray(emb.matrix, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IQI", EMB_VERSION, matrix.shape[0], matrix.shape[1]))
        fh.write(matrix.tobytes())
    sidecar = {
        "episode_ids": emb.episode_ids,
        "markets": emb.markets,
        "authors": emb.authors,
        "groups": emb.groups,
    }
    with open(str(path) + ".json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, ensure_ascii=False, sort_keys=True)
        fh.write("\n")


def load_embedding_set(path) -> EpisodeEmbeddingSet:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != EMB_MAGIC:
            raise ValueError(f"{path}: not an episode embedding file")
        version, n, dim = struct.unpack("<IQI", fh.read(16))
        if version != EMB_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        matrix = np.frombuffer(fh.read(n * dim * 4), dtype="<f4").reshape(n, dim).copy()
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    return EpisodeEmbeddingSet(
        matrix=matrix,
        episode_ids=sidecar["episode_ids"],
        markets=sidecar["markets"],
        authors=sidecar["authors"],
        groups=sidecar["groups"],
    )
