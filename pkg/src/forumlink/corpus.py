"""Forum post ingestion, episode windowing, and synthetic corpus generation.

A corpus is a flat list of posts spanning one or more markets. Posts are
grouped per (market, author) and windowed into fixed-length episodes, the
unit that gets embedded and retrieved downstream. For experiments without
real data, `synth_corpus` generates a multi-market corpus with planted
per-person signatures (vocabulary, posting weekdays/hours, home subforum)
and a ground-truth identity map linking usernames across markets.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Iterable

import numpy as np

__all__ = [
    "Post",
    "Episode",
    "SynthSpec",
    "IdentityMap",
    "CorpusError",
    "MalformedLine",
    "MissingField",
    "BadTimestamp",
    "DuplicatePostId",
    "ConflictingStarters",
    "parse_posts",
    "parse_posts_file",
    "write_posts_jsonl",
    "posts_to_jsonl",
    "infer_thread_starters",
    "build_episodes",
    "split_posts",
    "synth_corpus",
    "identity_from_usernames",
]


class CorpusError(ValueError):
    """Base class for post/corpus validation failures."""


class MalformedLine(CorpusError):
    def __init__(self, line: int, detail: str = "not a JSON object"):
        super().__init__(f"line {line}: {detail}")
        self.line = line


class MissingField(CorpusError):
    def __init__(self, name: str, line: int, detail: str = "missing or invalid"):
        super().__init__(f"line {line}: field {name!r} {detail}")
        self.name = name
        self.line = line


class BadTimestamp(CorpusError):
    def __init__(self, line: int, value: object = None):
        super().__init__(f"line {line}: timestamp must be a non-negative integer, got {value!r}")
        self.line = line


class DuplicatePostId(CorpusError):
    def __init__(self, post_id: str, market_id: str):
        super().__init__(f"duplicate post_id {post_id!r} in market {market_id!r}")
        self.post_id = post_id
        self.market_id = market_id


class ConflictingStarters(CorpusError):
    def __init__(self, thread_id: str):
        super().__init__(f"thread {thread_id!r} has more than one explicit starter")
        self.thread_id = thread_id


@dataclass(frozen=True)
class Post:
    """One forum message. `post_id` is unique within its market."""

    market_id: str
    subforum_id: str
    thread_id: str
    post_id: str
    author_id: str
    timestamp: int  # seconds since Unix epoch, UTC
    text: str
    thread_starter: bool | None = None


@dataclass(frozen=True)
class Episode:
    """A fixed-length, chronologically ordered window of one author's posts."""

    market_id: str
    author_id: str
    posts: tuple[Post, ...]
    split: str = "train"  # "train" | "test"

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        for p in self.posts:
            if p.market_id != self.market_id or p.author_id != self.author_id:
                raise ValueError("episode posts must share market_id and author_id")
        keys = [(p.timestamp, p.post_id) for p in self.posts]
        if keys != sorted(keys):
            raise ValueError("episode posts must be sorted by (timestamp, post_id)")

    @property
    def episode_id(self) -> str:
        return f"{self.market_id}:{self.author_id}:{self.posts[0].post_id}"


_STRING_FIELDS = ("market_id", "subforum_id", "thread_id", "post_id", "author_id")


def _validate_record(obj: dict, line: int) -> Post:
    for name in _STRING_FIELDS:
        value = obj.get(name)
        if not isinstance(value, str) or not value:
            raise MissingField(name, line)
    ts = obj.get("timestamp")
    if not isinstance(ts, int) or isinstance(ts, bool) or ts < 0:
        raise BadTimestamp(line, ts)
    text = obj.get("text")
    if not isinstance(text, str):
        raise MissingField("text", line)
    if not text.strip():
        raise MissingField("text", line, "empty after trimming")
    starter = obj.get("thread_starter")
    if starter is not None and not isinstance(starter, bool):
        raise MissingField("thread_starter", line, "must be a boolean when present")
    return Post(
        market_id=obj["market_id"],
        subforum_id=obj["subforum_id"],
        thread_id=obj["thread_id"],
        post_id=obj["post_id"],
        author_id=obj["author_id"],
        timestamp=ts,
        text=text,
        thread_starter=starter,
    )


def parse_posts(lines: Iterable[str]) -> list[Post]:
    """Parse JSONL post records, validating each line.

    Raises on the first malformed line; error messages carry 1-based line
    numbers. Blank lines are permitted and skipped.
    """
    posts: list[Post] = []
    seen: set[tuple[str, str]] = set()
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise MalformedLine(line_no)
        post = _validate_record(obj, line_no)
        key = (post.market_id, post.post_id)
        if key in seen:
            raise DuplicatePostId(post.post_id, post.market_id)
        seen.add(key)
        posts.append(post)
    return posts


def parse_posts_file(path) -> list[Post]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_posts(fh)


def _post_to_obj(post: Post) -> dict:
    obj = {
        "market_id": post.market_id,
        "subforum_id": post.subforum_id,
        "thread_id": post.thread_id,
        "post_id": post.post_id,
        "author_id": post.author_id,
        "timestamp": post.timestamp,
        "text": post.text,
    }
    if post.thread_starter is not None:
        obj["thread_starter"] = post.thread_starter
    return obj


def posts_to_jsonl(posts: Iterable[Post]) -> str:
    lines = [json.dumps(_post_to_obj(p), ensure_ascii=False, separators=(",", ":")) for p in posts]
    return "\n".join(lines) + ("\n" if lines else "")


def write_posts_jsonl(posts: Iterable[Post], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(posts_to_jsonl(posts))


def infer_thread_starters(posts: list[Post]) -> list[Post]:
    """Resolve the thread_starter flag so every thread has exactly one starter.

    Explicit True flags are honored (two in one thread is an error). Where no
    post claims the thread, the earliest post wins, ties broken by post_id.
    Returns new Post records in the input order.
    """
    by_thread: dict[tuple[str, str], list[int]] = {}
    for i, p in enumerate(posts):
        by_thread.setdefault((p.market_id, p.thread_id), []).append(i)

    starter_index: dict[tuple[str, str], int] = {}
    for key, idxs in by_thread.items():
        explicit = [i for i in idxs if posts[i].thread_starter is True]
        if len(explicit) > 1:
            raise ConflictingStarters(key[1])
        if explicit:
            starter_index[key] = explicit[0]
            continue
        # No explicit starter: infer among unflagged posts, or among all posts
        # if every flag is an explicit False (the starter invariant wins).
        candidates = [i for i in idxs if posts[i].thread_starter is None] or idxs
        starter_index[key] = min(candidates, key=lambda i: (posts[i].timestamp, posts[i].post_id))

    resolved = []
    for i, p in enumerate(posts):
        is_starter = starter_index[(p.market_id, p.thread_id)] == i
        resolved.append(replace(p, thread_starter=is_starter))
    return resolved


def build_episodes(posts: list[Post], episode_len: int, stride: int, split: str = "train") -> list[Episode]:
    """Window each (market, author)'s chronologically sorted posts.

    Only full windows of `episode_len` posts are emitted; an author with
    fewer posts yields nothing. For n >= episode_len posts the number of
    windows is floor((n - episode_len) / stride) + 1.
    """
    if episode_len < 1:
        raise ValueError("episode_len must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    groups: dict[tuple[str, str], list[Post]] = {}
    for p in posts:
        groups.setdefault((p.market_id, p.author_id), []).append(p)

    episodes = []
    for (market_id, author_id), group in sorted(groups.items()):
        group.sort(key=lambda p: (p.timestamp, p.post_id))
        for start in range(0, len(group) - episode_len + 1, stride):
            episodes.append(
                Episode(
                    market_id=market_id,
                    author_id=author_id,
                    posts=tuple(group[start : start + episode_len]),
                    split=split,
                )
            )
    return episodes


def split_posts(posts: list[Post], quantile: float = 0.5) -> tuple[list[Post], list[Post]]:
    """Chronological train/test split, per market, at the given timestamp quantile.

    Posts at or before the market's threshold timestamp go to train. Input
    order is preserved within each side.
    """
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must be in [0, 1]")
    thresholds: dict[str, int] = {}
    by_market: dict[str, list[int]] = {}
    for p in posts:
        by_market.setdefault(p.market_id, []).append(p.timestamp)
    for market_id, stamps in by_market.items():
        stamps.sort()
        thresholds[market_id] = stamps[int(quantile * (len(stamps) - 1))]
    train = [p for p in posts if p.timestamp <= thresholds[p.market_id]]
    test = [p for p in posts if p.timestamp > thresholds[p.market_id]]
    return train, test


@dataclass(frozen=True)
class IdentityMap:
    """(market_id, author_id) pairs grouped by the person behind them."""

    groups: tuple[tuple[tuple[str, str], ...], ...]

    def __post_init__(self):
        seen: set[tuple[str, str]] = set()
        for group in self.groups:
            for pair in group:
                if pair in seen:
                    raise ValueError(f"{pair!r} appears in more than one identity group")
                seen.add(pair)

    @staticmethod
    def from_groups(groups: Iterable[Iterable[tuple[str, str]]]) -> "IdentityMap":
        return IdentityMap(tuple(tuple((m, a) for m, a in g) for g in groups))

    def group_index(self, market_id: str, author_id: str) -> int | None:
        return self._index().get((market_id, author_id))

    def _index(self) -> dict[tuple[str, str], int]:
        if not hasattr(self, "_idx"):
            idx = {}
            for gi, group in enumerate(self.groups):
                for pair in group:
                    idx[pair] = gi
            object.__setattr__(self, "_idx", idx)
        return self._idx

    def group_sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def to_json(self) -> str:
        data = [[[m, a] for m, a in group] for group in self.groups]
        return json.dumps(data, ensure_ascii=False, separators=(",", ":")) + "\n"

    @staticmethod
    def from_json(text: str) -> "IdentityMap":
        data = json.loads(text)
        return IdentityMap.from_groups([[(m, a) for m, a in group] for group in data])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @staticmethod
    def load(path) -> "IdentityMap":
        with open(path, "r", encoding="utf-8") as fh:
            return IdentityMap.from_json(fh.read())


def identity_from_usernames(posts: list[Post]) -> IdentityMap:
    """Link authors across markets by case-folded exact username match."""
    pairs = sorted({(p.market_id, p.author_id) for p in posts})
    by_key: dict[str, list[tuple[str, str]]] = {}
    for market_id, author_id in pairs:
        by_key.setdefault(author_id.casefold(), []).append((market_id, author_id))
    return IdentityMap.from_groups(by_key[k] for k in sorted(by_key))


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic multi-market corpus generator.

    The trailing strength knobs control how sharply the planted signatures
    separate authors; the defaults give a corpus where text, posting-time,
    and subforum habits all carry signal.
    """

    markets: int
    authors_per_market: int
    shared_author_fraction: float
    posts_per_author: int
    vocab_signature_size: int
    subforums_per_market: int
    seed: int
    sig_token_rate: float = 0.5  # fraction of tokens drawn from the private vocabulary
    dow_focus: float = 0.8  # probability a post lands on a preferred weekday
    subforum_focus: float = 0.75  # probability a post lands in the home subforum
    start_thread_prob: float = 0.2

    def __post_init__(self):
        for name in ("markets", "authors_per_market", "posts_per_author", "vocab_signature_size", "subforums_per_market"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("shared_author_fraction", "sig_token_rate", "dow_focus", "subforum_focus", "start_thread_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.seed < 0 or self.seed >= 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}

    @staticmethod
    def from_dict(data: dict) -> "SynthSpec":
        unknown = set(data) - set(SynthSpec.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        return SynthSpec(**data)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _word_stream() -> Iterable[str]:
    # Deterministic pronounceable words: 2-syllable then 3-syllable combinations.
    syllables = [c + v for c, v in itertools.product(_CONSONANTS, _VOWELS)]
    for a, b in itertools.product(syllables, syllables):
        yield a + b
    for a, b, c in itertools.product(syllables, syllables, syllables):
        yield a + b + c


_EPOCH_2013 = int(datetime(2013, 1, 7, tzinfo=timezone.utc).timestamp())  # a Monday
_WEEKS = 50


@dataclass
class _Person:
    pid: int
    sig_tokens: list[str]
    pref_dows: np.ndarray
    pref_hour: int
    home_subforum: int


def synth_corpus(spec: SynthSpec) -> tuple[dict[str, list[Post]], IdentityMap]:
    """Generate posts per market plus the ground-truth identity map.

    Every person gets a planted signature: a private token set mixed into
    shared vocabulary, one or two preferred posting weekdays with a preferred
    hour window, and a home subforum. Persons marked as shared appear in
    every market under a different username but keep the same signature.
    Output is a pure function of the spec (including its seed).
    """
    rng = np.random.default_rng(spec.seed)
    markets = [f"m{i}" for i in range(spec.markets)]
    n_shared = round(spec.shared_author_fraction * spec.authors_per_market) if spec.markets > 1 else 0
    n_unique = spec.authors_per_market - n_shared
    total_persons = n_shared + spec.markets * n_unique

    words = _word_stream()
    shared_pool = [next(words) for _ in range(400)]
    shared_weights = 1.0 / (np.arange(len(shared_pool)) + 2.7)
    shared_weights /= shared_weights.sum()

    persons = []
    for pid in range(total_persons):
        persons.append(
            _Person(
                pid=pid,
                sig_tokens=[next(words) for _ in range(spec.vocab_signature_size)],
                pref_dows=rng.choice(7, size=2, replace=False),
                pref_hour=int(rng.integers(0, 24)),
                home_subforum=int(rng.integers(0, spec.subforums_per_market)),
            )
        )

    # Shared persons live in every market; the rest are market-local.
    roster: dict[str, list[_Person]] = {m: list(persons[:n_shared]) for m in markets}
    cursor = n_shared
    for m in markets:
        roster[m].extend(persons[cursor : cursor + n_unique])
        cursor += n_unique

    groups: list[list[tuple[str, str]]] = []
    for p in persons[:n_shared]:
        groups.append([(m, _username(p.pid, mi)) for mi, m in enumerate(markets)])
    for mi, m in enumerate(markets):
        for p in roster[m][n_shared:]:
            groups.append([(m, _username(p.pid, mi))])

    posts_by_market: dict[str, list[Post]] = {}
    for mi, market in enumerate(markets):
        posts_by_market[market] = _market_posts(spec, rng, market, mi, roster[market], shared_pool, shared_weights)

    return posts_by_market, IdentityMap.from_groups(groups)


def _username(pid: int, market_index: int) -> str:
    return f"u{pid:04d}x{market_index}"


def _draw_timestamp(spec: SynthSpec, rng: np.random.Generator, person: _Person) -> int:
    week = int(rng.integers(0, _WEEKS))
    if rng.random() < spec.dow_focus:
        dow = int(person.pref_dows[int(rng.integers(0, 2))])
    else:
        dow = int(rng.integers(0, 7))
    if rng.random() < 0.7:
        hour = (person.pref_hour + int(rng.integers(0, 6))) % 24
    else:
        hour = int(rng.integers(0, 24))
    seconds = int(rng.integers(0, 3600))
    return _EPOCH_2013 + ((week * 7 + dow) * 24 + hour) * 3600 + seconds


def _draw_text(spec: SynthSpec, rng: np.random.Generator, person: _Person,
               shared_pool: list[str], shared_weights: np.ndarray) -> str:
    length = int(np.clip(round(rng.lognormal(mean=2.6, sigma=0.9)), 3, 300))
    tokens = []
    for _ in range(length):
        if rng.random() < spec.sig_token_rate:
            tokens.append(person.sig_tokens[int(rng.integers(0, len(person.sig_tokens)))])
        else:
            tokens.append(shared_pool[int(rng.choice(len(shared_pool), p=shared_weights))])
        if rng.random() < 0.04:
            tokens.append(",")
    if rng.random() < 0.6:
        tokens.append(".")
    return " ".join(tokens)


def _market_posts(spec: SynthSpec, rng: np.random.Generator, market: str, market_index: int,
                  people: list[_Person], shared_pool: list[str], shared_weights: np.ndarray) -> list[Post]:
    events = []
    for person in people:
        for _ in range(spec.posts_per_author):
            events.append((_draw_timestamp(spec, rng, person), person))
    events.sort(key=lambda e: (e[0], e[1].pid))

    threads_by_subforum: dict[int, list[str]] = {s: [] for s in range(spec.subforums_per_market)}
    thread_subforum: dict[str, int] = {}
    posts = []
    thread_counter = 0
    for i, (ts, person) in enumerate(events):
        if rng.random() < spec.subforum_focus:
            subforum = person.home_subforum
        else:
            subforum = int(rng.integers(0, spec.subforums_per_market))
        open_threads = threads_by_subforum[subforum][-15:]
        start_new = rng.random() < spec.start_thread_prob or not open_threads
        if start_new:
            thread_id = f"t{thread_counter:05d}"
            thread_counter += 1
            threads_by_subforum[subforum].append(thread_id)
            thread_subforum[thread_id] = subforum
        else:
            thread_id = open_threads[int(rng.integers(0, len(open_threads)))]
        posts.append(
            Post(
                market_id=market,
                subforum_id=f"s{thread_subforum[thread_id]}",
                thread_id=thread_id,
                post_id=f"p{i:06d}",
                author_id=_username(person.pid, market_index),
                timestamp=ts,
                text=_draw_text(spec, rng, person, shared_pool, shared_weights),
                thread_starter=start_new,
            )
        )
    return posts
