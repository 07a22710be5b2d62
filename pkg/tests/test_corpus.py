import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forumlink.corpus import (
    BadTimestamp,
    ConflictingStarters,
    DuplicatePostId,
    IdentityMap,
    MalformedLine,
    MissingField,
    SynthSpec,
    build_episodes,
    identity_from_usernames,
    infer_thread_starters,
    parse_posts,
    posts_to_jsonl,
    split_posts,
    synth_corpus,
)

from conftest import make_post


def post_line(**overrides) -> str:
    obj = {
        "market_id": "m0",
        "subforum_id": "s0",
        "thread_id": "t0",
        "post_id": "p0",
        "author_id": "alice",
        "timestamp": 12,
        "text": "hello there",
    }
    obj.update(overrides)
    return json.dumps(obj)


class TestParsePosts:
    def test_empty_stream(self):
        assert parse_posts([]) == []

    def test_single_well_formed_line(self):
        posts = parse_posts([post_line(thread_starter=True)])
        assert len(posts) == 1
        p = posts[0]
        assert (p.market_id, p.post_id, p.author_id) == ("m0", "p0", "alice")
        assert p.timestamp == 12 and p.thread_starter is True

    def test_duplicate_post_id_within_market(self):
        lines = [post_line(post_id="p1"), post_line(post_id="p1", text="again")]
        with pytest.raises(DuplicatePostId):
            parse_posts(lines)

    def test_same_post_id_in_different_markets_ok(self):
        lines = [post_line(post_id="p1"), post_line(post_id="p1", market_id="m1")]
        assert len(parse_posts(lines)) == 2

    def test_missing_field_carries_line_number(self):
        obj = json.loads(post_line())
        del obj["author_id"]
        with pytest.raises(MissingField) as err:
            parse_posts([post_line(), json.dumps(obj)])
        assert err.value.line == 2 and err.value.name == "author_id"

    @pytest.mark.parametrize("ts", [-1, 1.5, "12", True, None])
    def test_bad_timestamp(self, ts):
        with pytest.raises(BadTimestamp):
            parse_posts([post_line(timestamp=ts)])

    def test_empty_text_rejected(self):
        with pytest.raises(MissingField):
            parse_posts([post_line(text="   \t ")])

    def test_malformed_json(self):
        with pytest.raises(MalformedLine):
            parse_posts(["{not json"])
        with pytest.raises(MalformedLine):
            parse_posts(['["array", "not", "object"]'])

    def test_blank_lines_skipped(self):
        assert len(parse_posts(["", post_line(), "  "])) == 1

    def test_roundtrip_through_jsonl(self):
        posts = parse_posts([post_line(), post_line(post_id="p1", thread_starter=False)])
        again = parse_posts(posts_to_jsonl(posts).splitlines())
        assert again == posts


class TestInferThreadStarters:
    def test_single_post_is_starter(self):
        out = infer_thread_starters([make_post()])
        assert out[0].thread_starter is True

    def test_earliest_timestamp_wins(self):
        posts = [
            make_post(pid="p1", ts=20),
            make_post(pid="p2", ts=10),
            make_post(pid="p3", ts=30),
        ]
        out = infer_thread_starters(posts)
        flags = {p.post_id: p.thread_starter for p in out}
        assert flags == {"p1": False, "p2": True, "p3": False}

    def test_timestamp_tie_breaks_on_post_id(self):
        posts = [make_post(pid="pb", ts=10), make_post(pid="pa", ts=10)]
        out = infer_thread_starters(posts)
        assert {p.post_id: p.thread_starter for p in out} == {"pa": True, "pb": False}

    def test_explicit_flag_preserved_even_if_not_earliest(self):
        posts = [make_post(pid="p1", ts=10), make_post(pid="p2", ts=20, starter=True)]
        out = infer_thread_starters(posts)
        assert {p.post_id: p.thread_starter for p in out} == {"p1": False, "p2": True}

    def test_two_explicit_starters_conflict(self):
        posts = [make_post(pid="p1", starter=True), make_post(pid="p2", starter=True)]
        with pytest.raises(ConflictingStarters):
            infer_thread_starters(posts)

    def test_same_thread_id_in_other_market_is_separate(self):
        posts = [make_post(pid="p1"), make_post(pid="p1", market="m1")]
        out = infer_thread_starters(posts)
        assert all(p.thread_starter for p in out)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 1000)), min_size=1, max_size=30))
    def test_every_thread_gets_exactly_one_starter(self, items):
        posts = [
            make_post(thread=f"t{tid}", pid=f"p{i}", ts=ts)
            for i, (tid, ts) in enumerate(items)
        ]
        out = infer_thread_starters(posts)
        by_thread = {}
        for p in out:
            by_thread.setdefault(p.thread_id, []).append(p.thread_starter)
        for flags in by_thread.values():
            assert sum(flags) == 1


class TestBuildEpisodes:
    def _posts(self, n, author="alice"):
        return [make_post(pid=f"p{i:03d}", ts=i * 10, author=author) for i in range(n)]

    def test_too_few_posts_yield_nothing(self):
        assert build_episodes(self._posts(4), episode_len=5, stride=1) == []

    def test_sliding_windows(self):
        posts = self._posts(7)
        episodes = build_episodes(posts, episode_len=5, stride=1)
        # Oracle: enumerate the windows directly.
        expected = [tuple(posts[i : i + 5]) for i in range(3)]
        assert [ep.posts for ep in episodes] == expected

    def test_exact_window(self):
        episodes = build_episodes(self._posts(5), episode_len=5, stride=5)
        assert len(episodes) == 1

    def test_unsorted_input_is_sorted_chronologically(self):
        posts = list(reversed(self._posts(6)))
        episodes = build_episodes(posts, episode_len=3, stride=3)
        for ep in episodes:
            stamps = [p.timestamp for p in ep.posts]
            assert stamps == sorted(stamps)

    def test_groups_are_per_market_and_author(self):
        posts = self._posts(3, "alice") + [
            make_post(pid=f"q{i}", ts=i, author="bob") for i in range(3)
        ]
        episodes = build_episodes(posts, episode_len=3, stride=3)
        assert {(e.market_id, e.author_id) for e in episodes} == {("m0", "alice"), ("m0", "bob")}

    @given(
        n=st.integers(0, 60),
        episode_len=st.integers(1, 8),
        stride=st.integers(1, 8),
    )
    def test_window_count_formula(self, n, episode_len, stride):
        episodes = build_episodes(self._posts(n), episode_len, stride)
        expected = 0 if n < episode_len else (n - episode_len) // stride + 1
        assert len(episodes) == expected
        for ep in episodes:
            assert len(ep.posts) == episode_len

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            build_episodes([], 0, 1)
        with pytest.raises(ValueError):
            build_episodes([], 1, 0)


class TestSplitPosts:
    def test_split_is_chronological_per_market(self):
        posts = [make_post(pid=f"p{i}", ts=i) for i in range(10)]
        posts += [make_post(pid=f"q{i}", ts=1000 + i, market="m1") for i in range(4)]
        train, test = split_posts(posts, quantile=0.5)
        for market in ("m0", "m1"):
            tr = [p.timestamp for p in train if p.market_id == market]
            te = [p.timestamp for p in test if p.market_id == market]
            assert max(tr) < min(te)
        assert len(train) + len(test) == len(posts)

    def test_episodes_never_straddle_the_split(self):
        posts = [make_post(pid=f"p{i}", ts=i) for i in range(20)]
        train, test = split_posts(posts, 0.5)
        cut = max(p.timestamp for p in train)
        for ep in build_episodes(train, 3, 1) + build_episodes(test, 3, 1):
            stamps = [p.timestamp for p in ep.posts]
            assert all(t <= cut for t in stamps) or all(t > cut for t in stamps)


class TestIdentityMap:
    def test_pair_in_two_groups_rejected(self):
        with pytest.raises(ValueError):
            IdentityMap.from_groups([[("m0", "a")], [("m0", "a")]])

    def test_json_roundtrip(self):
        im = IdentityMap.from_groups([[("m0", "a"), ("m1", "b")], [("m0", "c")]])
        again = IdentityMap.from_json(im.to_json())
        assert again == im
        assert again.group_index("m1", "b") == 0
        assert again.group_index("m1", "zz") is None

    def test_username_linking_casefolds(self):
        posts = [
            make_post(author="Alice"),
            make_post(author="alice", market="m1", pid="p9"),
            make_post(author="bob", market="m1", pid="p8"),
        ]
        im = identity_from_usernames(posts)
        assert sorted(im.group_sizes()) == [1, 2]


class TestSynthCorpus:
    def test_single_market_all_singletons(self):
        spec = SynthSpec(markets=1, authors_per_market=5, shared_author_fraction=0.0,
                         posts_per_author=4, vocab_signature_size=3,
                         subforums_per_market=2, seed=1)
        _, identity = synth_corpus(spec)
        assert identity.group_sizes() == [1] * 5

    def test_determinism_is_byte_exact(self):
        spec = SynthSpec(markets=2, authors_per_market=4, shared_author_fraction=0.5,
                         posts_per_author=6, vocab_signature_size=3,
                         subforums_per_market=2, seed=99)
        first = synth_corpus(spec)
        second = synth_corpus(spec)
        for market in first[0]:
            assert posts_to_jsonl(first[0][market]) == posts_to_jsonl(second[0][market])
        assert first[1].to_json() == second[1].to_json()

    def test_shared_group_counts(self):
        spec = SynthSpec(markets=2, authors_per_market=10, shared_author_fraction=0.5,
                         posts_per_author=3, vocab_signature_size=3,
                         subforums_per_market=2, seed=7)
        _, identity = synth_corpus(spec)
        sizes = identity.group_sizes()
        assert sizes.count(2) == 5 and sizes.count(1) == 10 and len(sizes) == 15

    def test_generated_posts_are_valid(self):
        spec = SynthSpec(markets=2, authors_per_market=3, shared_author_fraction=0.34,
                         posts_per_author=5, vocab_signature_size=3,
                         subforums_per_market=2, seed=3)
        posts_by_market, identity = synth_corpus(spec)
        for market, posts in posts_by_market.items():
            assert len(posts) == 3 * 5
            assert len({p.post_id for p in posts}) == len(posts)
            authors = {}
            starters_by_thread = {}
            for p in posts:
                assert p.market_id == market
                assert p.timestamp >= 0
                assert p.text.strip()
                authors[p.author_id] = authors.get(p.author_id, 0) + 1
                starters_by_thread.setdefault(p.thread_id, []).append(p.thread_starter)
            assert all(n == 5 for n in authors.values())
            for flags in starters_by_thread.values():
                assert sum(flags) == 1
        # every (market, author) pair is covered by exactly one identity group
        pairs = {(m, p.author_id) for m, posts in posts_by_market.items() for p in posts}
        mapped = {pair for group in identity.groups for pair in group}
        assert pairs == mapped

    def test_shared_signature_reuses_tokens_across_markets(self):
        spec = SynthSpec(markets=2, authors_per_market=4, shared_author_fraction=0.5,
                         posts_per_author=12, vocab_signature_size=4,
                         subforums_per_market=2, seed=13, sig_token_rate=0.9)
        posts_by_market, identity = synth_corpus(spec)
        shared = [g for g in identity.groups if len(g) == 2][0]
        token_sets = []
        for market, author in shared:
            text = " ".join(p.text for p in posts_by_market[market] if p.author_id == author)
            token_sets.append(set(text.replace(",", " ").replace(".", " ").split()))
        overlap = token_sets[0] & token_sets[1]
        assert len(overlap) >= 2  # the planted private tokens recur in both markets

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SynthSpec(markets=0, authors_per_market=1, shared_author_fraction=0.0,
                      posts_per_author=1, vocab_signature_size=1, subforums_per_market=1, seed=0)
        with pytest.raises(ValueError):
            SynthSpec(markets=1, authors_per_market=1, shared_author_fraction=1.5,
                      posts_per_author=1, vocab_signature_size=1, subforums_per_market=1, seed=0)
        with pytest.raises(ValueError):
            SynthSpec.from_dict({"bogus_key": 1})
