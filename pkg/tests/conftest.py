import pytest

from forumlink.corpus import Post


def make_post(market="m0", subforum="s0", thread="t0", pid="p0", author="alice",
              ts=0, text="hello world", starter=None) -> Post:
    return Post(
        market_id=market,
        subforum_id=subforum,
        thread_id=thread,
        post_id=pid,
        author_id=author,
        timestamp=ts,
        text=text,
        thread_starter=starter,
    )


@pytest.fixture
def two_user_thread():
    """U1 starts T1 in S1 (post P1); U2 replies with P2."""
    return [
        make_post(thread="t1", subforum="s1", pid="p1", author="u1", ts=100, starter=True),
        make_post(thread="t1", subforum="s1", pid="p2", author="u2", ts=200, starter=False),
    ]
