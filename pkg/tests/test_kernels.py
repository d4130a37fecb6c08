import numpy as np

from servesim._kernels import (
    _common_prefix_len_np,
    as_tokens,
    block_prefix_len,
    common_prefix_len,
)
from oracles import naive_lcp


def test_lcp_matches_naive_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(0, 64))
        m = int(rng.integers(0, 64))
        a = rng.integers(0, 4, size=n).astype(np.int64)
        b = rng.integers(0, 4, size=m).astype(np.int64)
        expected = naive_lcp(a.tolist(), b.tolist())
        assert int(common_prefix_len(a, b)) == expected
        assert _common_prefix_len_np(a, b) == expected


def test_lcp_edge_cases():
    empty = as_tokens([])
    a = as_tokens([1, 2, 3])
    assert int(common_prefix_len(empty, a)) == 0
    assert int(common_prefix_len(a, a)) == 3
    assert int(common_prefix_len(a, as_tokens([1, 2, 3, 4]))) == 3


def test_block_truncation():
    a = as_tokens([1, 2, 3, 4, 5])
    b = as_tokens([1, 2, 3, 9, 9])
    assert block_prefix_len(a, b, 2) == 2
    assert block_prefix_len(a, a, 2) == 4
    assert block_prefix_len(a, b, 1) == 3
