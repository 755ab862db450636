import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qsparse.errors import FormatError
from qsparse.tensorkit import (
    CompressedChannel, addr_activation, addr_weight, compress_activation, compress_channel,
    decompress_activation, decompress_channel,
)


def enumerate_layout(dims):
    """Address table built by walking indices with the last axis fastest."""
    table = {}
    for addr, idx in enumerate(itertools.product(*(range(n) for n in dims))):
        table[idx] = addr
    return table


@pytest.mark.parametrize("idx, expected", [((0, 0, 0), 0), ((1, 0, 1), 5), ((1, 1, 0), 6)])
def test_addr_activation_examples(idx, expected):
    assert addr_activation(*idx, dims=(2, 2, 2)) == expected


@pytest.mark.parametrize("idx, expected", [((0, 0, 0, 0), 0), ((1, 0, 1, 0), 10), ((0, 1, 0, 1), 5)])
def test_addr_weight_examples(idx, expected):
    assert addr_weight(*idx, dims=(2, 2, 2, 2)) == expected


@pytest.mark.parametrize("dims", [(3, 4, 5), (1, 1, 1), (4, 2, 7)])
def test_addr_activation_matches_enumeration(dims):
    table = enumerate_layout(dims)
    for idx, addr in table.items():
        assert addr_activation(*idx, dims=dims) == addr


@pytest.mark.parametrize("dims", [(2, 3, 3, 3), (3, 1, 2, 5)])
def test_addr_weight_matches_enumeration(dims):
    table = enumerate_layout(dims)
    for idx, addr in table.items():
        assert addr_weight(*idx, dims=dims) == addr


def test_channel_contiguity():
    C, H, W = 3, 4, 5
    for c in range(C):
        addrs = {addr_activation(c, h, w, (C, H, W)) for h in range(H) for w in range(W)}
        assert addrs == set(range(c * H * W, (c + 1) * H * W))


def test_weights_of_one_input_channel_are_contiguous():
    dims = C, K, R, S = 3, 4, 3, 3
    block = K * R * S
    for c in range(C):
        addrs = {addr_weight(c, k, r, s, dims) for k in range(K) for r in range(R) for s in range(S)}
        assert addrs == set(range(c * block, (c + 1) * block))


@pytest.mark.parametrize("bad", [(2, 0, 0), (0, 2, 0), (0, 0, -1)])
def test_addr_out_of_range(bad):
    with pytest.raises(IndexError):
        addr_activation(*bad, dims=(2, 2, 2))
    with pytest.raises(IndexError):
        addr_weight(*bad, 0, dims=(2, 2, 2, 2))


def test_compress_examples():
    cc = compress_channel([0, 3, 0, 5])
    assert cc.mask.tolist() == [False, True, False, True]
    assert cc.values.tolist() == [3, 5]
    empty = compress_channel([0, 0])
    assert empty.mask.tolist() == [False, False]
    assert empty.values.size == 0


def test_bitmap_is_little_endian_within_bytes():
    x = np.zeros(16, dtype=int)
    x[[0, 3, 9]] = 1
    cc = compress_channel(x)
    assert cc.bitmap.tolist() == [0b00001001, 0b00000010]


def test_decompress_examples():
    cc = compress_channel([0, 3, 0, 5])
    assert decompress_channel(cc, 4).tolist() == [0, 3, 0, 5]
    assert decompress_channel(compress_channel([0, 0, 0]), 3).tolist() == [0, 0, 0]


def test_decompress_rejects_mismatch():
    cc = compress_channel([0, 3, 0, 5])
    bad = CompressedChannel(cc.bitmap, np.array([3]), 4)
    with pytest.raises(FormatError):
        decompress_channel(bad, 4)
    with pytest.raises(FormatError):
        decompress_channel(cc, 5)


def test_random_channels_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        x = rng.integers(-8, 8, size=n) * (rng.random(n) < rng.random())
        cc = compress_channel(x)
        assert cc.nnz == np.count_nonzero(x)
        np.testing.assert_array_equal(decompress_channel(cc, n), x)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-128, 127), min_size=1, max_size=300))
def test_roundtrip_property(values):
    x = np.array(values)
    cc = compress_channel(x)
    assert int(cc.mask.sum()) == cc.values.size == np.count_nonzero(x)
    np.testing.assert_array_equal(decompress_channel(cc, x.size), x)


def test_activation_roundtrip():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 4, size=(5, 3, 7)) * (rng.random((5, 3, 7)) < 0.4)
    np.testing.assert_array_equal(decompress_activation(compress_activation(x), x.shape), x)


def test_compressed_size_counts_bitmap_and_values():
    cc = compress_channel([0, 1, 2, 0, 0, 0, 0, 0, 3])
    assert cc.nbytes(4) == 2 + 2  # 9 bits -> 2 bytes, 3 nibbles -> 2 bytes
