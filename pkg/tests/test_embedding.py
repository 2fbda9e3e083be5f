import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exotst import numerics as nx
from exotst.embedding import (
    EmbeddingParams,
    PatchConfig,
    denormalize,
    embed_patches,
    embed_tokens,
    init_embedding,
    instance_normalize,
    num_patches,
    patchify,
    patchify_batch,
    sinusoidal_table,
)
from exotst.errors import ConfigError
from oracles import patch_walker


def test_instance_normalize_constant():
    z, mu, sd = instance_normalize([5.0, 5.0, 5.0])
    assert z.tolist() == [0.0, 0.0, 0.0] and mu == 5.0 and sd == 1e-5


def test_instance_normalize_population_std():
    z, mu, sd = instance_normalize([1.0, 2.0, 3.0])
    assert mu == 2.0
    assert sd == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    assert np.allclose(z, [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
def test_normalize_roundtrip(values):
    x = np.array(values)
    z, mu, sd = instance_normalize(x)
    assert np.allclose(denormalize(z, mu, sd), x, atol=1e-10 * max(1.0, np.abs(x).max()))
    if x.std() > 1e-3:
        assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9


def test_instance_normalize_batched_last_axis():
    x = np.random.default_rng(0).normal(size=(3, 4, 10))
    z, mu, sd = instance_normalize(x)
    assert mu.shape == (3, 4) and sd.shape == (3, 4)
    assert np.allclose(z.mean(axis=-1), 0, atol=1e-12)


@pytest.mark.parametrize("I,P,S,N", [(256, 16, 8, 32), (16, 16, 8, 2), (30, 16, 8, 3), (30, 4, 2, 15), (16, 4, 2, 8)])
def test_patch_counts(I, P, S, N):
    assert num_patches(I, P, S) == N
    assert patchify(np.arange(I, dtype=float), PatchConfig(P, S, 8)).shape == (P, N)


def test_second_patch_is_half_padding():
    x = np.arange(16, dtype=float)
    p = patchify(x, PatchConfig(16, 8, 8))
    assert p[:, 1].tolist() == list(range(8, 16)) + [15.0] * 8


def test_short_series_padded_to_patch_length():
    p = patchify(np.array([1.0, 2.0]), PatchConfig(4, 2, 8))
    assert p.shape == (4, 2)
    assert p[:, 0].tolist() == [1.0, 2.0, 2.0, 2.0]


def test_patch_config_validation():
    with pytest.raises(ConfigError):
        PatchConfig(4, 5, 8)
    with pytest.raises(ConfigError):
        PatchConfig(4, 0, 8)


def _triples(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        I = int(rng.integers(1, 513))
        P = int(rng.integers(1, I + 1))
        S = int(rng.integers(1, P + 1))
        out.append((I, P, S))
    return out


@pytest.mark.parametrize("I,P,S", _triples(500))
def test_patches_match_walker(I, P, S):
    x = np.random.default_rng(I * 1000 + P).normal(size=I)
    got = patchify_batch(x, P, S)
    want = patch_walker(x.tolist(), P, S)
    assert got.shape[0] == (I - P) // S + 2 == len(want)
    assert np.array_equal(got, np.array(want))


@settings(max_examples=100, deadline=None)
@given(I=st.integers(1, 300), P=st.integers(1, 32))
def test_non_overlapping_patches_partition_input(I, P):
    if P > I:
        return
    x = np.arange(I, dtype=float)
    p = patchify_batch(x, P, P)
    first = p[:math.ceil(I / P)].ravel()[:I]
    assert first.tolist() == x.tolist()


@settings(max_examples=100, deadline=None)
@given(I=st.integers(1, 512), P=st.integers(1, 32), data=st.data())
def test_token_count_reduction(I, P, data):
    S = data.draw(st.integers(1, P))
    if P > I:
        return
    assert num_patches(I, P, S) <= math.ceil(I / S) + 2


def _params(D=4, P=3, N=5, agg=True):
    rng = nx.make_rng(0)
    return init_embedding(rng, D, P, N, agg_slot=True, with_agg=agg)


def test_zero_weights_give_zero_tokens():
    p = _params()
    p.w_p.data[...] = 0
    p.w_pos.data[...] = 0
    out = embed_patches(np.ones((2, 5, 3)), p)
    assert np.all(out.data == 0)


def test_positional_columns_are_added_in_order():
    p = _params()
    p.w_p.data[...] = 0
    out = embed_patches(np.ones((4, 3)), p).data
    for n in range(4):
        assert np.array_equal(out[n], p.w_pos.data[:, n])


def test_hand_matmul_embedding():
    u = np.array([1.0, -2.0, 0.5])
    params = EmbeddingParams(nx.parameter(u[:, None]), nx.parameter(np.zeros((3, 3))), None, agg_slot=True)
    seq = embed_tokens(np.array([[2.0, 3.0]]), params)
    assert np.array_equal(seq.tokens.data[0], np.stack([2 * u, 3 * u]))
    assert not seq.has_agg


def test_agg_token_prepended_with_own_position():
    p = _params()
    out = embed_patches(np.zeros((2, 4, 3)), p, attach_agg=True).data
    assert out.shape == (2, 5, 4)
    assert np.allclose(out[0, 0], p.agg.data + p.w_pos.data[:, -1])
    assert np.allclose(out[1, 0], out[0, 0])


def test_too_many_patches_is_config_error():
    with pytest.raises(ConfigError):
        embed_patches(np.zeros((6, 3)), _params(N=5))


def test_sinusoidal_init():
    t = sinusoidal_table(4, 3)
    assert t[0].tolist() == [0.0, math.sin(1.0), math.sin(2.0)]
    assert t[1].tolist() == [1.0, math.cos(1.0), math.cos(2.0)]
    assert np.array_equal(_params(D=4, N=2).w_pos.data, sinusoidal_table(4, 3))
