import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pointtpa import autodiff as ad
from pointtpa.sfc import quantize, serialize
from pointtpa.sng import SngConfig, group_assignments, group_tokens, partition, sng_forward, sng_inverse


def cloud(rng, n, c=4):
    return ad.tensor(rng.normal(size=(n, c))), rng.uniform(0, 1, size=(n, 3))


def test_partition_examples():
    assert partition(10, 3) == (3, 4)
    assert partition(4, 4) == (4, 1)
    assert partition(1, 7) == (1, 1)
    # a fourth group of 5 tokens in chunks of 2 would be empty
    assert partition(5, 4) == (3, 2)
    with pytest.raises(ValueError, match="empty"):
        partition(0, 2)


def test_group_sizes_four_four_two():
    rng = np.random.default_rng(0)
    x, coords = cloud(rng, 10)
    g = sng_forward(x, coords, SngConfig(group_counts=[3]))
    assert g.values.shape == (3, 4, 4)
    assert g.mask.sum(dim=1).tolist() == [4, 4, 2]


def test_one_token_per_group():
    rng = np.random.default_rng(1)
    x, coords = cloud(rng, 4)
    g = sng_forward(x, coords, SngConfig(group_counts=[4]))
    assert g.values.shape == (4, 1, 4) and bool(g.mask.all())


def test_single_group_is_serialized_sequence():
    rng = np.random.default_rng(2)
    x, coords = cloud(rng, 9)
    cfg = SngConfig(group_counts=[1])
    g = sng_forward(x, coords, cfg)
    order = serialize(coords, cfg.curve_for(0), cfg.order_bits_for(0))
    assert torch.equal(g.values[0], x[order.perm])


def test_disabled_grouping_uses_one_group():
    rng = np.random.default_rng(3)
    x, coords = cloud(rng, 30)
    assert sng_forward(x, coords, SngConfig(enabled=False)).group_count == 1


def test_points_mode():
    cfg = SngConfig(mode="points", points_per_group=200)
    assert cfg.groups_for(0, 1000) == 5
    assert cfg.groups_for(2, 1001) == 6


def test_halving_schedule():
    assert SngConfig.halving(32, 3).group_counts == [32, 16, 8]
    assert SngConfig.halving(5, 3).group_counts == [5, 3, 1]


def test_empty_cloud_and_mismatch():
    with pytest.raises(ValueError, match="empty"):
        sng_forward(torch.zeros(0, 3, dtype=ad.DTYPE), np.zeros((0, 3)), SngConfig())
    with pytest.raises(ValueError):
        sng_forward(torch.zeros(3, 2, dtype=ad.DTYPE), np.zeros((4, 3)), SngConfig())


def test_inverse_detects_bad_mask():
    rng = np.random.default_rng(4)
    x, coords = cloud(rng, 7)
    g = sng_forward(x, coords, SngConfig(group_counts=[3]))
    broken = g.mask.clone()
    broken[-1, -1] = True
    with pytest.raises(ValueError):
        sng_inverse(type(g)(g.values, broken, g.order))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 500), st.data(), st.sampled_from(["z", "z-trans", "hilbert", "hilbert-trans"]))
def test_round_trip_bit_exact(seed, n, data, curve):
    m = data.draw(st.integers(1, n))
    rng = np.random.default_rng(seed)
    x, coords = cloud(rng, n, 3)
    g = sng_forward(x, coords, SngConfig(group_counts=[m], curves=[curve]))
    assert torch.equal(sng_inverse(g), x)


def test_padding_value_never_reaches_real_tokens():
    rng = np.random.default_rng(5)
    x, coords = cloud(rng, 37)
    order = serialize(coords, "hilbert", 10)
    g0, g1 = group_tokens(x, order, 5), group_tokens(x, order, 5, fill=999.0)
    assert bool((g1.values[~g1.mask] == 999.0).all())
    assert torch.equal(sng_inverse(g0), sng_inverse(g1))


def test_group_assignments_rows():
    rng = np.random.default_rng(6)
    x, coords = cloud(rng, 10)
    g = sng_forward(x, coords, SngConfig(group_counts=[3]))
    rows = group_assignments(g)
    assert rows[:, 0].tolist() == list(range(10))
    assert np.bincount(rows[:, 1]).tolist() == [4, 4, 2]
    assert np.array_equal(rows[:, 3], g.order.codes)


def test_permutation_equivariance():
    rng = np.random.default_rng(7)
    x, coords = cloud(rng, 64)
    cfg = SngConfig(group_counts=[5])
    perm = rng.permutation(64)
    a = sng_inverse(sng_forward(x, coords, cfg))
    b = sng_inverse(sng_forward(x[perm], coords[perm], cfg))
    assert torch.equal(a[perm], b)
    assert torch.equal(sng_forward(x, coords, cfg).values, sng_forward(x[perm], coords[perm], cfg).values)


def l1_diameter(cells):
    return np.abs(cells[:, None, :] - cells[None, :, :]).sum(-1).max()


def test_hilbert_groups_are_more_compact_than_random_groups():
    n, m, bits = 1000, 50, 10
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        coords = rng.uniform(0, 1, size=(n, 3))
        cells = quantize(coords, bits)
        assert len(np.unique(cells, axis=0)) == n
        x = ad.tensor(np.zeros((n, 1)))
        g = sng_forward(x, coords, SngConfig(group_counts=[m], curves=["hilbert"], order_bits=bits))
        rows = group_assignments(g)
        curve = np.mean([l1_diameter(cells[rows[:, 1] == j]) for j in range(g.group_count)])
        random_groups = rng.permutation(n) // g.capacity
        baseline = np.mean([l1_diameter(cells[random_groups == j]) for j in range(g.group_count)])
        assert curve < baseline
