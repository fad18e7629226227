import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pointtpa.sfc import (
    CurveKind,
    GridCoord,
    hilbert_decode,
    hilbert_encode,
    morton_decode,
    morton_encode,
    quantize,
    serialize,
)

CURVES = ["z", "z-trans", "hilbert", "hilbert-trans"]


def morton_oracle(x, y, z, b):
    # interleave binary strings, x least significant within each triad
    bx, by, bz = (format(v, f"0{b}b") for v in (x, y, z))
    bits = "".join(bz[i] + by[i] + bx[i] for i in range(b))
    return int(bits, 2)


def test_quantize_corners():
    bbox = ((0.0, 0.0, 0.0), (2.0, 3.0, 4.0))
    assert quantize([bbox[0]], 4, bbox).tolist() == [[0, 0, 0]]
    assert quantize([bbox[1]], 4, bbox).tolist() == [[15, 15, 15]]


def test_quantize_midpoint_matches_scalar_reference():
    bbox = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    expected = [math.floor((0.5 - 0.0) / 1.0 * 2**1)] * 3
    assert quantize([[0.5, 0.5, 0.5]], 1, bbox).tolist() == [expected]


def test_quantize_degenerate_axis_maps_to_zero():
    pts = np.array([[0.0, 1.0, 5.0], [1.0, 2.0, 5.0]])
    assert quantize(pts, 3)[:, 2].tolist() == [0, 0]


def test_quantize_rejects_non_finite():
    with pytest.raises(ValueError, match="invalid coordinate"):
        quantize([[0.0, np.nan, 0.0]], 3)


def test_order_bits_range():
    with pytest.raises(ValueError):
        quantize([[0.0, 0.0, 0.0]], 0)
    with pytest.raises(ValueError):
        morton_encode((0, 0, 0), 21)


def test_morton_single_bits():
    assert morton_encode((0, 0, 0), 1) == 0
    assert morton_encode((1, 0, 0), 1) == 1
    assert morton_encode((0, 1, 0), 1) == 2
    assert morton_encode((0, 0, 1), 1) == 4


def test_morton_worked_example():
    assert morton_oracle(2, 3, 1, 2) == 30
    assert morton_encode((2, 3, 1), 2) == 30
    assert morton_decode(30, 2) == GridCoord(2, 3, 1)
    assert morton_decode(7, 1) == (1, 1, 1)
    assert morton_decode(0, 3) == (0, 0, 0)


@pytest.mark.parametrize("b", [1, 2, 3])
def test_morton_matches_oracle_exhaustively(b):
    side = 1 << b
    grid = np.array(list(itertools.product(range(side), repeat=3)))
    expected = [morton_oracle(x, y, z, b) for x, y, z in grid]
    assert morton_encode(grid, b).tolist() == expected


def test_out_of_range_errors():
    with pytest.raises(ValueError, match="coordinate out of range"):
        morton_encode((4, 0, 0), 2)
    with pytest.raises(ValueError, match="coordinate out of range"):
        hilbert_encode((0, -1, 0), 2)
    with pytest.raises(ValueError):
        morton_decode(64, 2)
    with pytest.raises(ValueError):
        hilbert_decode(-1, 2)


@pytest.mark.parametrize("b", [1, 2, 3, 4])
@pytest.mark.parametrize("encode,decode", [(morton_encode, morton_decode), (hilbert_encode, hilbert_decode)])
def test_bijection_exhaustive(b, encode, decode):
    n = 1 << (3 * b)
    cells = decode(np.arange(n), b)
    assert len({tuple(c) for c in cells}) == n
    assert encode(cells, b).tolist() == list(range(n))
    side = 1 << b
    grid = np.array(list(itertools.product(range(side), repeat=3)))
    assert np.array_equal(decode(encode(grid, b), b), grid)


def test_hilbert_origin_and_corner_tour():
    assert hilbert_encode((0, 0, 0), 5) == 0
    assert hilbert_decode(0, 3) == (0, 0, 0)
    corners = {tuple(hilbert_decode(k, 1)) for k in range(8)}
    assert corners == set(itertools.product((0, 1), repeat=3))


@pytest.mark.parametrize("b", [1, 2, 3, 4])
def test_hilbert_adjacency(b):
    cells = hilbert_decode(np.arange(1 << (3 * b)), b)
    steps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
    assert np.all(steps == 1)


@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.integers(0, 63)), st.sampled_from(CURVES))
def test_permuted_variant_is_base_curve_on_permuted_axes(grid, name):
    curve = CurveKind.parse(name)
    base = hilbert_encode if curve.is_hilbert else morton_encode
    assert np.array_equal(curve.encode(grid, 6), base(grid[:, list(curve.axis_perm)], 6))


def test_curve_kind_rejects_bad_permutation():
    with pytest.raises(ValueError):
        CurveKind(CurveKind.parse("z").variant, (0, 0, 1))


def test_serialize_examples():
    assert serialize([[1.0, 2.0, 3.0]], "z").perm.tolist() == [0]
    bbox = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    pts = np.array([[0.75, 0.25, 0.75], [0.25, 0.75, 0.25]])
    order = serialize(pts, "z", order_bits=1, bbox=bbox)
    assert order.codes.tolist() == [5, 2]
    assert order.perm.tolist() == [1, 0]
    same = serialize(np.ones((3, 3)), "hilbert")
    assert same.perm.tolist() == [0, 1, 2]


def test_serialize_empty():
    with pytest.raises(ValueError, match="empty"):
        serialize(np.zeros((0, 3)), "z")


@settings(max_examples=50)
@given(
    hnp.arrays(np.float64, st.tuples(st.integers(1, 200), st.just(3)), elements=st.floats(-100, 100)),
    st.sampled_from(CURVES),
    st.integers(1, 12),
)
def test_serialize_returns_valid_permutation(coords, name, bits):
    order = serialize(coords, name, bits)
    n = len(coords)
    assert sorted(order.perm.tolist()) == list(range(n))
    assert np.array_equal(order.perm[order.inv_perm], np.arange(n))
    assert np.array_equal(order.inv_perm[order.perm], np.arange(n))
    again = serialize(coords, name, bits)
    assert np.array_equal(order.perm, again.perm) and np.array_equal(order.codes, again.codes)
    codes_sorted = order.codes[order.perm]
    assert np.all(np.diff(codes_sorted) >= 0)
