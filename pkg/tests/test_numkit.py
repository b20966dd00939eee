import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from madpot.errors import InvalidInputError, ShapeError
from madpot.numkit import (
    Rng,
    bicubic_matrix,
    bicubic_resize,
    bicubic_resize_adjoint,
    cosine_cost,
    cubic_kernel,
    l2_normalize_rows,
    rng_next,
    softmax,
    softmax_vjp,
    splitmix64_block,
)

from oracles import bicubic_direct, catmull_rom, central_difference, splitmix64_ref

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


# --- softmax -----------------------------------------------------------------


@pytest.mark.parametrize(
    "logits, expected",
    [
        ([0.0, 0.0], [0.5, 0.5]),
        ([math.log(2.0), 0.0], [2 / 3, 1 / 3]),
        ([1000.0, 1000.0 + math.log(3.0)], [0.25, 0.75]),
    ],
)
def test_softmax_examples(logits, expected):
    np.testing.assert_allclose(softmax(np.array(logits)), expected, atol=1e-12)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(InvalidInputError):
        softmax(np.array([0.0, bad]))


def test_softmax_rejects_bad_tau():
    with pytest.raises(InvalidInputError):
        softmax(np.zeros(2), tau=0.0)


@given(arrays(float, st.integers(1, 8), elements=finite), finite, st.floats(0.05, 5))
def test_softmax_simplex_and_shift_invariance(z, shift, tau):
    p = softmax(z, tau)
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0)
    np.testing.assert_allclose(softmax(z + shift, tau), p, atol=1e-12)


def test_softmax_vjp_matches_finite_differences():
    rng = Rng(3)
    z, w = rng.uniform(-2, 2, 5), rng.uniform(-1, 1, 5)
    tau = 0.3
    p = softmax(z, tau)
    numeric = central_difference(lambda v: float(w @ softmax(v, tau)), z)
    np.testing.assert_allclose(softmax_vjp(p, w, tau), numeric, rtol=1e-7, atol=1e-10)


# --- normalisation and cosine cost -------------------------------------------


def test_l2_normalize_examples():
    out = l2_normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0], [1.0, 0.0]], atol=1e-15)


@given(arrays(float, (4, 3), elements=finite))
def test_l2_normalize_unit_or_zero(m):
    norms = np.linalg.norm(l2_normalize_rows(m), axis=1)
    for raw, n in zip(np.linalg.norm(m, axis=1), norms):
        assert n == 0.0 if raw == 0 else abs(n - 1.0) <= 1e-12


@pytest.mark.parametrize("p_row, cost", [([1.0, 0.0], 0.0), ([0.0, 1.0], 1.0), ([-1.0, 0.0], 2.0)])
def test_cosine_cost_examples(p_row, cost):
    assert cosine_cost(np.array([[1.0, 0.0]]), np.array([p_row]))[0, 0] == pytest.approx(cost, abs=1e-15)


def test_cosine_cost_shape_error():
    with pytest.raises(ShapeError):
        cosine_cost(np.ones((2, 3)), np.ones((2, 4)))


def test_cosine_cost_zero_row_costs_one():
    c = cosine_cost(np.zeros((1, 3)), np.eye(3))
    np.testing.assert_array_equal(c, np.ones((1, 3)))


@given(
    arrays(float, (3, 4), elements=st.floats(-5, 5)),
    arrays(float, (2, 4), elements=st.floats(-5, 5)),
    st.floats(0.01, 100),
    st.integers(0, 2),
)
def test_cosine_cost_row_scale_invariance(o, p, scale, row):
    base = cosine_cost(o, p)
    o2 = o.copy()
    o2[row] *= scale
    p2 = p * scale
    np.testing.assert_allclose(cosine_cost(o2, p), base, atol=1e-12)
    np.testing.assert_allclose(cosine_cost(o, p2), base, atol=1e-12)
    assert np.all((base >= 0) & (base <= 2))


# --- bicubic -------------------------------------------------------------------


def test_cubic_kernel_matches_reference_and_interpolates():
    xs = np.linspace(-2.5, 2.5, 101)
    np.testing.assert_allclose(cubic_kernel(xs), [catmull_rom(x) for x in xs], atol=1e-15)
    np.testing.assert_array_equal(cubic_kernel(np.array([0.0, 1.0, 2.0, -1.0])), [1.0, 0.0, 0.0, 0.0])


@pytest.mark.parametrize("out", [(1, 1), (3, 5), (7, 7), (64, 64)])
def test_bicubic_constant_grid(out):
    np.testing.assert_allclose(bicubic_resize(np.full((4, 4), 0.7), *out), 0.7, atol=1e-12)


def test_bicubic_identity_size():
    g = Rng(5).uniform(-1, 1, (5, 6))
    np.testing.assert_allclose(bicubic_resize(g, 5, 6), g, atol=1e-9)


def test_bicubic_ramp_4_to_7():
    # align-corners maps output i to source i/2; ramp f(y, x) = 2y - x + 0.3
    ys, xs = np.mgrid[0:4, 0:4].astype(float)
    grid = 2.0 * ys - xs + 0.3
    out = bicubic_resize(grid, 7, 7)
    src = np.arange(7) / 2.0

    # edge clamping repeats the border sample, so on the first and last
    # source interval the ramp picks up slope * w(1 + t) (t = 0.5 -> -1/16)
    def clamped_ramp_1d(u):
        base = u
        if 0 < u < 1:
            base += catmull_rom(1 + u)
        elif 2 < u < 3:
            base -= catmull_rom(1 + (3 - u))
        return base

    expected = np.array([[2.0 * clamped_ramp_1d(y) - clamped_ramp_1d(x) + 0.3 for x in src] for y in src])
    np.testing.assert_allclose(out, expected, atol=1e-9)
    interior = (src >= 1) & (src <= 2) | (src == np.round(src))
    sel = np.ix_(interior, interior)
    np.testing.assert_allclose(out[sel], (2.0 * src[:, None] - src[None, :] + 0.3)[sel], atol=1e-9)


@pytest.mark.parametrize("shape, out", [((2, 2), (5, 3)), ((3, 4), (8, 8)), ((4, 4), (64, 64))])
def test_bicubic_matches_direct_sampling(shape, out):
    g = Rng(11).uniform(-1, 1, shape)
    np.testing.assert_allclose(bicubic_resize(g, *out), bicubic_direct(g, *out), atol=1e-12)


def test_bicubic_adjoint_is_transpose():
    rng = Rng(2)
    g, y = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (6, 5))
    lhs = np.sum(bicubic_resize(g, 6, 5) * y)
    rhs = np.sum(g * bicubic_resize_adjoint(y, 3, 4))
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_bicubic_rejects_small_grid():
    with pytest.raises(InvalidInputError):
        bicubic_resize(np.ones((1, 1)), 4, 4)
    with pytest.raises(InvalidInputError):
        bicubic_matrix(4, 0)


def test_bicubic_matrix_is_read_only():
    with pytest.raises(ValueError):
        bicubic_matrix(4, 8)[0, 0] = 1.0


# --- splitmix64 ----------------------------------------------------------------


def test_splitmix_seed0_reference_value():
    value, _ = rng_next(0)
    assert value == splitmix64_ref(0, 1)[0] == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5, 2**64 - 1])
def test_splitmix_block_matches_scalar_recurrence(seed):
    block, state = splitmix64_block(seed, 50)
    assert [int(v) for v in block] == splitmix64_ref(seed, 50)
    scalar = seed
    for expected in splitmix64_ref(seed, 50):
        value, scalar = rng_next(scalar)
        assert value == expected
    assert scalar == state


def test_rng_streams():
    a, b = Rng(7), Rng(7)
    assert [a.next_u64() for _ in range(5)] == [b.next_u64() for _ in range(5)]
    assert Rng(1).next_u64() != Rng(2).next_u64()
    assert splitmix64_ref(1, 1) != splitmix64_ref(2, 1)


def test_rng_block_and_scalar_draws_interleave():
    a, b = Rng(9), Rng(9)
    first = a.random(3)
    assert [b.random() for _ in range(3)] == list(first)
    assert a.next_u64() == b.next_u64()


def test_rng_uniform_range_and_integers():
    rng = Rng(4)
    u = rng.uniform(-2, 3, 1000)
    assert u.min() >= -2 and u.max() < 3
    ints = rng.integers(1, 3, 1000)
    assert set(np.unique(ints)) == {1, 2, 3}


def test_rng_permutation_is_permutation():
    p = Rng(12).permutation(20)
    assert sorted(p.tolist()) == list(range(20))


def test_rng_spawn_leaves_parent_untouched():
    a = Rng(5)
    child = a.spawn(1).next_u64()
    assert a.state == Rng(5).state
    assert Rng(5).spawn(1).next_u64() == child
    assert Rng(5).spawn(0).next_u64() != child
