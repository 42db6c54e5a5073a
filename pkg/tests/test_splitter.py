from fractions import Fraction
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hongbao.errors import InvalidSpecError
from hongbao.splitter import (MAX_PACKET_CENTS, SHARD_SIZE, PacketSpec, _allocate_batch, allocate_into,
                              compare_variance_formulas, expected_share, order_moments, sample_allocations,
                              sample_share_distribution, share_variance_exact, share_variance_mc,
                              share_variance_product_rule, share_variance_second_draw, split_random)


specs = st.integers(1, 40).flatmap(
    lambda n: st.tuples(st.integers(n, MAX_PACKET_CENTS), st.just(n)))


@pytest.mark.parametrize("a,n", [(0, 1), (2, 3), (MAX_PACKET_CENTS + 1, 2)])
def test_spec_rejects_infeasible(a, n):
    with pytest.raises(InvalidSpecError):
        PacketSpec(a, n)


def test_spec_rejects_zero_recipients():
    with pytest.raises(InvalidSpecError):
        PacketSpec(100, 0)


def test_single_recipient_takes_all():
    draws = split_random(PacketSpec(1000, 1), np.random.default_rng(0))
    assert [(d.order, d.amount) for d in draws] == [(1, 1000)]


def test_one_cent_each_when_forced():
    for seed in range(20):
        assert [d.amount for d in split_random(PacketSpec(3, 3), np.random.default_rng(seed))] == [1, 1, 1]


@settings(max_examples=200, deadline=None)
@given(specs, st.integers(0, 2**32 - 1))
def test_conservation_minimum_and_support(spec_args, seed):
    a, n = spec_args
    x = sample_allocations(PacketSpec(a, n), 50, np.random.default_rng(seed))
    assert (x.sum(axis=1) == a).all()
    assert (x >= 1).all()
    assert (x[:, 0] <= math.ceil(2 * a / n)).all()


@settings(max_examples=100, deadline=None)
@given(specs, st.integers(0, 2**32 - 1))
def test_scalar_kernel_matches_batch(spec_args, seed):
    a, n = spec_args
    u = np.random.default_rng(seed).random((5, n - 1))
    batch = _allocate_batch(a, n, u, rounded=True)
    out = np.empty(n, dtype=np.int64)
    for row in range(5):
        allocate_into(a, n, u[row], out)
        assert out.tolist() == batch[row].tolist()


def test_continuous_mode_conserves():
    x = sample_allocations(PacketSpec(1000, 5), 1000, 3, rounded=False)
    assert np.allclose(x.sum(axis=1), 1000.0)
    assert (x > 0).all()


def test_seeded_sampling_is_shard_stable():
    spec = PacketSpec(777, 4)
    big = sample_allocations(spec, SHARD_SIZE + 10, 5)
    assert np.array_equal(big, sample_allocations(spec, SHARD_SIZE + 10, 5))
    assert np.array_equal(big[:SHARD_SIZE], sample_allocations(spec, SHARD_SIZE, 5))


@pytest.mark.parametrize("a,n,expected", [(1000, 5, Fraction(200)), (500, 3, Fraction(500, 3)),
                                          (321, 1, Fraction(321))])
def test_expected_share(a, n, expected):
    assert expected_share(PacketSpec(a, n)) == expected


def test_point_mass_for_one_recipient():
    assert (sample_share_distribution(PacketSpec(250, 1), 1, 100, 0) == 250).all()


def test_first_share_mean_close_to_fair_share():
    x = sample_share_distribution(PacketSpec(1000, 5), 1, 1_000_000, 1)
    assert abs(x.mean() - 200) < 1.0


def test_invalid_order_rejected():
    with pytest.raises(InvalidSpecError):
        share_variance_exact(PacketSpec(100, 3), 4)
    with pytest.raises(InvalidSpecError):
        sample_share_distribution(PacketSpec(100, 3), 0, 10, 0)


# -- variance formulas -------------------------------------------------------------------

def _quadrature_variances(a: float, n: int, points: int) -> list:
    """Variance of each share by midpoint quadrature over the uniforms (independent oracle)."""
    u = (np.arange(points) + 0.5) / points
    grids = np.meshgrid(*([u] * (n - 1)), indexing="ij", sparse=True)
    remaining = a
    shares = []
    for o in range(n - 1):
        m = n - o
        v = (1 - grids[o]) * 2 * remaining / m
        shares.append(v)
        remaining = remaining - v
    shares.append(remaining)
    out = []
    for v in shares:
        v = np.broadcast_to(v, (points,) * (n - 1))
        out.append(float(v.var()))
    return out


@pytest.mark.parametrize("a,n,points", [(1000, 3, 2000), (600, 4, 160)])
def test_exact_variance_matches_quadrature(a, n, points):
    quad = _quadrature_variances(a, n, points)
    for o in range(1, n + 1):
        assert float(share_variance_exact(PacketSpec(a, n), o)) == pytest.approx(quad[o - 1], rel=1e-4)


def test_exact_variance_hand_case():
    # a=3, n=3: V1 ~ U(0,2), V2 = U*(3-V1), V3 = (1-U)*(3-V1); Var = 1/3, 4/9, 4/9
    spec = PacketSpec(3, 3)
    assert [share_variance_exact(spec, o) for o in (1, 2, 3)] == [Fraction(1, 3), Fraction(4, 9), Fraction(4, 9)]


@pytest.mark.parametrize("n", [3, 4, 5, 10, 17])
def test_second_share_matches_main_text_formula(n):
    spec = PacketSpec(2000, n)
    assert share_variance_exact(spec, 2) == share_variance_second_draw(spec)
    assert share_variance_exact(spec, 1) == Fraction(2000 * 2000, 3 * n * n)


@pytest.mark.parametrize("a", [2, 100, 999])
def test_two_recipients_equal_variance(a):
    spec = PacketSpec(a, 2)
    assert share_variance_exact(spec, 1) == share_variance_exact(spec, 2) == Fraction(a * a, 12)


@settings(max_examples=50, deadline=None)
@given(specs)
def test_exact_variance_monotone_and_last_two_equal(spec_args):
    a, n = spec_args
    spec = PacketSpec(a, n)
    v = [share_variance_exact(spec, o) for o in range(1, n + 1)]
    assert all(x <= y for x, y in itertools.pairwise(v[:-1]))
    if n >= 2:
        assert v[-1] == v[-2]


def test_product_rule_disagrees_with_second_share_formula():
    spec = PacketSpec(1000, 5)
    assert share_variance_product_rule(spec, 2) != share_variance_second_draw(spec)


def test_mc_variance_needs_enough_draws():
    with pytest.raises(ValueError):
        share_variance_mc(PacketSpec(1000, 5), 1, 100, 0)


@pytest.mark.parametrize("order,target", [(1, 40000 / 3), (2, 40000 / 3 + 10000 / 9)])
def test_mc_variance_matches_main_text(order, target):
    est = share_variance_mc(PacketSpec(1000, 5), order, 400_000, 2)
    assert abs(est.variance - target) < 3 * est.se


def test_simulation_supports_total_variance_recursion():
    m = order_moments(PacketSpec(1000, 5), 400_000, 4)
    verdict = compare_variance_formulas(m)
    assert verdict["verdict"] == "exact"
    assert 2 in verdict["orders"]
