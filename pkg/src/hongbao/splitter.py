"""Random red-packet amount allocation and its moments.

A packet of ``total_amount`` cents is split among ``n_recipients`` openers in
order of opening.  While ``m > 1`` recipients remain with ``R`` cents left, the
next opener draws uniformly from ``(0, 2R/m]``; the last opener takes whatever
is left.  Every draw has mean ``a/n`` but the variance grows with the order.

Two arithmetic modes share one code path:

* rounded (the platform behaviour): each draw is rounded half-up to the cent and
  clamped to ``[1, R - (m - 1)]`` so every later opener can still get a cent;
* continuous: no rounding, no clamp.  The analytic moments refer to this mode.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numba
import numpy as np

from ._rng import substream
from .errors import InvalidSpecError

MAX_PACKET_CENTS = 20_000
SHARD_SIZE = 1 << 16


@dataclass(frozen=True)
class PacketSpec:
    """Total amount (integer cents) and number of shares of one packet."""

    total_amount: int
    n_recipients: int

    def __post_init__(self):
        a, n = self.total_amount, self.n_recipients
        if int(a) != a or int(n) != n:
            raise InvalidSpecError(f"amount and recipient count must be integers, got {a!r}, {n!r}")
        if n < 1:
            raise InvalidSpecError(f"n_recipients must be >= 1, got {n}")
        if a < n:
            raise InvalidSpecError(
                f"insufficient amount: {a} cents cannot give {n} recipients one cent each")
        if a > MAX_PACKET_CENTS:
            raise InvalidSpecError(f"total_amount {a} exceeds the {MAX_PACKET_CENTS}-cent cap")


@dataclass(frozen=True)
class ShareDraw:
    order: int
    amount: int


class VarianceEstimate(NamedTuple):
    variance: float
    se: float
    reps: int


@numba.njit(cache=True)
def allocate_into(total, n, u, out):
    """Fill ``out[:n]`` with one rounded allocation using uniforms ``u[:n-1]``.

    Scalar kernel shared with the event simulator; must stay arithmetically
    identical to :func:`_allocate_batch`.
    """
    remaining = total
    for o in range(n - 1):
        m = n - o
        x = (1.0 - u[o]) * (2.0 * remaining / m)
        v = np.int64(np.floor(x + 0.5))
        hi = remaining - (m - 1)
        if v < 1:
            v = 1
        elif v > hi:
            v = hi
        out[o] = v
        remaining -= v
    out[n - 1] = remaining


def _allocate_batch(total, n: int, u: np.ndarray, rounded: bool) -> np.ndarray:
    """Vectorised allocation: ``u`` has shape ``(reps, n-1)``, result ``(reps, n)``."""
    reps = u.shape[0]
    if rounded:
        out = np.empty((reps, n), dtype=np.int64)
        remaining = np.full(reps, int(total), dtype=np.int64)
    else:
        out = np.empty((reps, n), dtype=np.float64)
        remaining = np.full(reps, float(total))
    for o in range(n - 1):
        m = n - o
        x = (1.0 - u[:, o]) * (2.0 * remaining / m)
        if rounded:
            v = np.floor(x + 0.5).astype(np.int64)
            np.clip(v, 1, remaining - (m - 1), out=v)
        else:
            v = x
        out[:, o] = v
        remaining = remaining - v
    out[:, n - 1] = remaining
    return out


def split_random(spec: PacketSpec, rng: np.random.Generator, rounded: bool = True) -> list[ShareDraw]:
    """Draw one full allocation, in order of opening.

    ``rounded=False`` returns the continuous algorithm (float amounts).
    """
    u = rng.random((1, spec.n_recipients - 1))
    amounts = _allocate_batch(spec.total_amount, spec.n_recipients, u, rounded)[0]
    cast = int if rounded else float
    return [ShareDraw(o + 1, cast(v)) for o, v in enumerate(amounts)]


def sample_allocations(spec: PacketSpec, reps: int, rng, rounded: bool = True) -> np.ndarray:
    """``reps`` independent allocations as a ``(reps, n)`` array.

    ``rng`` may be a Generator (used directly) or an int seed; with a seed the
    draws are produced in fixed shards of ``SHARD_SIZE`` allocations, each from
    its own substream keyed by (amount, n, shard), so any split of the shards
    across workers reproduces the same sample.
    """
    n = spec.n_recipients
    if isinstance(rng, np.random.Generator):
        return _allocate_batch(spec.total_amount, n, rng.random((reps, n - 1)), rounded)
    seed = int(rng)
    parts = []
    for shard, start in enumerate(range(0, reps, SHARD_SIZE)):
        size = min(SHARD_SIZE, reps - start)
        g = substream(seed, "split", spec.total_amount, n, shard)
        parts.append(_allocate_batch(spec.total_amount, n, g.random((size, n - 1)), rounded))
    if not parts:
        return np.empty((0, n), dtype=np.int64 if rounded else np.float64)
    return np.concatenate(parts)


def _check_order(spec: PacketSpec, order: int):
    if not 1 <= order <= spec.n_recipients:
        raise InvalidSpecError(f"order must lie in [1, {spec.n_recipients}], got {order}")


def sample_share_distribution(spec: PacketSpec, order: int, reps: int, rng,
                              rounded: bool = True) -> np.ndarray:
    """``reps`` iid draws of the amount received at position ``order``."""
    _check_order(spec, order)
    return sample_allocations(spec, reps, rng, rounded)[:, order - 1]


def expected_share(spec: PacketSpec) -> Fraction:
    return Fraction(spec.total_amount, spec.n_recipients)


def share_variance_mc(spec: PacketSpec, order: int, reps: int, rng) -> VarianceEstimate:
    """Monte Carlo variance of the ``order``-th share under the continuous algorithm.

    The standard error uses the large-sample variance of the sample variance,
    ``(mu4 - s^4) / reps``.
    """
    _check_order(spec, order)
    if reps < 10_000:
        raise ValueError("share_variance_mc needs at least 10,000 replications")
    x = sample_share_distribution(spec, order, reps, rng, rounded=False)
    d = x - x.mean()
    s2 = float(d @ d) / (reps - 1)
    mu4 = float(np.mean(d ** 4))
    se = float(np.sqrt(max(mu4 - s2 * s2, 0.0) / reps))
    return VarianceEstimate(s2, se, reps)


def share_variance_exact(spec: PacketSpec, order: int) -> Fraction:
    """Exact variance of the ``order``-th share (continuous algorithm).

    Law of total variance on the remaining amount ``R``: with ``m`` openers
    left, ``Var(V) = a^2/(3n^2) + 4 Var(R) / (3 m^2)``, and
    ``E[R'^2] = E[R^2] (1 - 2/m + 4/(3 m^2))`` after each draw.  The last share
    equals the final remainder.
    """
    _check_order(spec, order)
    a, n = Fraction(spec.total_amount), spec.n_recipients
    if n == 1:
        return Fraction(0)
    second = a * a  # E[R^2] before the current draw
    for o in range(1, order):
        m = n - o + 1
        second *= 1 - Fraction(2, m) + Fraction(4, 3 * m * m)
    m = n - order + 1
    var_r = second - (a * m / n) ** 2
    if order == n:
        return var_r
    return a * a / (3 * n * n) + Fraction(4, 3) * var_r / (m * m)


def share_variance_second_draw(spec: PacketSpec) -> Fraction:
    """Closed form ``a^2/(3n^2) + 4a^2/(9 (n-1)^2 n^2)`` for the second share (n > 2)."""
    a, n = Fraction(spec.total_amount), spec.n_recipients
    return a * a / (3 * n * n) + 4 * a * a / (9 * (n - 1) ** 2 * n * n)


def share_variance_product_rule(spec: PacketSpec, order: int) -> Fraction:
    """Variance from the multiplicative recursion ``Var(V_{o+1}) = (1 + 1/(3(n-o)^2)) Var(V_o)``.

    Kept as a competing closed form; the Monte Carlo check in
    :func:`compare_variance_formulas` shows which one the algorithm obeys.
    """
    _check_order(spec, order)
    a, n = Fraction(spec.total_amount), spec.n_recipients
    if n == 1:
        return Fraction(0)
    last = min(order, n - 1)
    v = a * a / (3 * n * n)
    for k in range(1, last):
        v *= 1 + Fraction(1, 3 * (n - k) ** 2)
    return v


@dataclass
class OrderMoments:
    order: int
    mean_mc: float
    mean_se: float
    mean_expected: float
    var_mc: float
    var_se: float
    var_exact: float
    var_product_rule: float

    @property
    def mean_z(self) -> float:
        return 0.0 if self.mean_se == 0 else (self.mean_mc - self.mean_expected) / self.mean_se

    @property
    def var_z_exact(self) -> float:
        return 0.0 if self.var_se == 0 else (self.var_mc - self.var_exact) / self.var_se

    @property
    def var_z_product(self) -> float:
        return 0.0 if self.var_se == 0 else (self.var_mc - self.var_product_rule) / self.var_se


def order_moments(spec: PacketSpec, reps: int, seed: int, rounded_means: bool = True) -> list[OrderMoments]:
    """Monte Carlo mean and variance of every order, next to the analytic values.

    Means are taken from the cent-rounded sampler, variances from the
    continuous one (the formulas describe the continuous algorithm).
    """
    n = spec.n_recipients
    rounded = sample_allocations(spec, reps, seed, rounded=rounded_means).astype(np.float64)
    cont = sample_allocations(spec, reps, seed + 1, rounded=False)
    out = []
    for o in range(1, n + 1):
        x = rounded[:, o - 1]
        y = cont[:, o - 1]
        d = y - y.mean()
        s2 = float(d @ d) / max(reps - 1, 1)
        mu4 = float(np.mean(d ** 4))
        out.append(OrderMoments(
            order=o,
            mean_mc=float(x.mean()),
            mean_se=float(x.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0,
            mean_expected=float(expected_share(spec)),
            var_mc=s2,
            var_se=float(np.sqrt(max(mu4 - s2 * s2, 0.0) / reps)),
            var_exact=float(share_variance_exact(spec, o)),
            var_product_rule=float(share_variance_product_rule(spec, o)),
        ))
    return out


def compare_variance_formulas(moments: list[OrderMoments], z: float = 3.0) -> dict:
    """Which closed form the simulated variances agree with (within ``z`` SEs).

    Only orders where the two formulas differ by more than ``2 z`` standard
    errors are informative; the verdict is ``"exact"``, ``"product_rule"``,
    ``"both"``, ``"neither"`` or ``"undetermined"`` (no informative order).
    """
    informative = [m for m in moments
                   if m.var_se > 0 and abs(m.var_exact - m.var_product_rule) > 2 * z * m.var_se]
    if not informative:
        return {"verdict": "undetermined", "orders": []}
    ok_exact = all(abs(m.var_z_exact) <= z for m in informative)
    ok_prod = all(abs(m.var_z_product) <= z for m in informative)
    verdict = {(True, True): "both", (True, False): "exact",
               (False, True): "product_rule", (False, False): "neither"}[(ok_exact, ok_prod)]
    return {"verdict": verdict, "orders": [m.order for m in informative]}
