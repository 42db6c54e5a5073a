"""Numba kernel: event-driven simulation of one group.

Events are processed in time order from a heap of ``(time, kind, index)``:

* SESSION: an exogenous packet by a member who is not refractory, chosen in
  proportion to activity; the next session time follows a gamma renewal
  process run on the festival-adjusted clock.
* SEND: a response packet scheduled by an earlier decision.
* RECEIPT: a share is opened.  The opener may add a friend and, unless the
  opener already decided within the last ``refractory`` seconds, decides once
  whether to send a packet within 24 hours.

All randomness comes from numba's generator, seeded per group.
"""
import math

import numba
import numpy as np

from .splitter import allocate_into

DAY = 86400.0
EV_SESSION, EV_SEND, EV_RECEIPT = 0, 1, 2

# parameter vector layout
P_BASE_RATE = 0          # session starts per member per day (times activity)
P_THETA_EXT = 1
P_THETA_INT = 2
P_DELTA_LUCK = 3
P_FEST_MULT = 4
P_BURST = 5              # baseline response probability per receipt (times activity)
P_TIE_RATE = 6
P_THETA_CC = 7
P_LUCK_INEQ = 8
P_CONVEX = 9
P_REGULARITY = 10
P_OPEN = 11
P_SENDER_OPEN = 12
P_OPEN_DELAY = 13        # seconds
P_RESP_DELAY = 14        # seconds
P_LUCK_DELAY = 15        # seconds
P_REFRACTORY = 16        # seconds
P_TIE_BASE = 17
P_HORIZON = 18           # seconds
N_PARAMS = 19


@numba.njit(cache=True)
def _grow(a, n):
    if n < a.shape[0]:
        return a
    b = np.empty((a.shape[0] * 2, a.shape[1]))
    b[: a.shape[0]] = a
    return b


@numba.njit(cache=True)
def _draw_cdf(cdf):
    u = np.random.random()
    k = 0
    while k < cdf.shape[0] - 1 and u >= cdf[k]:
        k += 1
    return k


@numba.njit(cache=True)
def _trunc_exp(mean, cap):
    u = np.random.random()
    return -mean * math.log(1.0 - u * (1.0 - math.exp(-cap / mean)))


@numba.njit(cache=True)
def _advance(t, gap, rate_day, day_boost, horizon):
    """Calendar time after ``gap`` units of operational time starting at ``t``."""
    n_days = day_boost.shape[0]
    while True:
        day = int(t // DAY)
        if day >= n_days or t >= horizon:
            return np.inf
        r = rate_day * day_boost[day] / DAY
        left = (day + 1) * DAY - t
        if r > 0 and r * left >= gap:
            return t + gap / r
        gap -= r * left
        t = (day + 1) * DAY


@numba.njit(cache=True)
def simulate_group(seed, act, cc, amount_cdf, menu, n_cdf, n_vals, day_boost, day_festival, params):
    """Simulate one group.

    Returns ``(packets, receipts, edges, n_clamped)``:

    * packets: ``[t, sender, total, n_recipients, kind]`` (kind 0 session, 1 response)
    * receipts: ``[packet_row, member, order, amount, t]``
    * edges: ``[member_a, member_b, t]`` (a initiated)

    Members are local indices ``0..m-1``.
    """
    np.random.seed(seed)
    m = act.shape[0]
    horizon = params[P_HORIZON]
    packets = np.empty((64, 5))
    receipts = np.empty((256, 5))
    edges = np.empty((16, 3))
    pending = np.empty((64, 2))  # sender, amount received that triggered it (cents)
    n_pk = 0
    n_rc = 0
    n_ed = 0
    n_pe = 0
    n_clamped = 0
    refr_until = np.full(m, -np.inf)
    rc_luck = np.zeros(256, dtype=np.bool_)
    rc_z = np.zeros(256)

    act_sum = act.sum()
    rate_day = params[P_BASE_RATE] * act_sum
    shape = params[P_REGULARITY]

    heap = [(0.0, 0, 0)]
    heap.pop()
    if rate_day > 0:
        first = np.random.random() * np.random.gamma(shape + 1.0, 1.0 / shape)
        t0 = _advance(0.0, first, rate_day, day_boost, horizon)
        if t0 < horizon:
            heap.append((t0, EV_SESSION, 0))

    shares = np.empty(n_vals.max() if n_vals.shape[0] else 1, dtype=np.int64)
    uni = np.empty(max(shares.shape[0] - 1, 1))

    while len(heap) > 0:
        ev = heapq_pop(heap)
        t = ev[0]
        kind = ev[1]
        idx = ev[2]
        if t >= horizon:
            continue
        if kind == EV_RECEIPT:
            pk = int(receipts[idx, 0])
            member = int(receipts[idx, 1])
            sender = int(packets[pk, 1])
            if member == sender:
                continue
            amount = receipts[idx, 3]
            t_cny = amount / 100.0
            # edge formation
            p_tie = params[P_TIE_BASE] + params[P_TIE_RATE] * t_cny
            if m > 1 and np.random.random() < p_tie:
                other = np.random.randint(0, m - 1)
                if other >= member:
                    other += 1
                n_ed_new = n_ed + 1
                edges = _grow(edges, n_ed_new)
                edges[n_ed, 0] = member
                edges[n_ed, 1] = other
                edges[n_ed, 2] = t + np.random.random() * 7.0 * DAY
                n_ed = n_ed_new
            if t < refr_until[member]:
                continue
            refr_until[member] = t + params[P_REFRACTORY]
            day = int(packets[pk, 0] // DAY)
            fest = day_festival[day] if day < day_festival.shape[0] else False
            theta = params[P_THETA_EXT] * (params[P_FEST_MULT] if fest else 1.0) + params[P_THETA_CC] * cc[member]
            luck = 0.0
            if rc_luck[idx]:
                luck = params[P_DELTA_LUCK] * (1.0 - params[P_LUCK_INEQ] * rc_z[idx])
            share = packets[pk, 2] / packets[pk, 3] / 100.0
            base = params[P_BURST] * act[member] + params[P_CONVEX] * share * share
            p = base + theta * t_cny + luck
            if p < 0.0 or p > 1.0:
                n_clamped += 1
                p = min(max(p, 0.0), 1.0)
            if np.random.random() < p:
                if luck > 0 and np.random.random() * p < luck:
                    delay = _trunc_exp(params[P_LUCK_DELAY], DAY)
                else:
                    delay = _trunc_exp(params[P_RESP_DELAY], DAY)
                pending = _grow(pending, n_pe + 1)
                pending[n_pe, 0] = member
                pending[n_pe, 1] = amount
                heapq_push(heap, (t + delay, EV_SEND, n_pe))
                n_pe += 1
            continue

        # a packet is sent at time t
        if kind == EV_SESSION:
            # next session on the renewal clock
            gap = np.random.gamma(shape, 1.0 / shape)
            t_next = _advance(t, gap, rate_day, day_boost, horizon)
            if t_next < horizon:
                heapq_push(heap, (t_next, EV_SESSION, 0))
            tot = 0.0
            for j in range(m):
                if t >= refr_until[j]:
                    tot += act[j]
            if tot <= 0:
                continue
            u = np.random.random() * tot
            sender = -1
            acc = 0.0
            for j in range(m):
                if t >= refr_until[j]:
                    acc += act[j]
                    sender = j
                    if u < acc:
                        break
            refr_until[sender] = t + params[P_REFRACTORY]
            extra = 0
            pkind = 0
        else:
            sender = int(pending[idx, 0])
            extra = int(math.floor(params[P_THETA_INT] * pending[idx, 1] + 0.5))
            pkind = 1

        k = _draw_cdf(amount_cdf[sender])
        n = int(n_vals[_draw_cdf(n_cdf)])
        if n > m:
            n = m
        total = int(menu[k]) + extra
        if total < n:
            total = n
        if total > 20000:
            total = 20000

        # openers in order of opening time
        delays = np.empty(m)
        who = np.empty(m, dtype=np.int64)
        c = 0
        for j in range(m):
            po = params[P_SENDER_OPEN] if j == sender else params[P_OPEN]
            if np.random.random() < po:
                d = -params[P_OPEN_DELAY] * math.log(1.0 - np.random.random())
                if d < DAY and t + d < horizon:
                    delays[c] = d
                    who[c] = j
                    c += 1
        for o in range(n - 1):
            uni[o] = np.random.random()
        allocate_into(total, n, uni, shares)
        order = np.argsort(delays[:c])
        taken = min(c, n)

        packets = _grow(packets, n_pk + 1)
        packets[n_pk, 0] = t
        packets[n_pk, 1] = sender
        packets[n_pk, 2] = total
        packets[n_pk, 3] = n
        packets[n_pk, 4] = pkind

        # luckiest among the shares actually taken (earliest order wins ties)
        best = -1
        second = 0
        for o in range(taken):
            if best < 0 or shares[o] > shares[best]:
                best = o
        for o in range(taken):
            if o != best and shares[o] > second:
                second = shares[o]
        z = second / shares[best] if taken >= 2 else 0.0

        need = n_rc + taken
        if need >= receipts.shape[0]:
            cap = receipts.shape[0]
            while need >= cap:
                cap *= 2
            r2 = np.empty((cap, 5))
            r2[:n_rc] = receipts[:n_rc]
            receipts = r2
            l2 = np.zeros(cap, dtype=np.bool_)
            l2[:n_rc] = rc_luck[:n_rc]
            rc_luck = l2
            z2 = np.zeros(cap)
            z2[:n_rc] = rc_z[:n_rc]
            rc_z = z2
        for o in range(taken):
            j = order[o]
            receipts[n_rc, 0] = n_pk
            receipts[n_rc, 1] = who[j]
            receipts[n_rc, 2] = o + 1
            receipts[n_rc, 3] = shares[o]
            receipts[n_rc, 4] = t + delays[j]
            rc_luck[n_rc] = taken >= 2 and o == best
            rc_z[n_rc] = z
            heapq_push(heap, (t + delays[j], EV_RECEIPT, n_rc))
            n_rc += 1
        n_pk += 1

    return packets[:n_pk].copy(), receipts[:n_rc].copy(), edges[:n_ed].copy(), n_clamped


@numba.njit(cache=True)
def heapq_push(heap, item):
    heap.append(item)
    pos = len(heap) - 1
    while pos > 0:
        parent = (pos - 1) >> 1
        if item < heap[parent]:
            heap[pos] = heap[parent]
            pos = parent
        else:
            break
    heap[pos] = item


@numba.njit(cache=True)
def heapq_pop(heap):
    last = heap.pop()
    if len(heap) == 0:
        return last
    top = heap[0]
    n = len(heap)
    pos = 0
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        right = child + 1
        if right < n and heap[right] < heap[child]:
            child = right
        if heap[child] < last:
            heap[pos] = heap[child]
            pos = child
        else:
            break
    heap[pos] = last
    return top
