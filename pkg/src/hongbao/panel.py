"""Spontaneous-packet labels and the recipient-by-packet analysis panel.

A packet is spontaneous when no packet was sent in the same group during the
preceding ``tau``.  The panel has one row per share of a spontaneous packet
opened by someone other than its sender.

Panel columns (amounts in integer cents, times in seconds):

identity and treatment
    packet_id, group_id, user_id, sender_id, packet_time, receipt_time,
    A (total amount), N (recipient count set by the sender), n_received,
    O (order of opening), T (amount received), luckiest (0/1),
    Z (second-largest over largest share; empty for single-share packets)
covariates, measured before the packet was sent
    age, female, wealth, degree, fricnt, joincnt, clustering, norm_degree,
    eigen, history_sendamt, history_sendcnt, history_recvamt,
    history_recvcnt, groupamt, groupnum, group_size, density,
    overall_clustering, group_type, festival, sender_age, sender_female
outcomes per window ``w`` (10m, 1h, 3h, 6h, 12h, 24h), after the receipt
    overall_w (cents sent to the group), extensive_w (0/1), intensive_w
    (overall_w when extensive_w is 1, else empty), direct_w (cents of those
    packets received by the original sender), indirect_w, other_groups_w
    (mean cents sent to each of the user's other groups; empty for
    single-group users)
network outcomes
    edges_1d, edges_3d, edges_7d: new within-group ties involving the user
    (empty when the window runs past the horizon)
k-th subsequent packet in the group, within 24h of the packet (k = 1, 2, 3)
    kth_overall_k, kth_extensive_k, kth_intensive_k
"""
from __future__ import annotations

import numpy as np
import pandas as pd

from .population import Population
from .simulator import DAY_S, EventLog

DEFAULT_WINDOWS = (600, 3600, 3 * 3600, 6 * 3600, 12 * 3600, 24 * 3600)
EDGE_WINDOWS_DAYS = (1, 3, 7)
KTH = (1, 2, 3)


def window_label(seconds) -> str:
    s = int(round(float(seconds)))
    if s % 3600 == 0:
        return f"{s // 3600}h"
    if s % 60 == 0:
        return f"{s // 60}m"
    return f"{s}s"


def spontaneous_mask(log: EventLog, tau: float = DAY_S) -> np.ndarray:
    """Boolean mask over ``log.packets`` rows marking spontaneous packets."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    p = log.packets
    if len(p) == 0:
        return np.zeros(0, dtype=bool)
    g = p["group_id"].to_numpy()
    t = p["timestamp"].to_numpy()
    order = np.lexsort((t, g))
    gs, ts = g[order], t[order]
    first = np.r_[True, gs[1:] != gs[:-1]]
    gap = np.r_[np.inf, np.diff(ts)]
    spont = first | (gap > tau)
    mask = np.empty(len(p), dtype=bool)
    mask[order] = spont
    return mask


def label_spontaneous(log: EventLog, tau: float = DAY_S) -> set:
    """Ids of the packets with no same-group packet in the preceding ``tau`` seconds."""
    return set(log.packets["packet_id"].to_numpy()[spontaneous_mask(log, tau)].tolist())


class _RangeIndex:
    """Sums of ``values`` over events with a given key and time in a half-open range.

    Keys are mapped to dense codes through the sorted ``universe``; events sit
    on one line at ``code * span + time`` so a range query is two binary
    searches into a cumulative sum.
    """

    def __init__(self, keys: np.ndarray, times: np.ndarray, values: np.ndarray, span: float, universe: np.ndarray):
        self.universe = universe
        self.span = span
        pos = np.searchsorted(universe, keys) * span + times
        order = np.argsort(pos, kind="stable")
        self.pos = pos[order]
        self.csum = np.r_[0.0, np.cumsum(values[order].astype(np.float64))]
        self.ccnt = np.arange(len(order) + 1, dtype=np.float64)

    def query(self, keys, t):
        """Prepare lookups for ``keys`` around reference times ``t``.

        Queries are searched in sorted order (much faster than random order)
        and the permutation is reused across windows.
        """
        base = np.searchsorted(self.universe, keys) * self.span
        perm = np.argsort(base + t, kind="stable")
        return base[perm], np.asarray(t)[perm], perm

    def _gather(self, q, a, b, count):
        arr = self.ccnt if count else self.csum
        res = np.empty(len(a))
        res[q[2]] = arr[b] - arr[a]
        return res

    def between(self, q, lo_off, hi_off, count=False):
        """Sum (or count) over ``t + lo_off < t' <= t + hi_off``."""
        base, t, _ = q
        a = np.searchsorted(self.pos, base + (t + lo_off), side="right")
        b = np.searchsorted(self.pos, base + (t + hi_off), side="right")
        return self._gather(q, a, b, count)

    def before(self, q, count=False):
        """Sum (or count) over ``t' < t``."""
        base, t, _ = q
        a = np.searchsorted(self.pos, base - 1.0, side="right")
        b = np.searchsorted(self.pos, base + t, side="left")
        return self._gather(q, a, b, count)


def _pair(a, b, mult):
    return np.asarray(a, dtype=np.int64) * mult + np.asarray(b, dtype=np.int64)


def build_panel(log: EventLog, pop: Population, windows=DEFAULT_WINDOWS, tau: float = DAY_S,
                covariates: bool = True) -> pd.DataFrame:
    """Recipient-by-spontaneous-packet rows with covariates and windowed outcomes.

    Only receipts whose longest window (24h by default) ends by the horizon are
    kept.  ``covariates=False`` skips the network and history covariates (the
    outcomes and stratum keys are unchanged).
    """
    windows = tuple(float(w) for w in windows)
    p = log.packets
    r = log.receipts
    if len(p) and not r["packet_id"].isin(p["packet_id"]).all():
        raise KeyError("receipt refers to an unknown packet")
    known_users = pop.members["user_id"].to_numpy()
    for col, frame in (("sender_id", p), ("recipient_id", r)):
        if len(frame) and not np.isin(frame[col].to_numpy(), known_users).all():
            raise KeyError(f"{col} refers to an unknown user")

    horizon = log.horizon_s
    span = horizon + 30 * DAY_S
    pk = p.set_index("packet_id")
    spont = p["packet_id"].to_numpy()[spontaneous_mask(log, tau)]

    rows = r[r["packet_id"].isin(spont)]
    pid = rows["packet_id"].to_numpy()
    sender = pk.loc[pid, "sender_id"].to_numpy()
    keep = (rows["recipient_id"].to_numpy() != sender) & (rows["timestamp"].to_numpy() + max(windows, default=0) <= horizon)
    rows = rows[keep]
    pid = rows["packet_id"].to_numpy()
    user = rows["recipient_id"].to_numpy().astype(np.int64)
    t_recv = rows["timestamp"].to_numpy()
    gid = pk.loc[pid, "group_id"].to_numpy().astype(np.int64)
    sender = pk.loc[pid, "sender_id"].to_numpy().astype(np.int64)
    t_send = pk.loc[pid, "timestamp"].to_numpy()

    # per-packet share statistics over all receipts (sender's own share included)
    rs = r.assign(_neg=-r["amount"]).sort_values(["packet_id", "_neg", "order"], kind="stable")
    rank = rs.groupby("packet_id").cumcount().to_numpy()
    best = rs[rank == 0].set_index("packet_id")
    second = rs[rank == 1].set_index("packet_id")["amount"]
    n_received = r.groupby("packet_id").size().loc[pid].to_numpy()
    top = best.loc[pid, "amount"].to_numpy().astype(np.float64)
    sec = second.reindex(pid).to_numpy().astype(np.float64)
    z = np.where(n_received >= 2, sec / top, np.nan)
    luckiest = ((n_received >= 2) & (best.loc[pid, "order"].to_numpy() == rows["order"].to_numpy())).astype(np.int64)

    out = {
        "packet_id": pid.astype(np.int64), "group_id": gid, "user_id": user, "sender_id": sender,
        "packet_time": t_send, "receipt_time": t_recv,
        "A": pk.loc[pid, "total_amount"].to_numpy().astype(np.int64),
        "N": pk.loc[pid, "n_recipients"].to_numpy().astype(np.int64),
        "n_received": n_received.astype(np.int64),
        "O": rows["order"].to_numpy().astype(np.int64),
        "T": rows["amount"].to_numpy().astype(np.int64),
        "luckiest": luckiest, "Z": z,
    }

    # sends by (group, user) and by user, receipts by (group, sender, recipient)
    max_user = int(max(known_users.max(initial=0), 0)) + 1
    p_g = p["group_id"].to_numpy().astype(np.int64)
    p_u = p["sender_id"].to_numpy().astype(np.int64)
    p_t = p["timestamp"].to_numpy()
    p_a = p["total_amount"].to_numpy()
    gu = _pair(p_g, p_u, max_user)
    q_gu = _pair(gid, user, max_user)
    uni_gu = np.unique(np.r_[gu, q_gu])
    send_gu = _RangeIndex(gu, p_t, p_a, span, uni_gu)
    uni_u = np.unique(np.r_[p_u, user])
    send_u = _RangeIndex(p_u, p_t, p_a, span, uni_u)

    r_pid = r["packet_id"].to_numpy()
    r_from = pk.loc[r_pid, "sender_id"].to_numpy().astype(np.int64)
    r_g = pk.loc[r_pid, "group_id"].to_numpy().astype(np.int64)
    r_ts = pk.loc[r_pid, "timestamp"].to_numpy()
    # key: (group, packet sender, recipient), time: the packet's send time
    mult2 = max_user * max_user
    gsr = r_g * mult2 + r_from * max_user + r["recipient_id"].to_numpy().astype(np.int64)
    q_gsr = gid * mult2 + user * max_user + sender
    uni_gsr = np.unique(np.r_[gsr, q_gsr])
    recv_from = _RangeIndex(gsr, r_ts, r["amount"].to_numpy(), span, uni_gsr)

    n_groups_of = pop.memberships.groupby("user_id").size()
    k_groups = n_groups_of.reindex(user).fillna(1).to_numpy()

    qa = send_gu.query(q_gu, t_recv)
    qb = recv_from.query(q_gsr, t_recv)
    qc = send_u.query(user, t_recv)
    for w in windows:
        lab = window_label(w)
        overall = send_gu.between(qa, 0.0, w)
        count = send_gu.between(qa, 0.0, w, count=True)
        ext = (count > 0).astype(np.int64)
        direct = recv_from.between(qb, 0.0, w)
        all_groups = send_u.between(qc, 0.0, w)
        with np.errstate(invalid="ignore", divide="ignore"):
            other = np.where(k_groups > 1, (all_groups - overall) / (k_groups - 1), np.nan)
        out[f"overall_{lab}"] = overall.astype(np.int64)
        out[f"extensive_{lab}"] = ext
        out[f"intensive_{lab}"] = np.where(ext == 1, overall, np.nan)
        out[f"direct_{lab}"] = direct.astype(np.int64)
        out[f"indirect_{lab}"] = (overall - direct).astype(np.int64)
        out[f"other_groups_{lab}"] = other

    # within-group ties involving the user
    e = log.edges
    e_g = np.r_[e["group_id"].to_numpy(), e["group_id"].to_numpy()].astype(np.int64)
    e_u = np.r_[e["user_a"].to_numpy(), e["user_b"].to_numpy()].astype(np.int64)
    e_t = np.r_[e["timestamp"].to_numpy(), e["timestamp"].to_numpy()]
    egu = _pair(e_g, e_u, max_user)
    edge_idx = _RangeIndex(egu, e_t, np.ones(len(egu)), span, np.unique(np.r_[egu, q_gu]))
    qe = edge_idx.query(q_gu, t_recv)
    for d in EDGE_WINDOWS_DAYS:
        cnt = edge_idx.between(qe, 0.0, d * DAY_S, count=True)
        out[f"edges_{d}d"] = np.where(t_recv + d * DAY_S <= horizon, cnt, np.nan)

    # k-th later packet in the group (within 24h of the packet)
    order_g = np.lexsort((p_t, p_g))
    pos_of = np.empty(len(p), dtype=np.int64)
    pos_of[order_g] = np.arange(len(p))
    row_of_pid = pd.Series(np.arange(len(p)), index=p["packet_id"].to_numpy())
    base = pos_of[row_of_pid.loc[pid].to_numpy()]
    sg, st, su, sa = p_g[order_g], p_t[order_g], p_u[order_g], p_a[order_g]
    for k in KTH:
        j = base + k
        ok = j < len(p)
        jj = np.minimum(j, len(p) - 1) if len(p) else j
        ok &= (sg[jj] == gid) & (st[jj] - t_send <= DAY_S)
        is_k = ok & (su[jj] == user)
        amt = np.where(is_k, sa[jj], 0)
        out[f"kth_overall_{k}"] = amt.astype(np.int64)
        out[f"kth_extensive_{k}"] = is_k.astype(np.int64)
        out[f"kth_intensive_{k}"] = np.where(is_k, amt, np.nan)

    df = pd.DataFrame(out)
    if covariates:
        df = _add_covariates(df, log, pop, send_u, max_user, span)
    else:
        df["festival"] = log.is_festival(df["packet_time"].to_numpy()).astype(np.int64)
    return df.reset_index(drop=True)


def _add_covariates(df, log, pop, send_u, max_user, span):
    p, r = log.packets, log.receipts
    user = df["user_id"].to_numpy()
    gid = df["group_id"].to_numpy()
    t_send = df["packet_time"].to_numpy()
    m = pop.members.set_index("user_id")
    for c in ("age", "female", "wealth", "fricnt", "joincnt"):
        df[c] = m.loc[user, c].to_numpy()
    df["sender_age"] = m.loc[df["sender_id"].to_numpy(), "age"].to_numpy()
    df["sender_female"] = m.loc[df["sender_id"].to_numpy(), "female"].to_numpy()

    mm = pop.member_metrics
    key = _pair(mm["group_id"], mm["user_id"], max_user)
    q = _pair(gid, user, max_user)
    srt = np.argsort(key)
    at = srt[np.searchsorted(key[srt], q)]
    for c in ("degree", "clustering", "norm_degree", "eigen"):
        df[c] = mm[c].to_numpy()[at]
    gm = pop.group_metrics.set_index("group_id")
    for c in ("group_size", "density", "overall_clustering"):
        df[c] = gm.loc[gid, c].to_numpy()
    df["group_type"] = pop.groups.set_index("group_id").loc[gid, "group_type"].to_numpy()
    df["festival"] = log.is_festival(t_send).astype(np.int64)

    # activity before the packet was sent, across all groups
    qs = send_u.query(user, t_send)
    df["history_sendamt"] = send_u.before(qs).astype(np.int64)
    df["history_sendcnt"] = send_u.before(qs, count=True).astype(np.int64)
    ru = r["recipient_id"].to_numpy().astype(np.int64)
    recv_u = _RangeIndex(ru, r["timestamp"].to_numpy(), r["amount"].to_numpy(), span, np.unique(np.r_[ru, user]))
    qr = recv_u.query(user, t_send)
    df["history_recvamt"] = recv_u.before(qr).astype(np.int64)
    df["history_recvcnt"] = recv_u.before(qr, count=True).astype(np.int64)
    pg = p["group_id"].to_numpy().astype(np.int64)
    grp = _RangeIndex(pg, p["timestamp"].to_numpy(), p["total_amount"].to_numpy(), span, np.unique(np.r_[pg, gid]))
    qg = grp.query(gid, t_send)
    df["groupamt"] = grp.before(qg).astype(np.int64)
    df["groupnum"] = grp.before(qg, count=True).astype(np.int64)
    return df


def write_panel(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False)


def read_panel(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", dtype={"group_type": str})
