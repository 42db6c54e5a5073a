"""Agent-based red-packet world with known contagion parameters.

Each group runs its own event loop (see ``_simcore``).  Exogenous sessions
arrive on a gamma renewal clock whose rate scales with the members' activity
(a power of wealth, so wealthy groups send more and larger packets) and rises
on festival days.  Every opened share triggers at most one sending decision
per member per ``refractory_hours``, with probability

    burst_rate * activity
    + (theta_ext * festival factor + theta_ext_clustering * clustering) * T
    + delta_luck * luckiest * (1 - luck_inequity * Z)
    + amount_convexity * (A / N)^2

where T is the amount received in CNY, Z the ratio of the second-largest to
the largest share and A / N the expected share in CNY.  Because a recipient
decides once and the sends land within 24 hours, the slope of the 24-hour
sending indicator on T is exactly ``theta_ext`` (``theta_ext`` times the
multiplier on festival days).

Homophily in wealth (population) plus activity-driven rates and session
bursts confound naive comparisons across packets; within a packet stratum the
amount is still randomized by the splitter.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import _simcore as core
from ._rng import substream_seed32
from .errors import InvalidConfigError
from .population import Population
from .splitter import MAX_PACKET_CENTS

DAY_S = 86400.0
EVENT_COLUMNS = ["event_type", "timestamp_s", "group_id", "packet_id", "user_id", "total_amount_cents",
                 "n_recipients", "order", "amount_cents", "counterparty_id"]

DEFAULT_MENU = (100, 200, 500, 600, 666, 800, 888, 1000, 1600, 2000, 5000)
DEFAULT_MENU_WEIGHTS = (0.14, 0.16, 0.16, 0.06, 0.06, 0.08, 0.08, 0.12, 0.04, 0.07, 0.03)
DEFAULT_N_MENU = (1, 2, 3, 4, 5, 6, 8, 10)
DEFAULT_N_WEIGHTS = (0.04, 0.08, 0.16, 0.14, 0.22, 0.12, 0.12, 0.12)


@dataclass
class BehaviorParams:
    """Ground-truth behaviour of the simulated world.

    Rates are per member per day; probabilities are per decision; amounts in
    cents unless noted.  The first eight fields are the headline parameters,
    the rest shape the world.
    """

    baseline_send_rate: float = 0.035
    theta_ext: float = 0.003          # probability per CNY received
    theta_int: float = 0.0            # CNY sent per CNY received, given sending
    delta_luck: float = 0.0
    festival_multiplier: float = 1.0
    burst_rate: float = 0.03
    wealth_elasticity: float = 1.0
    tie_formation_rate: float = 0.0   # new-edge probability per CNY received

    theta_ext_clustering: float = 0.0  # change of theta_ext per unit clustering coefficient
    luck_inequity: float = 0.0        # luck bump scaled by (1 - luck_inequity * Z)
    amount_convexity: float = 0.0     # probability per CNY^2 of (A / N)^2
    festival_rate_boost: float = 2.0  # extra session rate on festival days, times group propensity
    session_regularity: float = 16.0  # gamma shape of gaps between sessions
    open_prob: float = 0.85
    sender_open_prob: float = 0.3
    open_delay_minutes: float = 20.0
    response_delay_minutes: float = 120.0
    luck_delay_minutes: float = 3.0
    refractory_hours: float = 24.0
    baseline_tie_prob: float = 0.002
    festival_days: tuple = (10, 11, 12, 40)
    amount_menu: tuple = DEFAULT_MENU
    amount_menu_weights: tuple = DEFAULT_MENU_WEIGHTS
    n_menu: tuple = DEFAULT_N_MENU
    n_menu_weights: tuple = DEFAULT_N_WEIGHTS

    def validate(self):
        for name in ("baseline_send_rate", "burst_rate", "tie_formation_rate", "festival_multiplier",
                     "festival_rate_boost", "baseline_tie_prob"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidConfigError(f"{name} must be finite and >= 0, got {v}")
        for name in ("open_prob", "sender_open_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfigError(f"{name} must lie in [0, 1]")
        for name in ("open_delay_minutes", "response_delay_minutes", "luck_delay_minutes",
                     "refractory_hours", "session_regularity"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive")
        if len(self.amount_menu) != len(self.amount_menu_weights) or not self.amount_menu:
            raise InvalidConfigError("amount_menu and amount_menu_weights must match")
        if len(self.n_menu) != len(self.n_menu_weights) or not self.n_menu:
            raise InvalidConfigError("n_menu and n_menu_weights must match")
        if min(self.amount_menu) < 1 or max(self.amount_menu) > MAX_PACKET_CENTS:
            raise InvalidConfigError(f"menu amounts must lie in [1, {MAX_PACKET_CENTS}] cents")
        if min(self.n_menu) < 1:
            raise InvalidConfigError("recipient counts must be >= 1")
        if min(self.amount_menu_weights) < 0 or min(self.n_menu_weights) < 0 \
                or sum(self.amount_menu_weights) <= 0 or sum(self.n_menu_weights) <= 0:
            raise InvalidConfigError("menu weights must be non-negative with a positive sum")
        if any(int(d) != d or d < 0 for d in self.festival_days):
            raise InvalidConfigError("festival_days must be non-negative integers")

    def max_probability(self, max_activity: float) -> float:
        """Upper bound of the response probability before clamping."""
        t_max = (max(self.amount_menu) + max(self.theta_int, 0) * MAX_PACKET_CENTS) / 100.0
        t_max = min(t_max, MAX_PACKET_CENTS / 100.0)
        theta = max(self.theta_ext * max(self.festival_multiplier, 1.0), 0.0) + max(self.theta_ext_clustering, 0.0)
        share = max(self.amount_menu) / 100.0
        return (self.burst_rate * max_activity + theta * t_max + max(self.delta_luck, 0.0)
                + max(self.amount_convexity, 0.0) * share * share)


@dataclass
class EventLog:
    """Send, receive and edge events of a simulated world.

    ``packets``: packet_id, group_id, sender_id, total_amount, n_recipients, timestamp, kind
    (kind 0 = exogenous session start, 1 = response; not part of events.csv).
    ``receipts``: packet_id, recipient_id, order, amount, timestamp.
    ``edges``: group_id, user_a, user_b, timestamp (user_a initiated).
    """

    packets: pd.DataFrame
    receipts: pd.DataFrame
    edges: pd.DataFrame
    festival_days: tuple = ()
    horizon_s: float = 0.0
    n_clamped: int = 0

    @property
    def n_packets(self) -> int:
        return len(self.packets)

    def residue(self) -> pd.Series:
        """Unopened cents per packet (total minus amounts received)."""
        got = self.receipts.groupby("packet_id")["amount"].sum()
        p = self.packets.set_index("packet_id")
        return (p["total_amount"] - got.reindex(p.index, fill_value=0)).astype(np.int64)

    def is_festival(self, timestamps) -> np.ndarray:
        day = np.floor(np.asarray(timestamps, dtype=np.float64) / DAY_S).astype(np.int64)
        return np.isin(day, np.asarray(self.festival_days, dtype=np.int64))

    def to_frame(self) -> pd.DataFrame:
        """One row per event in events.csv layout.

        Besides PacketSent, ShareReceived and EdgeAdded, the frame carries
        PacketExpired (unopened residue in ``amount_cents``, stamped 24h after
        sending or at the horizon), one FestivalDay row per festival day and a
        closing Horizon row.
        """
        p, r, e = self.packets, self.receipts, self.edges
        gid_of = p.set_index("packet_id")["group_id"]
        sender_of = p.set_index("packet_id")["sender_id"]
        parts = []
        parts.append(pd.DataFrame({
            "event_type": "PacketSent", "timestamp_s": p["timestamp"], "group_id": p["group_id"],
            "packet_id": p["packet_id"], "user_id": p["sender_id"], "total_amount_cents": p["total_amount"],
            "n_recipients": p["n_recipients"]}))
        parts.append(pd.DataFrame({
            "event_type": "ShareReceived", "timestamp_s": r["timestamp"],
            "group_id": r["packet_id"].map(gid_of).to_numpy(), "packet_id": r["packet_id"],
            "user_id": r["recipient_id"], "order": r["order"], "amount_cents": r["amount"],
            "counterparty_id": r["packet_id"].map(sender_of).to_numpy()}))
        res = self.residue()
        left = res[res > 0]
        if len(left):
            pl = p.set_index("packet_id").loc[left.index]
            parts.append(pd.DataFrame({
                "event_type": "PacketExpired",
                "timestamp_s": np.minimum(pl["timestamp"].to_numpy() + DAY_S, self.horizon_s),
                "group_id": pl["group_id"].to_numpy(), "packet_id": left.index.to_numpy(),
                "user_id": pl["sender_id"].to_numpy(), "amount_cents": left.to_numpy()}))
        parts.append(pd.DataFrame({
            "event_type": "EdgeAdded", "timestamp_s": e["timestamp"], "group_id": e["group_id"],
            "user_id": e["user_a"], "counterparty_id": e["user_b"]}))
        parts.append(pd.DataFrame({"event_type": "FestivalDay",
                                   "timestamp_s": [d * DAY_S for d in self.festival_days]}))
        parts.append(pd.DataFrame({"event_type": ["Horizon"], "timestamp_s": [self.horizon_s]}))
        parts = [x for x in parts if len(x)]
        df = pd.concat(parts, ignore_index=True).reindex(columns=EVENT_COLUMNS)
        rank = df["event_type"].map({"FestivalDay": 0, "PacketSent": 1, "ShareReceived": 2,
                                     "EdgeAdded": 3, "PacketExpired": 4, "Horizon": 5})
        df = df.assign(_rank=rank).sort_values(
            ["timestamp_s", "_rank", "group_id", "packet_id", "order", "user_id", "counterparty_id"],
            kind="stable", na_position="first").drop(columns="_rank").reset_index(drop=True)
        for c in EVENT_COLUMNS[2:]:
            df[c] = df[c].astype("Int64")
        return df

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "EventLog":
        et = df["event_type"]
        unknown = set(et.unique()) - {"PacketSent", "ShareReceived", "EdgeAdded", "PacketExpired",
                                      "FestivalDay", "Horizon"}
        if unknown:
            raise ValueError(f"unknown event types: {sorted(unknown)}")
        s = df[et == "PacketSent"]
        packets = pd.DataFrame({
            "packet_id": s["packet_id"].astype(np.int64), "group_id": s["group_id"].astype(np.int64),
            "sender_id": s["user_id"].astype(np.int64), "total_amount": s["total_amount_cents"].astype(np.int64),
            "n_recipients": s["n_recipients"].astype(np.int64), "timestamp": s["timestamp_s"].astype(np.float64),
            "kind": -1})
        packets = packets.sort_values("packet_id", kind="stable").reset_index(drop=True)
        r = df[et == "ShareReceived"]
        receipts = pd.DataFrame({
            "packet_id": r["packet_id"].astype(np.int64), "recipient_id": r["user_id"].astype(np.int64),
            "order": r["order"].astype(np.int64), "amount": r["amount_cents"].astype(np.int64),
            "timestamp": r["timestamp_s"].astype(np.float64)})
        receipts = receipts.sort_values(["packet_id", "order"], kind="stable").reset_index(drop=True)
        e = df[et == "EdgeAdded"]
        edges = pd.DataFrame({
            "group_id": e["group_id"].astype(np.int64), "user_a": e["user_id"].astype(np.int64),
            "user_b": e["counterparty_id"].astype(np.int64), "timestamp": e["timestamp_s"].astype(np.float64)})
        edges = edges.sort_values(["group_id", "timestamp"], kind="stable").reset_index(drop=True)
        fest = tuple(int(round(t / DAY_S)) for t in df.loc[et == "FestivalDay", "timestamp_s"])
        hz = df.loc[et == "Horizon", "timestamp_s"]
        horizon = float(hz.iloc[0]) if len(hz) else float(df["timestamp_s"].max() if len(df) else 0.0)
        log = cls(packets, receipts, edges, fest, horizon)
        check_log(log)
        return log

    @classmethod
    def from_csv(cls, path) -> "EventLog":
        return cls.from_frame(pd.read_csv(path, float_precision="round_trip"))


def check_log(log: EventLog) -> None:
    """Validate the log invariants; raises ValueError on the first violation."""
    p, r = log.packets, log.receipts
    if p["packet_id"].duplicated().any():
        raise ValueError("duplicate packet ids")
    if len(r) == 0:
        return
    pi = p.set_index("packet_id")
    if not r["packet_id"].isin(pi.index).all():
        raise ValueError("receipt for an unknown packet")
    sent = r["packet_id"].map(pi["timestamp"]).to_numpy()
    lag = r["timestamp"].to_numpy() - sent
    if np.any(lag <= 0) or np.any(lag >= DAY_S):
        raise ValueError("receipt outside (send, send + 24h)")
    k = r.groupby("packet_id")["order"].agg(["min", "max", "size"])
    if (k["min"] != 1).any() or (k["max"] != k["size"]).any():
        raise ValueError("receipt orders are not 1..k")
    if (k["size"] > pi.loc[k.index, "n_recipients"]).any():
        raise ValueError("more receipts than recipients")
    if (log.residue() < 0).any():
        raise ValueError("amounts received exceed the packet total")


# -- simulation --------------------------------------------------------------

def activity(pop: Population, elasticity: float) -> pd.Series:
    """Per-user activity multiplier, wealth^elasticity normalized to mean 1."""
    w = pop.members.set_index("user_id")["wealth"].astype(np.float64)
    a = np.exp(elasticity * np.log(w))
    return a / a.mean()


def _param_vector(params: BehaviorParams, horizon_s: float) -> np.ndarray:
    v = np.zeros(core.N_PARAMS)
    v[core.P_BASE_RATE] = params.baseline_send_rate
    v[core.P_THETA_EXT] = params.theta_ext
    v[core.P_THETA_INT] = params.theta_int
    v[core.P_DELTA_LUCK] = params.delta_luck
    v[core.P_FEST_MULT] = params.festival_multiplier
    v[core.P_BURST] = params.burst_rate
    v[core.P_TIE_RATE] = params.tie_formation_rate
    v[core.P_THETA_CC] = params.theta_ext_clustering
    v[core.P_LUCK_INEQ] = params.luck_inequity
    v[core.P_CONVEX] = params.amount_convexity
    v[core.P_REGULARITY] = params.session_regularity
    v[core.P_OPEN] = params.open_prob
    v[core.P_SENDER_OPEN] = params.sender_open_prob
    v[core.P_OPEN_DELAY] = params.open_delay_minutes * 60.0
    v[core.P_RESP_DELAY] = params.response_delay_minutes * 60.0
    v[core.P_LUCK_DELAY] = params.luck_delay_minutes * 60.0
    v[core.P_REFRACTORY] = params.refractory_hours * 3600.0
    v[core.P_TIE_BASE] = params.baseline_tie_prob
    v[core.P_HORIZON] = horizon_s
    return v


@dataclass
class _GroupInput:
    group_id: int
    members: np.ndarray
    act: np.ndarray
    cc: np.ndarray
    log_wealth_z: np.ndarray
    propensity: float


def _menu_cdfs(params: BehaviorParams, z: np.ndarray) -> np.ndarray:
    """Per-member cumulative menu probabilities, tilted toward larger amounts with wealth."""
    lm = np.log(np.asarray(params.amount_menu, dtype=np.float64))
    sd = lm.std()
    score = (lm - lm.mean()) / sd if sd > 0 else np.zeros_like(lm)
    w = np.asarray(params.amount_menu_weights, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(w)[None, :] + params.wealth_elasticity * z[:, None] * score[None, :]
    logits -= logits.max(axis=1, keepdims=True)
    pr = np.exp(logits)
    pr /= pr.sum(axis=1, keepdims=True)
    cdf = np.cumsum(pr, axis=1)
    cdf[:, -1] = 1.0
    return cdf


def _run_groups(payload):
    seed, params, horizon_s, groups = payload
    pv = _param_vector(params, horizon_s)
    n_days = int(math.ceil(horizon_s / DAY_S)) + 1
    fest = np.zeros(n_days, dtype=np.bool_)
    for d in params.festival_days:
        if d < n_days:
            fest[int(d)] = True
    menu = np.asarray(params.amount_menu, dtype=np.float64)
    nw = np.asarray(params.n_menu_weights, dtype=np.float64)
    n_cdf = np.cumsum(nw / nw.sum())
    n_cdf[-1] = 1.0
    n_vals = np.asarray(params.n_menu, dtype=np.int64)
    out = []
    for g in groups:
        boost = np.where(fest, 1.0 + params.festival_rate_boost * g.propensity, 1.0)
        res = core.simulate_group(substream_seed32(seed, "simulate", g.group_id), g.act, g.cc,
                                  _menu_cdfs(params, g.log_wealth_z), menu, n_cdf, n_vals, boost, fest, pv)
        out.append((g.group_id, g.members) + tuple(res))
    return out


def _group_inputs(pop: Population, params: BehaviorParams) -> list[_GroupInput]:
    act = activity(pop, params.wealth_elasticity)
    lw = np.log(pop.members.set_index("user_id")["wealth"].astype(np.float64))
    z = (lw - lw.mean()) / (lw.std() if lw.std() > 0 else 1.0)
    need_cc = params.theta_ext_clustering != 0
    cc_all = pop.member_metrics["clustering"].to_numpy() if need_cc else None
    uid = pop.memberships["user_id"].to_numpy()
    act_m = act.reindex(uid).to_numpy()
    z_m = z.reindex(uid).to_numpy()
    prop = dict(zip(pop.groups["group_id"].astype(int), pop.groups["festival_propensity"].astype(float)))
    out = []
    for gid, (s, e) in pop._group_slices.items():
        cc = cc_all[s:e] if need_cc else np.zeros(e - s)
        out.append(_GroupInput(gid, uid[s:e], act_m[s:e].copy(), np.ascontiguousarray(cc),
                               z_m[s:e].copy(), prop[gid]))
    return out


SHARD_GROUPS = 256


def simulate(pop: Population, params: BehaviorParams, horizon_days: float, seed: int,
             workers: int = 1) -> EventLog:
    """Run the world for ``horizon_days`` and return the merged event log.

    Groups are simulated independently from substreams keyed by group id, so
    the log is identical for any ``workers``.  Packet ids are assigned in
    order of (send time, group id).
    """
    params.validate()
    if not horizon_days > 0:
        raise InvalidConfigError("horizon must be positive")
    horizon_s = float(horizon_days) * DAY_S
    groups = _group_inputs(pop, params)
    shards = [(seed, params, horizon_s, groups[i:i + SHARD_GROUPS]) for i in range(0, len(groups), SHARD_GROUPS)]
    if workers > 1 and len(shards) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = [r for part in ex.map(_run_groups, shards) for r in part]
    else:
        results = [r for sh in shards for r in _run_groups(sh)]

    max_act = max((float(g.act.max()) for g in groups if len(g.act)), default=0.0)
    pk_parts, rc_parts, ed_parts = [], [], []
    n_clamped = 0
    for gid, members, pk, rc, ed, nc in results:
        n_clamped += int(nc)
        if len(pk):
            pk_parts.append(np.column_stack([np.full(len(pk), gid), members[pk[:, 1].astype(np.int64)],
                                             pk[:, [0, 2, 3, 4]]]))
        if len(rc):
            rc_parts.append(np.column_stack([np.full(len(rc), gid), rc[:, 0], members[rc[:, 1].astype(np.int64)],
                                             rc[:, 2:5]]))
        if len(ed):
            ed_parts.append(np.column_stack([np.full(len(ed), gid), members[ed[:, 0].astype(np.int64)],
                                             members[ed[:, 1].astype(np.int64)], ed[:, 2]]))

    pk = np.concatenate(pk_parts) if pk_parts else np.zeros((0, 6))
    # columns: group, sender, t, total, n, kind; local row index within the group is implicit
    local_row = np.concatenate([np.arange(len(x)) for x in pk_parts]) if pk_parts else np.zeros(0, np.int64)
    order = np.lexsort((pk[:, 0], pk[:, 2]))
    new_id = np.empty(len(pk), dtype=np.int64)
    new_id[order] = np.arange(len(pk))
    packets = pd.DataFrame({
        "packet_id": np.arange(len(pk), dtype=np.int64),
        "group_id": pk[order, 0].astype(np.int64),
        "sender_id": pk[order, 1].astype(np.int64),
        "total_amount": pk[order, 3].astype(np.int64),
        "n_recipients": pk[order, 4].astype(np.int64),
        "timestamp": pk[order, 2],
        "kind": pk[order, 5].astype(np.int64),
    })

    if rc_parts:
        rc = np.concatenate(rc_parts)
        # map (group, local packet row) to the global id
        key_g = pk[:, 0].astype(np.int64)
        span = int(local_row.max()) + 1 if len(local_row) else 1
        keys = key_g * span + local_row
        srt = np.argsort(keys)
        q = rc[:, 0].astype(np.int64) * span + rc[:, 1].astype(np.int64)
        pid = new_id[srt[np.searchsorted(keys[srt], q)]]
        receipts = pd.DataFrame({"packet_id": pid, "recipient_id": rc[:, 2].astype(np.int64),
                                 "order": rc[:, 3].astype(np.int64), "amount": rc[:, 4].astype(np.int64),
                                 "timestamp": rc[:, 5]})
        receipts = receipts.sort_values(["packet_id", "order"], kind="stable").reset_index(drop=True)
    else:
        receipts = pd.DataFrame({"packet_id": pd.Series(dtype=np.int64), "recipient_id": pd.Series(dtype=np.int64),
                                 "order": pd.Series(dtype=np.int64), "amount": pd.Series(dtype=np.int64),
                                 "timestamp": pd.Series(dtype=np.float64)})

    edges = _dedupe_edges(pop, ed_parts, horizon_s)
    fest = tuple(int(d) for d in params.festival_days if d * DAY_S < horizon_s)
    log = EventLog(packets, receipts, edges, fest, horizon_s, n_clamped)
    if n_clamped:
        warnings.warn(f"{n_clamped} response probabilities were clamped to [0, 1] "
                      f"(bound before clamping: {params.max_probability(max_act):.3f}); "
                      "the injected effects are attenuated", RuntimeWarning, stacklevel=2)
    return log


def _dedupe_edges(pop: Population, ed_parts, horizon_s: float) -> pd.DataFrame:
    """Keep the first formation of each new pair; drop pairs already linked or past the horizon."""
    cols = ["group_id", "user_a", "user_b", "timestamp"]
    if not ed_parts:
        return pd.DataFrame({c: pd.Series(dtype=np.float64 if c == "timestamp" else np.int64) for c in cols})
    ed = np.concatenate(ed_parts)
    df = pd.DataFrame({"group_id": ed[:, 0].astype(np.int64), "user_a": ed[:, 1].astype(np.int64),
                       "user_b": ed[:, 2].astype(np.int64), "timestamp": ed[:, 3]})
    df = df[df["timestamp"] < horizon_s]
    lo = np.minimum(df["user_a"], df["user_b"])
    hi = np.maximum(df["user_a"], df["user_b"])
    df = df.assign(_lo=lo, _hi=hi).sort_values(["group_id", "timestamp"], kind="stable")
    df = df.drop_duplicates(["group_id", "_lo", "_hi"], keep="first")
    old = pop.edges.rename(columns={"user_a": "_lo", "user_b": "_hi"})[["group_id", "_lo", "_hi"]]
    df = df.merge(old.assign(_old=True), on=["group_id", "_lo", "_hi"], how="left")
    df = df[df["_old"].isna()]
    return df[cols].sort_values(["group_id", "timestamp"], kind="stable").reset_index(drop=True)


def params_dict(params: BehaviorParams) -> dict:
    return asdict(params)


def params_fields() -> list[str]:
    return [f.name for f in fields(BehaviorParams)]
