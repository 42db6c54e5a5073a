"""Synthetic groups, members and within-group friendship graphs, plus network metrics.

Members carry a latent ``wealth`` that is correlated within groups (the
homophily confounder); friendship edges are more likely between members with
similar wealth and age.  A small share of users belongs to a second group so
that clusters of groups linked by shared users are non-trivial.

CSV layout (all columns exact, header row included):

``members.csv``
    user_id, age, female, wealth, fricnt, joincnt, group_ids
    (``group_ids`` is a ``;``-separated list of the user's groups)
``edges.csv``
    group_id, user_a, user_b   (one row per undirected edge, user_a < user_b)
``groups.csv``
    group_id, group_type, festival_propensity
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from ._rng import substream
from .errors import ConvergenceError, InvalidConfigError

MIN_GROUP_SIZE = 3
MAX_GROUP_SIZE = 500


@dataclass
class PopulationConfig:
    n_groups: int = 2000
    size_mean: float = 19.0
    size_dispersion: float = 2.0  # negative-binomial shape of (size - 3)
    edge_density: float = 0.3
    edge_homophily: float = 1.0  # logit-scale bonus per unit of attribute similarity
    homophily: float = 0.4  # target intra-group correlation of log-wealth
    wealth_sigma: float = 0.6
    age_mean: float = 35.0
    age_sd: float = 10.0
    age_homophily: float = 0.3
    female_share: float = 0.5
    overlap_rate: float = 0.03  # share of users in more than one group
    external_friends_mean: float = 60.0
    external_groups_mean: float = 1.0
    group_types: tuple = ("family", "friends", "work", "other")
    group_type_weights: tuple = (0.3, 0.35, 0.2, 0.15)

    def validate(self):
        if self.n_groups < 1:
            raise InvalidConfigError("n_groups must be >= 1")
        if not 0.0 <= self.edge_density <= 1.0:
            raise InvalidConfigError(f"edge_density must lie in [0, 1], got {self.edge_density}")
        if not 0.0 <= self.homophily < 1.0:
            raise InvalidConfigError(f"homophily must lie in [0, 1), got {self.homophily}")
        if not 0.0 <= self.age_homophily < 1.0:
            raise InvalidConfigError("age_homophily must lie in [0, 1)")
        if not MIN_GROUP_SIZE <= self.size_mean <= MAX_GROUP_SIZE:
            raise InvalidConfigError(f"size_mean must lie in [{MIN_GROUP_SIZE}, {MAX_GROUP_SIZE}]")
        if self.size_dispersion <= 0:
            raise InvalidConfigError("size_dispersion must be positive")
        if not 0.0 <= self.overlap_rate < 1.0:
            raise InvalidConfigError("overlap_rate must lie in [0, 1)")
        if not 0.0 <= self.female_share <= 1.0:
            raise InvalidConfigError("female_share must lie in [0, 1]")
        if self.wealth_sigma <= 0 or self.age_sd < 0:
            raise InvalidConfigError("wealth_sigma must be positive and age_sd non-negative")
        if len(self.group_types) != len(self.group_type_weights) or not self.group_types:
            raise InvalidConfigError("group_types and group_type_weights must have equal, non-zero length")


@dataclass
class GroupGraph:
    """Members of one group (ascending user ids) and their friendship adjacency."""

    group_id: int
    members: np.ndarray
    adjacency: np.ndarray  # bool, symmetric, zero diagonal
    group_type: str = ""
    festival_propensity: float = 0.0
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.int64)
        adj = np.asarray(self.adjacency, dtype=bool)
        m = len(self.members)
        if adj.shape != (m, m):
            raise ValueError("adjacency shape does not match member count")
        if np.any(np.diag(adj)) or np.any(adj != adj.T):
            raise ValueError("adjacency must be symmetric without self-edges")
        self.adjacency = adj
        self._index = {int(u): k for k, u in enumerate(self.members)}

    @classmethod
    def from_edges(cls, group_id, members, edges, **labels) -> "GroupGraph":
        members = np.sort(np.asarray(members, dtype=np.int64))
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-edges are not allowed")
        i = np.searchsorted(members, edges[:, 0])
        j = np.searchsorted(members, edges[:, 1])
        m = len(members)
        if np.any(i >= m) or np.any(j >= m) or np.any(members[np.minimum(i, m - 1)] != edges[:, 0]) \
                or np.any(members[np.minimum(j, m - 1)] != edges[:, 1]):
            raise KeyError(f"edge endpoint outside group {group_id}")
        adj = np.zeros((m, m), dtype=bool)
        adj[i, j] = True
        adj[j, i] = True
        return cls(group_id, members, adj, **labels)

    @property
    def size(self) -> int:
        return len(self.members)

    def local(self, user_id) -> int:
        try:
            return self._index[int(user_id)]
        except KeyError:
            raise KeyError(f"user {user_id} is not a member of group {self.group_id}") from None

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)


# -- network metrics ---------------------------------------------------------

def _closed_pairs(adj: np.ndarray) -> np.ndarray:
    """Per node, the number of ordered friend pairs (j, k) that are themselves friends."""
    a = adj.astype(np.float64)
    return np.einsum("ij,jk,ki->i", a, a, a)


def clustering_coefficient(g: GroupGraph, i) -> float:
    """Share of ordered pairs of ``i``'s in-group friends who are friends; 0 below two friends."""
    k = g.local(i)
    deg = int(g.adjacency[k].sum())
    if deg < 2:
        return 0.0
    nbrs = np.flatnonzero(g.adjacency[k])
    sub = g.adjacency[np.ix_(nbrs, nbrs)]
    return float(sub.sum()) / (deg * (deg - 1))


def clustering_coefficients(g: GroupGraph) -> np.ndarray:
    deg = g.degrees().astype(np.float64)
    denom = deg * (deg - 1)
    closed = _closed_pairs(g.adjacency)
    return np.divide(closed, denom, out=np.zeros_like(closed), where=denom > 0)


def normalized_degree(g: GroupGraph, i) -> float:
    k = g.local(i)
    return float(g.adjacency[k].sum()) / g.size


def average_normalized_degree(g: GroupGraph) -> float:
    """Network density ``sum_i deg_i / (m (m - 1))``."""
    m = g.size
    if m < 2:
        raise ValueError("average normalized degree needs at least two members")
    return float(g.adjacency.sum()) / (m * (m - 1))


def overall_clustering(g: GroupGraph) -> float:
    """Closed connected ordered triples over connected ordered triples (0 if none)."""
    deg = g.degrees().astype(np.float64)
    triples = float(np.sum(deg * (deg - 1)))
    if triples == 0:
        return 0.0
    return float(_closed_pairs(g.adjacency).sum()) / triples


def eigenvector_centrality(g: GroupGraph, tol: float = 1e-9, max_iter: int = 20_000) -> dict:
    """Principal eigenvector of the adjacency matrix, unit Euclidean norm.

    Power iteration on ``A + I`` (same eigenvectors, no oscillation on
    bipartite graphs) from the uniform vector, stopped when the relative change
    drops below ``tol``.  Members without friends get exactly 0; a graph with
    no edges gets all zeros.
    """
    vec = _eigen_vector(g.adjacency, tol, max_iter)
    return {int(u): float(v) for u, v in zip(g.members, vec)}


def _eigen_vector(adj: np.ndarray, tol: float = 1e-9, max_iter: int = 20_000) -> np.ndarray:
    m = adj.shape[0]
    if m == 0:
        raise ValueError("eigenvector centrality of an empty graph")
    a = adj.astype(np.float64)
    deg = a.sum(axis=1)
    if not deg.any():
        return np.zeros(m)
    a += np.eye(m)
    x = np.full(m, 1.0 / math.sqrt(m))
    for _ in range(max_iter):
        y = a @ x
        y /= math.sqrt(y @ y)
        d = y - x
        if math.sqrt(d @ d) < tol:
            y[deg == 0] = 0.0
            return y / math.sqrt(y @ y)
        x = y
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations")


# -- population --------------------------------------------------------------

@dataclass
class Population:
    """Members, group labels and friendship edges.

    ``memberships`` is the canonical (group_id, user_id) table sorted by group
    then user; all per-group arrays follow that order.
    """

    members: pd.DataFrame
    groups: pd.DataFrame
    memberships: pd.DataFrame
    edges: pd.DataFrame

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @cached_property
    def _group_slices(self) -> dict:
        gid = self.memberships["group_id"].to_numpy()
        starts = np.flatnonzero(np.r_[True, gid[1:] != gid[:-1]])
        ends = np.r_[starts[1:], len(gid)]
        return {int(gid[s]): (int(s), int(e)) for s, e in zip(starts, ends)}

    @cached_property
    def _edges_by_group(self) -> dict:
        out = {}
        e = self.edges
        if len(e) == 0:
            return out
        gid = e["group_id"].to_numpy()
        ab = e[["user_a", "user_b"]].to_numpy()
        cut = np.flatnonzero(np.r_[True, gid[1:] != gid[:-1], True])
        for s, t in zip(cut[:-1], cut[1:]):
            out[int(gid[s])] = ab[s:t]
        return out

    def group_members(self, group_id) -> np.ndarray:
        s, e = self._group_slices[int(group_id)]
        return self.memberships["user_id"].to_numpy()[s:e]

    @cached_property
    def _labels(self) -> dict:
        return {int(g): (str(t), float(f)) for g, t, f in
                zip(self.groups["group_id"], self.groups["group_type"], self.groups["festival_propensity"])}

    def group_graph(self, group_id) -> GroupGraph:
        gtype, fest = self._labels[int(group_id)]
        edges = self._edges_by_group.get(int(group_id), np.zeros((0, 2), dtype=np.int64))
        return GroupGraph.from_edges(int(group_id), self.group_members(group_id), edges,
                                     group_type=gtype, festival_propensity=fest)

    def graphs(self):
        for gid in self.groups["group_id"].to_numpy():
            yield self.group_graph(int(gid))

    @cached_property
    def member_metrics(self) -> pd.DataFrame:
        """Per-membership network position: degree, normalized degree, clustering, eigenvector."""
        cols = {k: [] for k in ("group_id", "user_id", "degree", "norm_degree", "clustering", "eigen")}
        for g in self.graphs():
            deg = g.degrees()
            cols["group_id"].append(np.full(g.size, g.group_id, dtype=np.int64))
            cols["user_id"].append(g.members)
            cols["degree"].append(deg.astype(np.int64))
            cols["norm_degree"].append(deg / g.size)
            cols["clustering"].append(clustering_coefficients(g))
            cols["eigen"].append(_eigen_vector(g.adjacency))
        return pd.DataFrame({k: np.concatenate(v) for k, v in cols.items()})

    @cached_property
    def group_metrics(self) -> pd.DataFrame:
        rows = []
        for g in self.graphs():
            rows.append((g.group_id, g.size, average_normalized_degree(g), overall_clustering(g)))
        return pd.DataFrame(rows, columns=["group_id", "group_size", "density", "overall_clustering"])

    # -- CSV I/O ---------------------------------------------------------

    def to_csv(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        gids = self.memberships.groupby("user_id", sort=True)["group_id"].apply(
            lambda s: ";".join(str(int(v)) for v in s))
        m = self.members.copy()
        m["group_ids"] = m["user_id"].map(gids)
        m[["user_id", "age", "female", "wealth", "fricnt", "joincnt", "group_ids"]].to_csv(
            d / "members.csv", index=False)
        self.edges[["group_id", "user_a", "user_b"]].to_csv(d / "edges.csv", index=False)
        self.groups[["group_id", "group_type", "festival_propensity"]].to_csv(d / "groups.csv", index=False)

    @classmethod
    def from_csv(cls, directory) -> "Population":
        d = Path(directory)
        m = pd.read_csv(d / "members.csv", dtype={"group_ids": str}, float_precision="round_trip")
        edges = pd.read_csv(d / "edges.csv").astype(np.int64)
        groups = pd.read_csv(d / "groups.csv", dtype={"group_type": str}, float_precision="round_trip")
        pairs = [(int(g), int(u)) for u, gs in zip(m["user_id"], m["group_ids"]) for g in str(gs).split(";")]
        ms = pd.DataFrame(pairs, columns=["group_id", "user_id"])
        members = m.drop(columns=["group_ids"])
        members["female"] = members["female"].astype(np.int64)
        return _assemble(members, groups, ms, edges)


def _assemble(members, groups, memberships, edges) -> Population:
    memberships = memberships.sort_values(["group_id", "user_id"], kind="stable").reset_index(drop=True)
    members = members.sort_values("user_id", kind="stable").reset_index(drop=True)
    groups = groups.sort_values("group_id", kind="stable").reset_index(drop=True)
    sizes = memberships.groupby("group_id").size()
    groups["group_size"] = groups["group_id"].map(sizes).astype(np.int64)
    edges = edges.sort_values(["group_id", "user_a", "user_b"], kind="stable").reset_index(drop=True)
    _check(members, groups, memberships, edges)
    return Population(members, groups, memberships, edges)


def _check(members, groups, memberships, edges):
    if members["user_id"].duplicated().any():
        raise InvalidConfigError("duplicate user ids")
    if (members["wealth"] <= 0).any():
        raise InvalidConfigError("wealth must be positive")
    if memberships.duplicated().any():
        raise InvalidConfigError("duplicate memberships")
    size = groups["group_size"]
    if size.isna().any() or (size < MIN_GROUP_SIZE).any() or (size > MAX_GROUP_SIZE).any():
        raise InvalidConfigError(f"group sizes must lie in [{MIN_GROUP_SIZE}, {MAX_GROUP_SIZE}]")
    if len(edges):
        if (edges["user_a"] >= edges["user_b"]).any():
            raise InvalidConfigError("edges must be stored with user_a < user_b and no self-edges")
        if edges.duplicated().any():
            raise InvalidConfigError("duplicate edges")
        span = int(max(memberships["user_id"].max(), edges[["user_a", "user_b"]].to_numpy().max())) + 1
        key = np.sort(memberships["group_id"].to_numpy() * span + memberships["user_id"].to_numpy())
        for col in ("user_a", "user_b"):
            q = edges["group_id"].to_numpy() * span + edges[col].to_numpy()
            pos = np.minimum(np.searchsorted(key, q), len(key) - 1)
            if np.any(key[pos] != q):
                raise InvalidConfigError("edge endpoint outside its group")


def _logit(p):
    return math.log(p / (1 - p))


def generate_population(config: PopulationConfig, seed: int) -> Population:
    """Draw a population; identical for identical ``(config, seed)``.

    Sizes, labels and cross-group memberships come from dedicated substreams;
    each group's members and edges come from a substream keyed by its id.
    """
    config.validate()
    G = config.n_groups
    rs = substream(seed, "population", "sizes")
    mu = max(config.size_mean - MIN_GROUP_SIZE, 0.0)
    r = config.size_dispersion
    extra = rs.negative_binomial(r, r / (r + mu), size=G) if mu > 0 else np.zeros(G, dtype=np.int64)
    sizes = np.minimum(MIN_GROUP_SIZE + extra, MAX_GROUP_SIZE).astype(np.int64)

    rl = substream(seed, "population", "labels")
    w = np.asarray(config.group_type_weights, dtype=float)
    types = np.asarray(config.group_types, dtype=object)[rl.choice(len(w), size=G, p=w / w.sum())]
    festival = rl.random(G)

    hw, ha = config.homophily, config.age_homophily
    user_ids, group_of, lw, age, female = [], [], [], [], []
    next_id = 0
    for gid in range(G):
        m = int(sizes[gid])
        g = substream(seed, "population", "group", gid)
        zg, zi = g.standard_normal(), g.standard_normal(m)
        ag, ai = g.standard_normal(), g.standard_normal(m)
        user_ids.append(np.arange(next_id, next_id + m))
        group_of.append(np.full(m, gid))
        lw.append(config.wealth_sigma * (math.sqrt(hw) * zg + math.sqrt(1 - hw) * zi))
        age.append(config.age_mean + config.age_sd * (math.sqrt(ha) * ag + math.sqrt(1 - ha) * ai))
        female.append(g.random(m) < config.female_share)
        next_id += m
    user_ids = np.concatenate(user_ids)
    group_of = np.concatenate(group_of)
    lw = np.concatenate(lw)
    age = np.clip(np.rint(np.concatenate(age)), 16, 80).astype(np.int64)
    female = np.concatenate(female).astype(np.int64)

    # second memberships for a random subset of users
    ro = substream(seed, "population", "overlap")
    n_users = len(user_ids)
    k = int(round(config.overlap_rate * n_users)) if G > 1 else 0
    extra_pairs = []
    if k:
        movers = np.sort(ro.choice(n_users, size=k, replace=False))
        targets = ro.integers(0, G - 1, size=k)
        room = sizes.copy()
        for u, t in zip(movers, targets):
            home = group_of[u]
            t = t + (t >= home)  # any group except the home group
            if room[t] < MAX_GROUP_SIZE:
                extra_pairs.append((int(t), int(user_ids[u])))
                room[t] += 1
    ms = pd.DataFrame({"group_id": np.r_[group_of, [p[0] for p in extra_pairs]].astype(np.int64),
                       "user_id": np.r_[user_ids, [p[1] for p in extra_pairs]].astype(np.int64)})
    ms = ms.sort_values(["group_id", "user_id"], kind="stable").reset_index(drop=True)

    # friendship edges, more likely between similar members
    base = None
    if 0 < config.edge_density < 1:
        base = _logit(config.edge_density)
    age_scale = config.age_sd if config.age_sd > 0 else 1.0
    edge_parts = []
    gids = ms["group_id"].to_numpy()
    uids = ms["user_id"].to_numpy()
    bounds = np.flatnonzero(np.r_[True, gids[1:] != gids[:-1], True])
    for s, e in zip(bounds[:-1], bounds[1:]):
        gid = int(gids[s])
        mem = uids[s:e]
        m = len(mem)
        iu, ju = np.triu_indices(m, 1)
        if config.edge_density >= 1:
            keep = np.ones(len(iu), dtype=bool)
        elif config.edge_density <= 0:
            keep = np.zeros(len(iu), dtype=bool)
        else:
            dist = (np.abs(lw[mem][iu] - lw[mem][ju]) / config.wealth_sigma
                    + np.abs(age[mem][iu] - age[mem][ju]) / age_scale)
            logits = base + config.edge_homophily * (dist.mean() - dist)
            p = 1.0 / (1.0 + np.exp(-logits))
            keep = substream(seed, "population", "edges", gid).random(len(iu)) < p
        edge_parts.append(np.column_stack([np.full(keep.sum(), gid), mem[iu[keep]], mem[ju[keep]]]))
    edges = pd.DataFrame(np.concatenate(edge_parts) if edge_parts else np.zeros((0, 3), np.int64),
                         columns=["group_id", "user_a", "user_b"]).astype(np.int64)

    # friend and group counts include contacts/groups outside the sample
    rc = substream(seed, "population", "counts")
    pairs = pd.concat([edges[["user_a", "user_b"]].rename(columns={"user_a": "u", "user_b": "v"}),
                       edges[["user_b", "user_a"]].rename(columns={"user_b": "u", "user_a": "v"})])
    in_pop_friends = pairs.drop_duplicates().groupby("u").size()
    n_groups_of = ms.groupby("user_id").size()
    members = pd.DataFrame({
        "user_id": user_ids,
        "age": age,
        "female": female,
        "wealth": np.exp(lw),
    })
    members["fricnt"] = (members["user_id"].map(in_pop_friends).fillna(0).astype(np.int64)
                         + rc.poisson(config.external_friends_mean, size=n_users))
    members["joincnt"] = (members["user_id"].map(n_groups_of).astype(np.int64)
                          + rc.poisson(config.external_groups_mean, size=n_users))
    groups = pd.DataFrame({"group_id": np.arange(G, dtype=np.int64),
                           "group_type": types.astype(str),
                           "festival_propensity": festival})
    return _assemble(members, groups, ms, edges)


def wealth_icc(pop: Population) -> float:
    """One-way ANOVA intra-class correlation of log-wealth across groups."""
    lw = np.log(pop.members.set_index("user_id")["wealth"])
    x = lw.loc[pop.memberships["user_id"]].to_numpy()
    gid = pop.memberships["group_id"].to_numpy()
    codes, inv = np.unique(gid, return_inverse=True)
    k = len(codes)
    n_i = np.bincount(inv).astype(float)
    N = n_i.sum()
    means = np.bincount(inv, weights=x) / n_i
    grand = x.mean()
    msb = np.sum(n_i * (means - grand) ** 2) / (k - 1)
    msw = np.sum((x - means[inv]) ** 2) / (N - k)
    n0 = (N - np.sum(n_i ** 2) / N) / (k - 1)
    return float((msb - msw) / (msb + (n0 - 1) * msw))
