import numpy as np
import pandas as pd
import pytest

from conftest import make_log
from hongbao.panel import build_panel, label_spontaneous, read_panel, spontaneous_mask, window_label, write_panel
from hongbao.population import Population

H = 3600.0
T0 = 1000.0


@pytest.fixture
def tiny_pop(tmp_path):
    """Group 0 holds users 0-4, group 1 holds users 4-6 (user 4 is in both)."""
    members = pd.DataFrame({"user_id": range(7), "age": 30, "female": [0, 1] * 3 + [0], "wealth": 1.0,
                            "fricnt": 5, "joincnt": 2,
                            "group_ids": ["0", "0", "0", "0", "0;1", "1", "1"]})
    members.to_csv(tmp_path / "members.csv", index=False)
    pd.DataFrame({"group_id": [0, 0, 1], "user_a": [0, 1, 4], "user_b": [1, 2, 5]}).to_csv(
        tmp_path / "edges.csv", index=False)
    pd.DataFrame({"group_id": [0, 1], "group_type": ["family", "work"], "festival_propensity": 0.5}).to_csv(
        tmp_path / "groups.csv", index=False)
    return Population.from_csv(tmp_path)


def hand_log():
    packets = [
        (0, 0, 0, 1000, 4, T0),                 # spontaneous, opened by 1-4
        (1, 0, 1, 500, 2, T0 + 60 + 300),        # user 1 answers 5 minutes after receiving
        (2, 1, 4, 600, 3, T0 + 240 + 120),       # user 4 sends in the other group
    ]
    receipts = [
        (0, 1, 1, 400, T0 + 60), (0, 2, 2, 300, T0 + 120), (0, 3, 3, 200, T0 + 180), (0, 4, 4, 100, T0 + 240),
        (1, 0, 1, 300, T0 + 400), (1, 2, 2, 200, T0 + 420),
        (2, 5, 1, 600, T0 + 500),
    ]
    edges = [(0, 2, 4, T0 + 2 * 86400)]
    return make_log(packets, receipts, edges, horizon_days=5.0)


def test_rows_and_strata(tiny_pop):
    df = build_panel(hand_log(), tiny_pop)
    rows = df[df["packet_id"] == 0].sort_values("O")
    assert list(zip(rows["A"], rows["N"], rows["O"])) == [(1000, 4, o) for o in (1, 2, 3, 4)]
    assert rows["T"].tolist() == [400, 300, 200, 100]
    assert rows["luckiest"].tolist() == [1, 0, 0, 0]
    assert rows["Z"].iloc[0] == pytest.approx(0.75)
    # packet 1 follows within 24h so it is not spontaneous; packet 2 is the first in group 1
    assert set(df["packet_id"]) == {0, 2}


def test_window_outcomes(tiny_pop):
    df = build_panel(hand_log(), tiny_pop).set_index(["packet_id", "user_id"])
    u1 = df.loc[(0, 1)]
    assert (u1["overall_10m"], u1["extensive_10m"], u1["intensive_10m"]) == (500, 1, 500)
    # only the 300 cents opened by the original sender count as direct
    assert u1["direct_10m"] == 300 and u1["indirect_10m"] == 200
    assert u1["kth_extensive_1"] == 1 and u1["kth_overall_1"] == 500
    assert u1["kth_extensive_2"] == 0
    u2 = df.loc[(0, 2)]
    assert (u2["overall_24h"], u2["extensive_24h"]) == (0, 0)
    assert np.isnan(u2["intensive_24h"])
    assert np.isnan(u2["other_groups_24h"])
    u4 = df.loc[(0, 4)]
    assert u4["overall_10m"] == 0
    assert u4["other_groups_10m"] == 600


def test_edge_outcomes_and_horizon(tiny_pop):
    df = build_panel(hand_log(), tiny_pop).set_index(["packet_id", "user_id"])
    u2 = df.loc[(0, 2)]
    assert u2["edges_1d"] == 0 and u2["edges_3d"] == 1
    assert np.isnan(u2["edges_7d"])
    assert df.loc[(0, 4), "edges_3d"] == 1
    assert df.loc[(0, 3), "edges_3d"] == 0


def test_covariates_before_send(tiny_pop):
    df = build_panel(hand_log(), tiny_pop).set_index(["packet_id", "user_id"])
    assert df.loc[(0, 1), "history_sendcnt"] == 0
    assert df.loc[(0, 1), "degree"] == 2
    assert df.loc[(0, 1), "clustering"] == 0.0
    assert df.loc[(0, 1), "norm_degree"] == pytest.approx(2 / 5)
    # user 5's receipt of packet 2 comes after user 4 received packet 0 in the other group
    assert df.loc[(2, 5), "history_recvcnt"] == 0
    assert df.loc[(2, 5), "group_size"] == 3


def test_sender_share_excluded(tiny_pop):
    packets = [(0, 0, 0, 900, 3, T0)]
    receipts = [(0, 0, 1, 300, T0 + 10), (0, 1, 2, 300, T0 + 20), (0, 2, 3, 300, T0 + 30)]
    df = build_panel(make_log(packets, receipts), tiny_pop)
    assert sorted(df["user_id"]) == [1, 2]
    assert (df["n_received"] == 3).all()


def test_rows_near_horizon_dropped(tiny_pop):
    packets = [(0, 0, 0, 900, 3, 4.5 * 86400)]
    receipts = [(0, 1, 1, 300, 4.5 * 86400 + 10)]
    assert len(build_panel(make_log(packets, receipts), tiny_pop)) == 0


def test_unknown_user_rejected(tiny_pop):
    log = make_log([(0, 0, 0, 900, 3, T0)], [(0, 99, 1, 300, T0 + 10)])
    with pytest.raises(KeyError):
        build_panel(log, tiny_pop)


def _times_log(times, groups=None):
    groups = groups or [0] * len(times)
    return make_log([(i, g, 0, 100, 1, t) for i, (t, g) in enumerate(zip(times, groups))], [])


def test_spontaneous_rules():
    assert label_spontaneous(_times_log([0.0])) == {0}
    assert label_spontaneous(_times_log([0.0, H])) == {0}
    assert label_spontaneous(_times_log([0.0, 25 * H, 26 * H])) == {0, 1}
    assert label_spontaneous(_times_log([0.0, H], groups=[0, 1])) == {0, 1}
    assert label_spontaneous(_times_log([0.0, 7 * H]), ) == {0}
    assert label_spontaneous(_times_log([0.0, 7 * H]), tau=6 * H) == {0, 1}
    with pytest.raises(ValueError):
        spontaneous_mask(_times_log([0.0]), tau=0)


def test_window_labels():
    assert [window_label(w) for w in (600, 3600, 86400, 90)] == ["10m", "1h", "24h", "90s"]


def test_panel_csv_round_trip(small_world, tmp_path):
    _, _, panel = small_world
    write_panel(panel, tmp_path / "panel.csv")
    back = read_panel(tmp_path / "panel.csv")
    pd.testing.assert_frame_equal(panel, back, check_dtype=False)


def test_simulated_panel_invariants(small_world):
    _, log, panel = small_world
    assert len(panel) > 500
    assert (panel["O"] <= panel["N"]).all() and (panel["T"] <= panel["A"]).all()
    assert (panel["user_id"] != panel["sender_id"]).all()
    assert (panel.groupby("packet_id")["luckiest"].sum() <= 1).all()
    ext = panel["extensive_24h"] == 1
    assert panel.loc[ext, "intensive_24h"].notna().all() and panel.loc[~ext, "intensive_24h"].isna().all()
    assert (panel["receipt_time"] + 86400 <= log.horizon_s).all()
    for a, b in (("10m", "1h"), ("1h", "3h"), ("12h", "24h")):
        assert (panel[f"overall_{a}"] <= panel[f"overall_{b}"]).all()
