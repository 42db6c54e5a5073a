import numpy as np
import pandas as pd
import pytest

from conftest import make_log
from hongbao.errors import InvalidConfigError
from hongbao.population import PopulationConfig, generate_population
from hongbao.simulator import DAY_S, EVENT_COLUMNS, BehaviorParams, EventLog, activity, check_log, simulate


def test_zero_rates_give_empty_log():
    pop = generate_population(PopulationConfig(n_groups=20), seed=0)
    log = simulate(pop, BehaviorParams(baseline_send_rate=0.0, burst_rate=0.0, baseline_tie_prob=0.0),
                   horizon_days=5, seed=0)
    assert log.n_packets == 0 and len(log.receipts) == 0 and len(log.edges) == 0
    check_log(log)


def test_small_world_log_invariants(small_world):
    pop, log, _ = small_world
    check_log(log)
    p, r = log.packets, log.receipts
    assert (p["timestamp"].diff().dropna() >= 0).all()
    assert p["total_amount"].between(1, 20000).all()
    assert (p["total_amount"] >= p["n_recipients"]).all()
    # full packets give away exactly the total
    got = r.groupby("packet_id").agg(n=("order", "size"), cents=("amount", "sum"))
    full = got["n"] == p.set_index("packet_id").loc[got.index, "n_recipients"]
    assert (got.loc[full, "cents"] == p.set_index("packet_id").loc[got.index[full], "total_amount"]).all()
    assert (log.residue() >= 0).all()
    # every recipient and sender belongs to the packet's group
    mem = set(zip(pop.memberships["group_id"], pop.memberships["user_id"]))
    rg = r.merge(p[["packet_id", "group_id", "sender_id"]], on="packet_id")
    assert all(k in mem for k in zip(rg["group_id"], rg["recipient_id"]))
    assert all(k in mem for k in zip(p["group_id"], p["sender_id"]))
    assert not rg.duplicated(["packet_id", "recipient_id"]).any()
    assert set(p["kind"]) <= {0, 1} and (p["kind"] == 1).any()
    assert set(log.festival_days) == {10, 11, 12}


def test_sender_sometimes_opens_own_packet(small_world):
    _, log, _ = small_world
    rg = log.receipts.merge(log.packets[["packet_id", "sender_id"]], on="packet_id")
    share = (rg["recipient_id"] == rg["sender_id"]).mean()
    assert 0.0 < share < 0.2


def test_new_edges_are_new(small_world):
    pop, log, _ = small_world
    e = log.edges
    assert len(e) > 0
    lo, hi = np.minimum(e["user_a"], e["user_b"]), np.maximum(e["user_a"], e["user_b"])
    assert not pd.DataFrame({"g": e["group_id"], "lo": lo, "hi": hi}).duplicated().any()
    old = set(zip(pop.edges["group_id"], pop.edges["user_a"], pop.edges["user_b"]))
    assert not any(k in old for k in zip(e["group_id"], lo, hi))
    assert (e["timestamp"] < log.horizon_s).all()


def test_workers_do_not_change_the_log():
    pop = generate_population(PopulationConfig(n_groups=300), seed=2)
    a = simulate(pop, BehaviorParams(), horizon_days=4, seed=5, workers=1)
    b = simulate(pop, BehaviorParams(), horizon_days=4, seed=5, workers=2)
    for name in ("packets", "receipts", "edges"):
        pd.testing.assert_frame_equal(getattr(a, name), getattr(b, name))
    c = simulate(pop, BehaviorParams(), horizon_days=4, seed=6)
    assert not a.packets["timestamp"].equals(c.packets["timestamp"])


def test_events_csv_round_trip(small_world, tmp_path):
    _, log, _ = small_world
    log.to_csv(tmp_path / "events.csv")
    assert list(pd.read_csv(tmp_path / "events.csv", nrows=1).columns) == EVENT_COLUMNS
    back = EventLog.from_csv(tmp_path / "events.csv")
    cols = ["packet_id", "group_id", "sender_id", "total_amount", "n_recipients", "timestamp"]
    pd.testing.assert_frame_equal(log.packets[cols], back.packets[cols], check_dtype=False)
    pd.testing.assert_frame_equal(log.receipts, back.receipts, check_dtype=False)
    pd.testing.assert_frame_equal(log.edges.reset_index(drop=True), back.edges.reset_index(drop=True),
                                  check_dtype=False)


def test_clamping_warns():
    pop = generate_population(PopulationConfig(n_groups=30), seed=1)
    with pytest.warns(RuntimeWarning, match="clamped"):
        log = simulate(pop, BehaviorParams(theta_ext=0.5), horizon_days=3, seed=1)
    assert log.n_clamped > 0


@pytest.mark.parametrize("bad", [dict(open_prob=1.5), dict(burst_rate=-0.1), dict(refractory_hours=0),
                                 dict(amount_menu=(100,), amount_menu_weights=(0.5, 0.5)),
                                 dict(amount_menu=(30000,), amount_menu_weights=(1.0,)),
                                 dict(festival_days=(1.5,)), dict(n_menu=(0,), n_menu_weights=(1.0,))])
def test_invalid_params_rejected(bad):
    pop = generate_population(PopulationConfig(n_groups=3), seed=0)
    with pytest.raises(InvalidConfigError):
        simulate(pop, BehaviorParams(**bad), horizon_days=1, seed=0)


def test_nonpositive_horizon_rejected():
    pop = generate_population(PopulationConfig(n_groups=3), seed=0)
    with pytest.raises(InvalidConfigError):
        simulate(pop, BehaviorParams(), horizon_days=0, seed=0)


def test_activity_normalized():
    pop = generate_population(PopulationConfig(n_groups=50), seed=3)
    a = activity(pop, 1.5)
    assert a.mean() == pytest.approx(1.0)
    w = pop.members.set_index("user_id")["wealth"]
    assert np.corrcoef(np.log(a), np.log(w.loc[a.index]))[0, 1] == pytest.approx(1.0)
    assert np.allclose(activity(pop, 0.0), 1.0)


@pytest.mark.parametrize("receipts,msg", [
    ([(0, 1, 1, 100, 1000.0)], "outside"),
    ([(0, 1, 1, 100, 1000.0 + DAY_S)], "outside"),
    ([(0, 1, 2, 100, 1100.0)], "orders"),
    ([(0, 1, 1, 600, 1100.0), (0, 2, 2, 600, 1200.0)], "exceed"),
    ([(0, 1, 1, 1, 1100.0), (0, 2, 2, 1, 1200.0), (0, 3, 3, 1, 1300.0)], "more receipts"),
    ([(9, 1, 1, 100, 1100.0)], "unknown"),
])
def test_check_log_catches_violations(receipts, msg):
    log = make_log([(0, 0, 0, 1000, 2, 1000.0)], receipts)
    with pytest.raises(ValueError, match=msg):
        check_log(log)


def test_check_log_rejects_duplicate_packets():
    log = make_log([(0, 0, 0, 1000, 2, 1000.0), (0, 0, 1, 500, 2, 2000.0)], [])
    with pytest.raises(ValueError, match="duplicate"):
        check_log(log)
