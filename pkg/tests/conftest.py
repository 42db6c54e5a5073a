import numpy as np
import pandas as pd
import pytest

from hongbao._perf import tune_allocator
from hongbao.panel import build_panel
from hongbao.population import PopulationConfig, generate_population
from hongbao.simulator import BehaviorParams, EventLog, simulate

tune_allocator()


@pytest.fixture(scope="session")
def small_world():
    """A few hundred groups over three weeks: population, log and panel."""
    pop = generate_population(PopulationConfig(n_groups=150), seed=11)
    log = simulate(pop, BehaviorParams(), horizon_days=21, seed=11)
    panel = build_panel(log, pop)
    return pop, log, panel


def make_log(packets, receipts, edges=(), horizon_days=5.0, festival_days=()):
    """EventLog from plain tuples.

    packets: (packet_id, group_id, sender_id, total, n, t)
    receipts: (packet_id, recipient_id, order, amount, t)
    edges: (group_id, a, b, t)
    """
    p = pd.DataFrame(list(packets), columns=["packet_id", "group_id", "sender_id", "total_amount",
                                              "n_recipients", "timestamp"])
    p["kind"] = 0
    r = pd.DataFrame(list(receipts), columns=["packet_id", "recipient_id", "order", "amount", "timestamp"])
    e = pd.DataFrame(list(edges), columns=["group_id", "user_a", "user_b", "timestamp"])
    for df in (p, r, e):
        for c in df.columns:
            df[c] = df[c].astype(np.float64 if c == "timestamp" else np.int64)
    return EventLog(p, r, e, tuple(festival_days), horizon_days * 86400.0)
