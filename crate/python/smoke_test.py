"""Exercises the Python bindings end to end on the bundled data."""

from pathlib import Path

import dnut

DATA = Path(__file__).resolve().parent.parent / "data"


def check_cells():
    assert dnut.delta_voltage(225.0, 228.0, 231.0) == -3.0
    assert dnut.delta_voltage(228.0, 235.0, 231.0) == 1.0
    assert dnut.delta_current(10.0, 12.0) == 2.0
    assert dnut.delta_current(-10.0, -12.0) == 2.0
    assert dnut.delta_current(-4.0, 6.0) == 10.0
    assert dnut.delta_current(-4.0, 6.0, magnitude_change=True) == 2.0


def check_demo():
    net = dnut.Network.from_scenario(DATA / "scenarios" / "fig1.json")
    assert net.prosumers == ["P1", "P2", "P3", "P4"]
    upstream, parts = net.dnut("P1", "P3", energy=250e-6)
    assert upstream > 0 and parts["ic_linear"] > 0 and parts["uc_linear"] > 0 and parts["pc"] > 0
    neighbour, _ = net.dnut("P4", "P3", energy=250e-6)
    assert neighbour < 0

    matrix = net.dnut_matrix()
    for s in range(4):
        assert matrix["values"][s][s] == 0.0
        for d in range(4):
            total = matrix["current"][s][d] + matrix["voltage"][s][d] + matrix["loss"][s][d]
            assert abs(total - matrix["values"][s][d]) <= 1e-9 * max(1.0, abs(total))

    trades = net.replay(
        [
            {"owner": "P1", "side": "supply", "price": 40.0, "quantity": 1e-4},
            {"owner": "P3", "side": "demand", "price": 80.0, "quantity": 1e-4},
        ]
    )
    assert len(trades) == 1
    tx = trades[0]
    assert tx["demand_price"] >= tx["supply_price"] + tx["dnut"]
    assert tx["nominated_energy"] + tx["excessive_energy"] == tx["energy"]


def check_feeder():
    net = dnut.Network.from_feeder(DATA / "ieee_european_lv")
    assert len(net.prosumers) == 55
    flow = net.power_flow()
    assert flow["loss_power"] > 0
    assert len(net.voltage_sensitivities()[0]) == 3 * 55

    tuned = net.tune_constants(target_mean=15.0)
    assert abs(net.mean_abs_dnut(constants=tuned) - 15.0) < 1e-6

    run = net.run(seed=7, ppr=0.5)
    assert run["metrics"]["n_transactions"] == len(run["transactions"])

    report = net.case3(ppr_values=[0.0, 0.5], seed=3, monte_carlo_runs=2)
    assert [row["ppr"] for row in report["rows"]] == [0.0, 0.5]
    assert report == net.case3(ppr_values=[0.0, 0.5], seed=3, monte_carlo_runs=2)

    case1 = net.case1(sr_values=[0.1], seed=3)
    assert case1["limit_violations"] == 0


if __name__ == "__main__":
    check_cells()
    check_demo()
    check_feeder()
    print("python smoke test passed")
