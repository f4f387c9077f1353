import json
import os

import numpy as np
import pytest

import kclflow

DATA = os.environ.get("KCLFLOW_DATA_DIR", os.path.join(os.path.dirname(__file__), "..", "..", "data"))


@pytest.fixture(scope="module")
def grid():
    return kclflow.load_grid(os.path.join(DATA, "case14.m"))


def test_grid_shape(grid):
    assert grid.num_buses == 14
    assert grid.num_branches == 20
    assert len(grid.topology_hash) == 16
    smaller = grid.remove_branch(grid.eligible_contingencies()[0])
    assert smaller.num_branches == 19
    assert "buses=14" in repr(grid)


def test_solve_and_flows(grid):
    sol = kclflow.solve(grid)
    assert sol["iterations"] <= 10
    assert sol["max_mismatch"] <= 1e-8
    flows = kclflow.branch_flows(grid, sol["vm"], sol["va"])
    np.testing.assert_allclose(flows, sol["flows"])
    res = kclflow.kcl_residual(grid, -sol["p_inj"], -sol["q_inj"], flows)
    assert np.max(np.abs(res)) <= 1e-6


def test_projection(grid):
    sol = kclflow.solve(grid)
    net_p, net_q = -sol["p_inj"], -sol["q_inj"]
    rng = np.random.default_rng(0)
    y = sol["flows"] + rng.normal(0, 0.1, size=80)
    z = kclflow.project(grid, net_p, net_q, y)
    assert np.max(np.abs(kclflow.kcl_residual(grid, net_p, net_q, z))) <= 1e-10
    zk, sweeps, residual = kclflow.project_kaczmarz(grid, net_p, net_q, y)
    assert residual <= 1e-6
    assert sweeps >= 1
    np.testing.assert_allclose(zk, z, atol=1e-8)
    l_p, l_q, l_kcl = kclflow.kcl_metric(grid, net_p, net_q, z)
    assert l_kcl <= 1e-16
    assert l_kcl == pytest.approx((l_p + l_q) / 2)


def test_generate_train_evaluate(grid):
    data = kclflow.generate(grid, 20, "n", seed=1, split=(0.6, 0.2, 0.2))
    lines = data.splitlines()
    assert len(lines) == 21
    assert kclflow.generate(grid, 20, "n", seed=1, split=(0.6, 0.2, 0.2), workers=2) == data
    ckpt, log = kclflow.train(data, grid, {"epochs": 2, "hidden": 8, "head_dim": 8, "heads": 1, "batch_size": 4})
    assert len(log) == 2
    assert all(kcl <= 1e-10 for _, _, kcl in log)
    report = json.loads(kclflow.evaluate(ckpt, data, grid))
    assert report["test_count"] == 4
    assert report["mean"]["kcl_violation"] <= 1e-10


def test_errors_carry_kind(grid):
    with pytest.raises(kclflow.KclflowError) as info:
        kclflow.load_grid(os.path.join(DATA, "does_not_exist.m"))
    assert info.value.kind == "Io"
    n1 = kclflow.generate(grid, 3, "n1", seed=2)
    with pytest.raises(kclflow.KclflowError) as info:
        kclflow.train(n1, grid, {"epochs": 1})
    assert info.value.kind == "InvalidArgument"
    with pytest.raises(kclflow.KclflowError):
        kclflow.project(grid, np.zeros(14), np.zeros(14), np.zeros(7))
