"""Small end-to-end trend checks, each using a training run as its own oracle."""

import statistics

import pytest

from coboost.config import desk_profile
from coboost.datasets import PartitionSpec
from coboost.orchestrator import prepare_federation, run_co_boosting, run_fedavg, run_fedens, run_plain_distill

pytestmark = pytest.mark.slow
SEEDS = (0, 1, 2)


def cfg(n, alpha, epochs=60):
    c = desk_profile(partition=PartitionSpec(scheme="dirichlet", alpha=alpha, num_clients=n))
    c.distill.epochs = epochs
    return c


@pytest.fixture(scope="module")
def five_clients():
    c = cfg(5, 0.1, epochs=50)
    return c, {s: prepare_federation(c, s) for s in SEEDS}


def test_co_boosting_beats_plain_distill_mostly(five_clients):
    c, feds = five_clients
    wins = sum(run_co_boosting(c, s, feds[s]).final_server_acc >= run_plain_distill(c, s, feds[s]).final_server_acc for s in SEEDS)
    assert wins >= 2


def test_plain_distill_tracks_uniform_ensemble(five_clients):
    c, feds = five_clients
    gaps = [run_plain_distill(c, s, feds[s]).final_server_acc - run_fedens(c, s, feds[s]).final_server_acc for s in SEEDS]
    assert abs(statistics.median(gaps)) <= 0.05


def test_fedavg_below_fedens_under_skew():
    c = cfg(10, 0.05)
    for s in SEEDS:
        fed = prepare_federation(c, s)
        assert run_fedavg(c, s, fed).final_server_acc < run_fedens(c, s, fed).final_server_acc


def test_ensemble_beats_best_client():
    c = cfg(5, 0.3)
    for s in SEEDS:
        res = run_fedens(c, s, prepare_federation(c, s))
        assert res.final_server_acc > max(res.client_accs)


def test_kd_loss_mostly_decreases_over_windows():
    c = cfg(5, 0.3, epochs=40)
    res = run_plain_distill(c, 0, prepare_federation(c, 0))
    kd = [r["kd_loss"] for r in res.records]
    windows = [kd[i : i + 10] for i in range(len(kd) - 9)]
    assert sum(w[-1] <= w[0] for w in windows) >= 0.8 * len(windows)
