import pytest
import torch

from coboost.datasets import load_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def blobs():
    return load_dataset("synthetic_blobs")


@pytest.fixture(scope="session")
def small_ensemble(blobs):
    """Four frozen mlp_tiny clients on a Dir(0.3) split, uniformly weighted."""
    from coboost.datasets import PartitionSpec, partition
    from coboost.ensemble import WeightedEnsemble
    from coboost.local import LocalTrainConfig, train_client
    from coboost.models import ModelSpec, build_model

    torch.set_num_threads(1)
    spec = ModelSpec("mlp_tiny", 10, (1, 8, 8))
    shards = partition(blobs, PartitionSpec("dirichlet", num_clients=4, alpha=0.3, seed=0))
    cfg = LocalTrainConfig(epochs=10, batch_size=32)
    clients = [train_client(build_model(spec, s.client_id), s, blobs, cfg) for s in shards]
    return WeightedEnsemble(clients)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict line; all lines are echoed in the terminal summary."""

    def record(number, passed, detail):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status}  {detail}"
        request.config.stash.setdefault(ACCEPTANCE, []).append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
