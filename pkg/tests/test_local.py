import numpy as np
import pytest
import torch

from coboost.datasets import ClientShard, PartitionSpec, partition
from coboost.local import LocalTrainConfig, evaluate, train_client
from coboost.models import ModelFrozenError, ModelSpec, build_model

SPEC = ModelSpec("mlp_tiny", 10, (1, 8, 8))


class LoggingHandle:
    """Wraps a dataset handle and records every train index read."""

    def __init__(self, handle):
        self._h = handle
        self.read: set[int] = set()

    def train_subset(self, indices):
        self.read.update(int(i) for i in indices)
        return self._h.train_subset(indices)

    def __getattr__(self, name):
        if name in ("train_x", "train_y"):
            raise AssertionError("trainer touched the full train tensors")
        return getattr(self._h, name)


def shard_of(handle, idx, cid=0):
    idx = np.asarray(sorted(idx), dtype=np.int64)
    return ClientShard(cid, idx, np.bincount(handle.train_labels()[idx], minlength=10))


def test_single_class_shard(blobs):
    idx = np.flatnonzero(blobs.train_labels() == 4)[:50]
    shard = shard_of(blobs, idx)
    m = train_client(build_model(SPEC, 0), shard, blobs, LocalTrainConfig(epochs=3, batch_size=16))
    x, y = blobs.train_subset(idx)
    assert evaluate(m, x, y) == 1.0
    assert m.frozen and m.metadata["train_accuracy"] == 1.0


def test_dirichlet_clients_fit_their_shards(blobs):
    shards = partition(blobs, PartitionSpec("dirichlet", num_clients=4, alpha=0.3, seed=0))
    cfg = LocalTrainConfig(epochs=30, batch_size=32)
    for s in shards:
        m = train_client(build_model(SPEC, s.client_id), s, blobs, cfg)
        assert m.metadata["train_accuracy"] > 0.9


def test_training_is_deterministic(blobs):
    shard = partition(blobs, PartitionSpec("dirichlet", num_clients=4, alpha=0.3, seed=0))[1]
    cfg = LocalTrainConfig(epochs=2, batch_size=32, seed=5)
    a = train_client(build_model(SPEC, 1), shard, blobs, cfg)
    b = train_client(build_model(SPEC, 1), shard, blobs, cfg)
    assert a.checksum() == b.checksum()


def test_reads_only_its_own_shard(blobs):
    shard = partition(blobs, PartitionSpec("dirichlet", num_clients=5, alpha=0.5, seed=2))[3]
    logged = LoggingHandle(blobs)
    train_client(build_model(SPEC, 0), shard, logged, LocalTrainConfig(epochs=1, batch_size=32))
    assert logged.read == set(shard.indices.tolist())


def test_frozen_model_rejects_training(blobs):
    shard = shard_of(blobs, range(20))
    m = train_client(build_model(SPEC, 0), shard, blobs, LocalTrainConfig(epochs=1))
    with pytest.raises(ModelFrozenError):
        train_client(m, shard, blobs, LocalTrainConfig(epochs=1))


def test_empty_shard(blobs):
    with pytest.raises(ValueError):
        train_client(build_model(SPEC, 0), shard_of(blobs, []), blobs, LocalTrainConfig(epochs=1))


def test_batchnorm_arch_trains(blobs):
    shard = shard_of(blobs, range(65))  # leaves a size-1 tail batch
    m = build_model(ModelSpec("resnet_small", 10, (1, 8, 8)), 0)
    train_client(m, shard, blobs, LocalTrainConfig(epochs=1, batch_size=32))
    assert m.frozen


def test_training_curve_reaches_sink(blobs, tmp_path):
    from coboost.metrics import MetricsSink, read_records

    shard = shard_of(blobs, range(40), cid=2)
    with MetricsSink(tmp_path / "m.jsonl", "r") as sink:
        train_client(build_model(SPEC, 0), shard, blobs, LocalTrainConfig(epochs=3, batch_size=16), sink=sink)
    names = {(r.epoch, r.name) for r in read_records(tmp_path / "m.jsonl")}
    assert (2, "client2/accuracy") in names and (0, "client2/loss") in names


def test_evaluate_perfect_and_constant():
    y = torch.arange(10).repeat(10)
    x = torch.nn.functional.one_hot(y, 10).float()
    assert evaluate(lambda b: b, x, y) == 1.0
    const = lambda b: torch.nn.functional.one_hot(torch.zeros(len(b), dtype=torch.long), 10).float()
    assert evaluate(const, x, y) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        evaluate(lambda b: b, x[:0], y[:0])


def test_config_validation():
    with pytest.raises(ValueError):
        LocalTrainConfig(momentum=1.0)
    d = LocalTrainConfig()
    assert (d.epochs, d.batch_size, d.lr, d.momentum) == (300, 128, 0.01, 0.9)
