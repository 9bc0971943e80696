"""Client-side pre-training and top-1 evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

from .datasets import ClientShard, DatasetHandle
from .models import ClientModel

logger = logging.getLogger(__name__)


@dataclass
class LocalTrainConfig:
    epochs: int = 300
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def train_client(
    model: ClientModel,
    shard: ClientShard,
    handle: DatasetHandle,
    cfg: LocalTrainConfig,
    sink=None,
) -> ClientModel:
    """Fit ``model`` on its shard with SGD + cross-entropy, then freeze it.

    Only ``handle.train_subset(shard.indices)`` is read.  The final train
    accuracy goes into ``model.metadata``; per-epoch ``(loss, accuracy)`` is
    appended to ``sink`` when given.
    """
    model.ensure_trainable()
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has an empty shard")

    x, y = handle.train_subset(shard.indices)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = model.net
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    n = len(y)
    curve = []
    for epoch in range(cfg.epochs):
        net.train()
        perm = torch.randperm(n, generator=gen)
        total_loss = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) == 1 and n > 1 and _has_batchnorm(net):
                continue  # batchnorm cannot train on a single sample
            logits = net(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
        record = {"epoch": epoch, "loss": total_loss / n, "accuracy": correct / n}
        curve.append(record)
        if sink is not None:
            sink.append_many(epoch, {f"client{shard.client_id}/loss": record["loss"],
                                     f"client{shard.client_id}/accuracy": record["accuracy"]})

    model.client_id = shard.client_id
    model.freeze()
    model.metadata.update(
        train_accuracy=evaluate(model, x, y),
        num_samples=n,
        class_histogram=shard.class_histogram.tolist(),
        epochs=cfg.epochs,
    )
    logger.debug("client %d: train acc %.3f on %d samples", shard.client_id, model.metadata["train_accuracy"], n)
    return model


def _has_batchnorm(net: torch.nn.Module) -> bool:
    return any(isinstance(m, torch.nn.modules.batchnorm._BatchNorm) for m in net.modules())


@torch.no_grad()
def predict_logits(predictor: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    """Evaluate ``predictor`` in chunks.  Unfrozen client models run in eval mode."""
    net = getattr(predictor, "net", None)
    was_training = net is not None and net.training
    if was_training:
        net.eval()
    try:
        return torch.cat([predictor(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])
    finally:
        if was_training:
            net.train()


def evaluate(predictor: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, y: torch.Tensor) -> float:
    """Top-1 accuracy of anything that maps a batch to logits."""
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    pred = predict_logits(predictor, x).argmax(1)
    return float((pred == y).float().mean())
