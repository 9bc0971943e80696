"""Server-side knowledge distillation from the weighted ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .ensemble import WeightedEnsemble
from .models import ClientModel, forward_logits


@dataclass
class DistillConfig:
    server_lr: float = 0.01
    momentum: float = 0.9
    kd_temperature: float = 4.0
    batch_size: int = 128
    epochs: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        if self.server_lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid server_lr / batch_size / epochs")


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """``tau^2 * KL(softmax(t/tau) || softmax(s/tau))`` averaged over the batch."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"shape mismatch {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    log_t = F.log_softmax(teacher_logits / temperature, dim=1)
    log_s = F.log_softmax(student_logits / temperature, dim=1)
    return F.kl_div(log_s, log_t, reduction="batchmean", log_target=True) * temperature**2


class Distiller:
    """Owns the server optimizer so momentum carries across epochs."""

    def __init__(self, server: ClientModel, cfg: DistillConfig):
        server.ensure_trainable()
        self.server = server
        self.cfg = cfg
        self.optimizer = torch.optim.SGD(server.net.parameters(), lr=cfg.server_lr, momentum=cfg.momentum)

    def epoch(self, ens: WeightedEnsemble, samples: torch.Tensor, rng: torch.Generator) -> float:
        """One shuffled pass over ``samples``; returns the sample-weighted mean loss.

        Teacher logits use the ensemble's current weights and carry no gradient.
        """
        n = len(samples)
        if n == 0:
            raise ValueError("cannot distill from an empty store")
        net = self.server.net
        net.train()
        perm = torch.randperm(n, generator=rng)
        total = 0.0
        for start in range(0, n, self.cfg.batch_size):
            x = samples[perm[start : start + self.cfg.batch_size]]
            with torch.no_grad():
                teacher = ens(x)
            loss = kd_loss(teacher, forward_logits(self.server, x), self.cfg.kd_temperature)
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
            total += loss.item() * len(x)
        return total / n


def distill_epoch(server: ClientModel, ens: WeightedEnsemble, store, cfg: DistillConfig, rng: torch.Generator | None = None) -> ClientModel:
    """Functional form with a fresh optimizer; ``store`` may be a SyntheticStore or a sample tensor."""
    samples = store if isinstance(store, torch.Tensor) else store.tensors()[0]
    rng = rng if rng is not None else torch.Generator().manual_seed(cfg.seed)
    Distiller(server, cfg).epoch(ens, samples, rng)
    return server
