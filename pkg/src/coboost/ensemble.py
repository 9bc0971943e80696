"""Weighted logit ensemble, sample difficulty and signed-gradient reweighting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import ClientShard
from .models import ClientModel, forward_logits


@dataclass
class WeightUpdateConfig:
    """``step_size`` defaults to 0.1 / n when left as ``None``."""

    step_size: float | None = None
    batch_size: int = 128
    full_store: bool = False

    def __post_init__(self) -> None:
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def resolve_step(self, num_clients: int) -> float:
        return self.step_size if self.step_size is not None else 0.1 / num_clients


def uniform_weights(n: int) -> torch.Tensor:
    if n < 1:
        raise ValueError("need at least one client")
    return torch.full((n,), 1.0 / n, dtype=torch.float64)


def data_amount_weights(shards: Sequence[ClientShard] | Sequence[int]) -> torch.Tensor:
    """``n_k / sum(n)``; accepts shards or raw sizes."""
    sizes = np.array([len(s) if isinstance(s, ClientShard) else int(s) for s in shards], dtype=np.float64)
    if len(sizes) == 0 or sizes.sum() <= 0:
        raise ValueError("data-amount weights need at least one nonempty shard")
    return torch.from_numpy(sizes / sizes.sum())


def normalize_weights(w_raw: torch.Tensor | Sequence[float]) -> torch.Tensor:
    """Clamp each weight to [0, 1] then rescale to sum one.

    A vector whose clamped sum is zero maps to uniform weights.
    """
    w = torch.as_tensor(w_raw, dtype=torch.float64).clone()
    if not torch.isfinite(w).all():
        raise ValueError(f"non-finite ensemble weights: {w.tolist()}")
    w = w.clamp(0.0, 1.0)
    total = w.sum()
    if total <= 0:
        return uniform_weights(len(w))
    return w / total


class WeightedEnsemble:
    """``sum_k w_k f_k(x)`` over frozen clients.

    Only :func:`forward_logits` is used on the clients, so architectures may
    differ as long as the logit dimension agrees.
    """

    def __init__(self, clients: Sequence[ClientModel], weights: torch.Tensor | Sequence[float] | None = None):
        if not clients:
            raise ValueError("an ensemble needs at least one client")
        self.clients = list(clients)
        w = uniform_weights(len(self.clients)) if weights is None else torch.as_tensor(weights, dtype=torch.float64)
        if w.shape != (len(self.clients),):
            raise ValueError(f"{len(w)} weights for {len(self.clients)} clients")
        if (w < 0).any() or (w > 1).any() or abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex, got {w.tolist()}")
        self.weights = w

    def __len__(self) -> int:
        return len(self.clients)

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        return ensemble_logits(self, batch)

    def with_weights(self, w: torch.Tensor) -> "WeightedEnsemble":
        return WeightedEnsemble(self.clients, w)

    def client_logits(self, batch: torch.Tensor) -> torch.Tensor:
        """Stacked per-client logits, shape ``(n, B, K)``."""
        outs = [forward_logits(c, batch) for c in self.clients]
        dims = {o.shape[-1] for o in outs}
        if len(dims) != 1:
            raise ValueError(f"clients disagree on logit dimension: {sorted(dims)}")
        return torch.stack(outs)


def combine_logits(client_logits: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``(n, B, K)`` client logits and ``(n,)`` weights to ``(B, K)``."""
    return torch.einsum("n,nbk->bk", w.to(client_logits.dtype), client_logits)


def ensemble_logits(ens: WeightedEnsemble, batch: torch.Tensor) -> torch.Tensor:
    return combine_logits(ens.client_logits(batch), ens.weights)


def difficulty_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """``1 - softmax(logits)[y]`` per row."""
    return 1.0 - F.softmax(logits, dim=1).gather(1, labels.view(-1, 1)).squeeze(1)


def sample_difficulty(predictor: Callable[[torch.Tensor], torch.Tensor], batch: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return difficulty_from_logits(predictor(batch), labels)


def weight_loss(client_logits: torch.Tensor, labels: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the ``w``-combined logits."""
    return F.cross_entropy(combine_logits(client_logits, w), labels)


def weight_gradient(client_logits: torch.Tensor, labels: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Gradient of :func:`weight_loss` with respect to ``w``, in float64."""
    w = w.detach().clone().to(torch.float64).requires_grad_(True)
    loss = weight_loss(client_logits.detach().to(torch.float64), labels, w)
    (grad,) = torch.autograd.grad(loss, w)
    return grad


SIGN_TOL = 1e-12


def signed_step(w: torch.Tensor, grad: torch.Tensor, step_size: float) -> torch.Tensor:
    """One normalized signed-gradient step.

    Components with ``|g| <= SIGN_TOL`` count as zero so round-off on a flat
    coordinate cannot push the weights around.
    """
    grad = grad.to(torch.float64)
    sign = torch.where(grad.abs() <= SIGN_TOL, torch.zeros_like(grad), torch.sign(grad))
    return normalize_weights(w.to(torch.float64) - step_size * sign)


def update_weights(
    ens: WeightedEnsemble,
    batch: torch.Tensor,
    labels: torch.Tensor,
    cfg: WeightUpdateConfig,
    client_logits: torch.Tensor | None = None,
) -> WeightedEnsemble:
    """Return a new ensemble after one signed step on the batch cross-entropy.

    ``client_logits`` may be passed in when already computed for ``batch``.
    """
    if len(labels) == 0:
        raise ValueError("weight update needs a nonempty batch")
    if client_logits is None:
        with torch.no_grad():
            client_logits = ens.client_logits(batch)
    grad = weight_gradient(client_logits, labels, ens.weights)
    return ens.with_weights(signed_step(ens.weights, grad, cfg.resolve_step(len(ens))))
