"""Hard-sample synthesis: generator training, the synthetic store and diversification."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .ensemble import WeightedEnsemble, difficulty_from_logits
from .models import ClientModel, Generator, forward_logits

logger = logging.getLogger(__name__)

MAX_EPSILON = 32 / 255


class SynthesisDivergedError(RuntimeError):
    pass


@dataclass
class SynthesisConfig:
    generator_lr: float = 1e-3
    generator_iters: int = 30
    beta: float = 1.0
    epsilon: float = 8 / 255
    batch_size: int = 128
    gen_kl_temperature: float = 1.0
    noise_dim: int = 100
    store_capacity: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.generator_lr <= 0 or self.gen_kl_temperature <= 0:
            raise ValueError("generator_lr and gen_kl_temperature must be positive")
        if self.generator_iters < 0 or self.batch_size < 1 or self.beta < 0:
            raise ValueError("invalid generator_iters / batch_size / beta")
        if not 0.0 <= self.epsilon <= MAX_EPSILON + 1e-12:
            raise ValueError(f"epsilon must lie in [0, 32/255], got {self.epsilon}")


@dataclass
class SyntheticBatch:
    samples: torch.Tensor
    labels: torch.Tensor
    noises: torch.Tensor

    def __len__(self) -> int:
        return len(self.labels)


class SyntheticStore:
    """Append-only store of generated ``(x, y)`` pairs; oldest evicted first when capped."""

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._chunks: deque[tuple[torch.Tensor, torch.Tensor, int]] = deque()
        self._size = 0
        self._cache: tuple[torch.Tensor, torch.Tensor] | None = None

    def __len__(self) -> int:
        return self._size

    def append(self, samples: torch.Tensor, labels: torch.Tensor, epoch: int = -1) -> None:
        self._chunks.append((samples.detach().clone(), labels.detach().clone(), epoch))
        self._size += len(labels)
        self._cache = None
        if self.capacity is not None:
            while self._size > self.capacity:
                x, y, ep = self._chunks[0]
                drop = min(len(y), self._size - self.capacity)
                if drop == len(y):
                    self._chunks.popleft()
                else:
                    self._chunks[0] = (x[drop:], y[drop:], ep)
                self._size -= drop

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """All stored ``(x, y)``, oldest first."""
        if not self._chunks:
            raise ValueError("synthetic store is empty")
        if self._cache is None:
            self._cache = (
                torch.cat([c[0] for c in self._chunks]),
                torch.cat([c[1] for c in self._chunks]),
            )
        return self._cache

    def epochs(self) -> torch.Tensor:
        """Epoch tag of every stored entry, aligned with :meth:`tensors`."""
        return torch.cat([torch.full((len(c[1]),), c[2], dtype=torch.int64) for c in self._chunks])


# --------------------------------------------------------------------------- losses


def difficulty_weighted_loss(difficulty: torch.Tensor, ce: torch.Tensor) -> torch.Tensor:
    """Mean of ``d_i * CE_i`` with ``d`` treated as a constant weight."""
    return (difficulty.detach() * ce).mean()


def hard_sample_loss_from_logits(ens_logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    d = difficulty_from_logits(ens_logits.detach(), labels)
    ce = F.cross_entropy(ens_logits, labels, reduction="none")
    return difficulty_weighted_loss(d, ce)


def hard_sample_loss(gen_batch: SyntheticBatch, ens: WeightedEnsemble) -> torch.Tensor:
    return hard_sample_loss_from_logits(ens(gen_batch.samples), gen_batch.labels)


def kl_divergence(p_logits: torch.Tensor, q_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Per-row ``KL(softmax(p/T) || softmax(q/T))``."""
    log_p = F.log_softmax(p_logits / temperature, dim=1)
    log_q = F.log_softmax(q_logits / temperature, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(1)


def adversarial_divergence_loss_from_logits(ens_logits: torch.Tensor, server_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    return -kl_divergence(ens_logits, server_logits, temperature).mean()


def adversarial_divergence_loss(gen_batch: SyntheticBatch, ens: WeightedEnsemble, server: ClientModel, temperature: float = 1.0) -> torch.Tensor:
    """Negative mean KL from the server's prediction to the ensemble's."""
    return adversarial_divergence_loss_from_logits(ens(gen_batch.samples), forward_logits(server, gen_batch.samples), temperature)


def generator_loss(
    ens_logits: torch.Tensor,
    server_logits: torch.Tensor | None,
    labels: torch.Tensor,
    cfg: SynthesisConfig,
    hard: bool = True,
) -> torch.Tensor:
    """Hard-sample loss plus ``beta`` times the adversarial term, or plain CE when ``hard`` is off."""
    if not hard:
        return F.cross_entropy(ens_logits, labels)
    loss = hard_sample_loss_from_logits(ens_logits, labels)
    if cfg.beta > 0 and server_logits is not None:
        loss = loss + cfg.beta * adversarial_divergence_loss_from_logits(ens_logits, server_logits, cfg.gen_kl_temperature)
    return loss


# --------------------------------------------------------------------------- generator training


class Synthesizer:
    """Holds the generator and its Adam state across epochs."""

    def __init__(self, generator: Generator, cfg: SynthesisConfig):
        self.generator = generator
        self.cfg = cfg
        self.optimizer = torch.optim.Adam(generator.parameters(), lr=cfg.generator_lr)

    def sample_inputs(self, rng: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        b = self.cfg.batch_size
        z = torch.randn(b, self.generator.noise_dim, generator=rng)
        y = torch.randint(0, self.generator.num_classes, (b,), generator=rng)
        return z, y

    def step(
        self,
        ens: WeightedEnsemble,
        server: ClientModel | None,
        rng: torch.Generator,
        hard: bool = True,
        on_loss: Callable[[int, float], None] | None = None,
    ) -> SyntheticBatch:
        """Run ``generator_iters`` Adam steps on one fixed noise/label batch.

        The server (when given) is read in inference mode and left untouched.
        Returns the batch generated after the last update.
        """
        z, y = self.sample_inputs(rng)
        gen = self.generator
        gen.train()
        server_was_training = server is not None and server.net.training
        if server_was_training:
            server.net.eval()
        server_params = [] if server is None else [p for p in server.net.parameters() if p.requires_grad]
        for p in server_params:
            p.requires_grad_(False)
        try:
            for it in range(self.cfg.generator_iters):
                x = gen(z, y)
                ens_logits = ens(x)
                server_logits = forward_logits(server, x) if (hard and server is not None) else None
                loss = generator_loss(ens_logits, server_logits, y, self.cfg, hard=hard)
                if not torch.isfinite(loss):
                    raise SynthesisDivergedError(
                        f"generator loss became {loss.item()} at inner step {it}; "
                        f"ensemble logit range [{ens_logits.min().item():.3g}, {ens_logits.max().item():.3g}]"
                    )
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer.step()
                if on_loss is not None:
                    on_loss(it, loss.item())
            # batch statistics as in training, without touching the running buffers
            buffers = {k: v.clone() for k, v in gen.named_buffers()}
            with torch.no_grad():
                x = gen(z, y)
                for k, v in gen.named_buffers():
                    v.copy_(buffers[k])
        finally:
            for p in server_params:
                p.requires_grad_(True)
            if server_was_training:
                server.net.train()
        return SyntheticBatch(samples=x.detach(), labels=y, noises=z)


def generator_step(gen: Generator, ens, server, cfg: SynthesisConfig, rng: torch.Generator | None = None, hard: bool = True):
    """Functional wrapper: a fresh optimizer on ``gen``; returns ``(gen, batch)``."""
    rng = rng if rng is not None else torch.Generator().manual_seed(cfg.seed)
    batch = Synthesizer(gen, cfg).step(ens, server, rng, hard=hard)
    return gen, batch


# --------------------------------------------------------------------------- diversification


def diversify(
    samples: torch.Tensor,
    labels: torch.Tensor | None,
    ens: WeightedEnsemble,
    epsilon: float,
    rng: torch.Generator,
    chunk: int = 2048,
) -> torch.Tensor:
    """One-step random-direction perturbation of every sample.

    For each sample a direction ``u ~ U[-1, 1]^K`` in logit space is drawn;
    the sample moves by ``epsilon`` along the L2-normalized input gradient of
    ``u . A_w(x)``.  Samples with a zero gradient are returned unchanged.
    ``labels`` is accepted for interface symmetry and not used.
    """
    if epsilon == 0:
        return samples.clone()
    out = []
    for start in range(0, len(samples), chunk):
        x = samples[start : start + chunk].detach().clone().requires_grad_(True)
        logits = ens(x)
        u = torch.rand(logits.shape, generator=rng, dtype=logits.dtype) * 2 - 1
        (grad,) = torch.autograd.grad((u * logits).sum(), x)
        flat = grad.flatten(1)
        norm = flat.norm(dim=1)
        ok = norm > 0
        step = torch.zeros_like(flat)
        step[ok] = flat[ok] / norm[ok, None]
        out.append((x.detach() + epsilon * step.view_as(x)))
    return torch.cat(out)


# --------------------------------------------------------------------------- visualization


def dump_sample_grid(
    store: SyntheticStore,
    epoch: int,
    path: str | Path,
    num_classes: int,
    mean,
    std,
    rows: int = 3,
    scale: int = 4,
) -> Path:
    """Write a PNG grid with one column per class and the ``rows`` most recent samples of each.

    Missing cells (a class with fewer than ``rows`` samples) are left black.
    """
    from PIL import Image

    from .datasets import denormalize

    if rows < 1:
        raise ValueError("need at least one row")
    x, y = store.tensors()
    c, h, w = x.shape[1:]
    canvas = np.zeros((rows * (h + 1), num_classes * (w + 1), c), dtype=np.uint8)
    img = denormalize(x, mean, std).clamp(0, 1)
    for cls in range(num_classes):
        idx = torch.nonzero(y == cls).flatten()[-rows:].flip(0)
        for r, i in enumerate(idx.tolist()):
            tile = (img[i].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
            canvas[r * (h + 1) : r * (h + 1) + h, cls * (w + 1) : cls * (w + 1) + w] = tile
    canvas = canvas.repeat(scale, axis=0).repeat(scale, axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if c == 1 else "RGB"
    Image.fromarray(canvas[..., 0] if c == 1 else canvas, mode=mode).save(path, format="PNG")
    return path


def grid_filename(epoch: int) -> str:
    return f"grid_epoch{epoch}.png"
