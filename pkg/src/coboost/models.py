"""Client/server classifiers and the label-conditioned generator."""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHS = ("cnn5", "lenet5", "mlp_tiny", "cnn2", "resnet_small", "mobilenet_small", "shufflenet_small")


class ModelFrozenError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    num_classes: int
    input_shape: tuple[int, int, int]

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


# --------------------------------------------------------------------------- architectures


class MLPTiny(nn.Module):
    def __init__(self, in_shape, num_classes, hidden=64):
        super().__init__()
        c, h, w = in_shape
        self.net = nn.Sequential(
            nn.Flatten(), nn.Linear(c * h * w, hidden), nn.ReLU(), nn.Linear(hidden, num_classes)
        )

    def forward(self, x):
        return self.net(x)


class CNN5(nn.Module):
    """Two conv + pool stages followed by two dense layers, five layers in all."""

    def __init__(self, in_shape, num_classes):
        super().__init__()
        c, h, w = in_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, 32, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.fc1 = nn.Linear(64 * (h // 4) * (w // 4), 512)
        self.fc2 = nn.Linear(512, num_classes)

    def forward(self, x):
        x = torch.flatten(self.features(x), 1)
        return self.fc2(F.relu(self.fc1(x)))


class LeNet5(nn.Module):
    def __init__(self, in_shape, num_classes):
        super().__init__()
        c, h, w = in_shape
        self.conv1 = nn.Conv2d(c, 6, 5, padding=2)
        self.conv2 = nn.Conv2d(6, 16, 5)
        # works for 28x28 and 32x32 alike
        self.pool = nn.AdaptiveAvgPool2d((5, 5))
        self.fc1 = nn.Linear(16 * 25, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.relu(self.conv2(x))
        x = torch.flatten(self.pool(x), 1)
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(x)))))


class CNN2(nn.Module):
    """The small convnet from the PyTorch classifier tutorial, size-agnostic."""

    def __init__(self, in_shape, num_classes):
        super().__init__()
        c, _, _ = in_shape
        self.conv1 = nn.Conv2d(c, 6, 3, padding=1)
        self.conv2 = nn.Conv2d(6, 16, 3, padding=1)
        self.pool = nn.AdaptiveAvgPool2d((2, 2))
        self.fc1 = nn.Linear(16 * 4, 120)
        self.fc2 = nn.Linear(120, 84)
        self.fc3 = nn.Linear(84, num_classes)

    def forward(self, x):
        x = F.relu(self.conv1(x))
        if min(x.shape[-2:]) >= 4:
            x = F.max_pool2d(x, 2)
        x = torch.flatten(self.pool(F.relu(self.conv2(x))), 1)
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(x)))))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(out)) + self.shortcut(x))


class ResNetSmall(nn.Module):
    def __init__(self, in_shape, num_classes, width=16):
        super().__init__()
        c = in_shape[0]
        self.stem = nn.Sequential(nn.Conv2d(c, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.layers = nn.Sequential(_BasicBlock(width, width, 1), _BasicBlock(width, 2 * width, 2))
        self.fc = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        x = self.layers(self.stem(x))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


class _InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expand=4):
        super().__init__()
        mid = cin * expand
        self.use_res = stride == 1 and cin == cout
        self.block = nn.Sequential(
            nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.Hardswish(),
            nn.Conv2d(mid, mid, 3, stride, 1, groups=mid, bias=False), nn.BatchNorm2d(mid), nn.Hardswish(),
            nn.Conv2d(mid, cout, 1, bias=False), nn.BatchNorm2d(cout),
        )

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_res else out


class MobileNetSmall(nn.Module):
    def __init__(self, in_shape, num_classes, width=16):
        super().__init__()
        c = in_shape[0]
        self.stem = nn.Sequential(nn.Conv2d(c, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.Hardswish())
        self.blocks = nn.Sequential(
            _InvertedResidual(width, width, 1), _InvertedResidual(width, 2 * width, 2),
            _InvertedResidual(2 * width, 2 * width, 1),
        )
        self.fc = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        x = self.blocks(self.stem(x))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


def _channel_shuffle(x, groups):
    b, c, h, w = x.shape
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


class _ShuffleUnit(nn.Module):
    def __init__(self, channels):
        super().__init__()
        half = channels // 2
        self.branch = nn.Sequential(
            nn.Conv2d(half, half, 1, bias=False), nn.BatchNorm2d(half), nn.ReLU(),
            nn.Conv2d(half, half, 3, 1, 1, groups=half, bias=False), nn.BatchNorm2d(half),
            nn.Conv2d(half, half, 1, bias=False), nn.BatchNorm2d(half), nn.ReLU(),
        )

    def forward(self, x):
        a, b = x.chunk(2, dim=1)
        return _channel_shuffle(torch.cat([a, self.branch(b)], dim=1), 2)


class ShuffleNetSmall(nn.Module):
    def __init__(self, in_shape, num_classes, width=24):
        super().__init__()
        c = in_shape[0]
        self.stem = nn.Sequential(nn.Conv2d(c, width, 3, 1, 1, bias=False), nn.BatchNorm2d(width), nn.ReLU())
        self.units = nn.Sequential(_ShuffleUnit(width), nn.MaxPool2d(2, ceil_mode=True), _ShuffleUnit(width))
        self.fc = nn.Linear(width, num_classes)

    def forward(self, x):
        x = self.units(self.stem(x))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


_BUILDERS = {
    "mlp_tiny": MLPTiny,
    "cnn5": CNN5,
    "lenet5": LeNet5,
    "cnn2": CNN2,
    "resnet_small": ResNetSmall,
    "mobilenet_small": MobileNetSmall,
    "shufflenet_small": ShuffleNetSmall,
}


# --------------------------------------------------------------------------- client wrapper


class ClientModel:
    """A classifier plus the bookkeeping the federation needs.

    Once :meth:`freeze` is called the parameters no longer require grad, the
    network stays in inference mode and further training is refused.
    """

    def __init__(self, spec: ModelSpec, net: nn.Module, seed: int, client_id: int = -1):
        self.spec = spec
        self.net = net
        self.seed = seed
        self.client_id = client_id
        self.frozen = False
        self.metadata: dict[str, Any] = {}

    def __repr__(self) -> str:
        return f"ClientModel(client_id={self.client_id}, arch={self.spec.arch!r}, frozen={self.frozen})"

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return forward_logits(self, x)

    def freeze(self) -> "ClientModel":
        self.frozen = True
        self.net.eval()
        self.net.requires_grad_(False)
        self.net.zero_grad(set_to_none=True)
        return self

    def ensure_trainable(self) -> None:
        if self.frozen:
            raise ModelFrozenError(f"client {self.client_id} is frozen")

    def checksum(self) -> str:
        return parameter_checksum(self.net)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_model(spec: ModelSpec, seed: int, client_id: int = -1) -> ClientModel:
    """Instantiate ``spec.arch`` with parameters drawn from ``seed``."""
    if spec.arch not in _BUILDERS:
        raise ValueError(f"unknown arch {spec.arch!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _BUILDERS[spec.arch](spec.input_shape, spec.num_classes)
    return ClientModel(spec, net, seed=seed, client_id=client_id)


def forward_logits(model: ClientModel, batch: torch.Tensor) -> torch.Tensor:
    """Raw logits of ``model`` on ``batch``; no softmax.

    Frozen models always run in inference mode.  Autograd is left enabled so
    callers can differentiate with respect to the input.
    """
    if tuple(batch.shape[1:]) != model.spec.input_shape:
        raise ValueError(f"batch shape {tuple(batch.shape[1:])} does not match {model.spec.input_shape}")
    if model.frozen and model.net.training:
        model.net.eval()
    return model.net(batch)


# --------------------------------------------------------------------------- generator


class Generator(nn.Module):
    """Label-conditioned noise-to-image generator in the DAFL/DENSE style.

    The label is embedded and concatenated with ``z``; a dense layer maps the
    result to a coarse feature map that is upsampled twice.  A sigmoid maps to
    [0, 1] and the dataset normalization is applied, so samples live in the
    same range as normalized real data.
    """

    def __init__(
        self,
        noise_dim: int,
        num_classes: int,
        output_shape: Sequence[int],
        mean: Sequence[float] | None = None,
        std: Sequence[float] | None = None,
        width: int = 64,
        embed_dim: int | None = None,
    ):
        super().__init__()
        if noise_dim < 1 or num_classes < 1:
            raise ValueError("noise_dim and num_classes must be positive")
        c, h, w = (int(v) for v in output_shape)
        self.noise_dim = noise_dim
        self.num_classes = num_classes
        self.output_shape = (c, h, w)
        self.init_hw = (max(1, -(-h // 4)), max(1, -(-w // 4)))
        embed_dim = embed_dim or noise_dim
        self.embed = nn.Embedding(num_classes, embed_dim)
        self.fc = nn.Linear(noise_dim + embed_dim, width * 2 * self.init_hw[0] * self.init_hw[1])
        self.width = width
        self.body = nn.Sequential(
            nn.BatchNorm2d(width * 2),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(width * 2, width * 2, 3, 1, 1, bias=False),
            nn.BatchNorm2d(width * 2),
            nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(width * 2, width, 3, 1, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, c, 3, 1, 1),
        )
        mean = torch.tensor(mean if mean is not None else [0.0] * c, dtype=torch.float32).view(1, c, 1, 1)
        std = torch.tensor(std if std is not None else [1.0] * c, dtype=torch.float32).view(1, c, 1, 1)
        self.register_buffer("mean", mean)
        self.register_buffer("std", std)

    def forward(self, z: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, self.embed(labels)], dim=1)
        h = self.fc(h).view(len(z), self.width * 2, *self.init_hw)
        x = self.body(h)
        if tuple(x.shape[-2:]) != self.output_shape[1:]:
            x = F.interpolate(x, size=self.output_shape[1:], mode="bilinear", align_corners=False)
        return (torch.sigmoid(x) - self.mean) / self.std


def build_generator(
    noise_dim: int,
    num_classes: int,
    output_shape: Sequence[int],
    seed: int,
    mean: Sequence[float] | None = None,
    std: Sequence[float] | None = None,
    **kwargs,
) -> Generator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(noise_dim, num_classes, output_shape, mean=mean, std=std, **kwargs)


# --------------------------------------------------------------------------- checkpoints


def _atomic_torch_save(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(obj, fh)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: ClientModel, path: str | Path) -> None:
    """Write ``{spec, seed, parameters, metadata}`` atomically."""
    payload = {
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "client_id": model.client_id,
        "frozen": model.frozen,
        "state_dict": model.net.state_dict(),
        "metadata": model.metadata,
    }
    _atomic_torch_save(payload, Path(path))


def load_checkpoint(path: str | Path, expected_spec: ModelSpec | None = None) -> ClientModel:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    spec = ModelSpec(**payload["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointError(f"checkpoint spec {spec} incompatible with expected {expected_spec}")
    model = build_model(spec, payload["seed"], client_id=payload["client_id"])
    model.net.load_state_dict(payload["state_dict"])
    model.metadata = dict(payload.get("metadata", {}))
    if payload.get("frozen"):
        model.freeze()
    return model
