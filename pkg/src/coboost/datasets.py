"""Dataset loading and non-IID client partitioning.

Samples are stored as float tensors already scaled to [0, 1] and standardized
per channel with fixed statistics (see ``NORMALIZE``).  Partitions operate on
train-set indices only and never touch the sample tensors.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

BLOBS_NUM_CLASSES = 10
BLOBS_SHAPE = (1, 8, 8)
BLOBS_TRAIN = 2000
BLOBS_TEST = 500
# fixed, not derived from the experiment seed: the dataset is part of the framework
BLOBS_SEED = 20240117
BLOBS_NOISE = 0.22

# per-channel (mean, std) applied after scaling to [0, 1]
NORMALIZE: dict[str, tuple[tuple[float, ...], tuple[float, ...]]] = {
    "synthetic_blobs": ((0.5,), (0.25,)),
    "MNIST": ((0.1307,), (0.3081,)),
    "FMNIST": ((0.2860,), (0.3530,)),
    "SVHN": ((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
    "CIFAR10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "CIFAR100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

SUPPORTED_DATASETS = tuple(NORMALIZE)

Scheme = Literal["dirichlet", "class_count", "lognormal_amount"]

MAX_PARTITION_RETRIES = 100


class DatasetError(RuntimeError):
    """Unknown dataset name or unreadable dataset files."""


class PartitionError(RuntimeError):
    """A partition could not be produced for the requested parameters."""


@dataclass
class DatasetHandle:
    """An image-classification dataset held in memory.

    ``train_x``/``test_x`` are normalized ``(N, C, H, W)`` float tensors and
    ``train_y``/``test_y`` are int64 label vectors.
    """

    name: str
    num_classes: int
    sample_shape: tuple[int, int, int]
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self) -> None:
        for split, y in (("train", self.train_y), ("test", self.test_y)):
            if len(y) and (int(y.min()) < 0 or int(y.max()) >= self.num_classes):
                raise DatasetError(f"{self.name}: {split} label outside [0, {self.num_classes})")

    @property
    def num_train(self) -> int:
        return len(self.train_y)

    def train_labels(self) -> np.ndarray:
        return self.train_y.numpy()

    def train_subset(self, indices: Sequence[int] | np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(x, y)`` for the given train indices; the only train-data accessor."""
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return self.train_x[idx], self.train_y[idx]

    def sample_range(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-channel bounds of normalized samples, shaped ``(C, 1, 1)``."""
        mean = torch.tensor(self.mean).view(-1, 1, 1)
        std = torch.tensor(self.std).view(-1, 1, 1)
        return (0.0 - mean) / std, (1.0 - mean) / std


def normalize(x: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    m = torch.tensor(mean, dtype=x.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, -1, 1, 1)
    return (x - m) / s


def denormalize(x: torch.Tensor, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    m = torch.tensor(mean, dtype=x.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, -1, 1, 1)
    return x * s + m


def make_blobs(
    n_train: int = BLOBS_TRAIN,
    n_test: int = BLOBS_TEST,
    num_classes: int = BLOBS_NUM_CLASSES,
    noise: float = BLOBS_NOISE,
    seed: int = BLOBS_SEED,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian class blobs rendered as 1x8x8 images with values in [0, 1].

    Each class has a smooth prototype image; samples are the prototype plus
    isotropic Gaussian noise, clipped to [0, 1].  Labels are balanced.
    """
    rng = np.random.default_rng(seed)
    c, h, w = BLOBS_SHAPE
    # low-frequency prototypes: random 4x4 grids upsampled to 8x8
    coarse = rng.uniform(0.15, 0.85, size=(num_classes, c, h // 2, w // 2))
    protos = coarse.repeat(2, axis=2).repeat(2, axis=3)

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.arange(n) % num_classes
        rng.shuffle(y)
        x = protos[y] + noise * rng.standard_normal((n, c, h, w))
        return np.clip(x, 0.0, 1.0).astype(np.float32), y.astype(np.int64)

    x_tr, y_tr = draw(n_train)
    x_te, y_te = draw(n_test)
    return x_tr, y_tr, x_te, y_te


def _torchvision_arrays(name: str, root: Path):
    import torchvision.datasets as tvd

    kwargs = {"root": str(root), "download": False}
    if name == "MNIST":
        tr, te = tvd.MNIST(train=True, **kwargs), tvd.MNIST(train=False, **kwargs)
        return tr.data.numpy()[:, None], tr.targets.numpy(), te.data.numpy()[:, None], te.targets.numpy()
    if name == "FMNIST":
        tr, te = tvd.FashionMNIST(train=True, **kwargs), tvd.FashionMNIST(train=False, **kwargs)
        return tr.data.numpy()[:, None], tr.targets.numpy(), te.data.numpy()[:, None], te.targets.numpy()
    if name == "SVHN":
        tr, te = tvd.SVHN(split="train", **kwargs), tvd.SVHN(split="test", **kwargs)
        return tr.data, tr.labels, te.data, te.labels
    if name in ("CIFAR10", "CIFAR100"):
        cls = tvd.CIFAR10 if name == "CIFAR10" else tvd.CIFAR100
        tr, te = cls(train=True, **kwargs), cls(train=False, **kwargs)
        return (
            tr.data.transpose(0, 3, 1, 2),
            np.asarray(tr.targets),
            te.data.transpose(0, 3, 1, 2),
            np.asarray(te.targets),
        )
    raise DatasetError(f"unknown dataset {name!r}")


_NUM_CLASSES = {"MNIST": 10, "FMNIST": 10, "SVHN": 10, "CIFAR10": 10, "CIFAR100": 100}


def load_dataset(name: str, root: str | Path | None = None) -> DatasetHandle:
    """Load a supported dataset, scale it to [0, 1] and standardize it.

    ``synthetic_blobs`` is generated in memory; the image datasets are read
    from ``root`` in the standard torchvision layout and never downloaded.

    Raises:
        DatasetError: unknown name, or files missing/corrupt under ``root``.
    """
    if name not in NORMALIZE:
        raise DatasetError(f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED_DATASETS)}")
    mean, std = NORMALIZE[name]

    if name == "synthetic_blobs":
        x_tr, y_tr, x_te, y_te = make_blobs()
        num_classes = BLOBS_NUM_CLASSES
    else:
        if root is None:
            raise DatasetError(f"{name} requires a dataset root directory")
        try:
            x_tr, y_tr, x_te, y_te = _torchvision_arrays(name, Path(root))
        except DatasetError:
            raise
        except Exception as exc:  # torchvision raises RuntimeError / OSError / ValueError variously
            raise DatasetError(f"could not read {name} under {root}: {exc}") from exc
        x_tr = x_tr.astype(np.float32) / 255.0
        x_te = x_te.astype(np.float32) / 255.0
        num_classes = _NUM_CLASSES[name]

    train_x = normalize(torch.from_numpy(np.ascontiguousarray(x_tr)), mean, std)
    test_x = normalize(torch.from_numpy(np.ascontiguousarray(x_te)), mean, std)
    handle = DatasetHandle(
        name=name,
        num_classes=num_classes,
        sample_shape=tuple(train_x.shape[1:]),
        train_x=train_x,
        train_y=torch.as_tensor(np.asarray(y_tr), dtype=torch.int64),
        test_x=test_x,
        test_y=torch.as_tensor(np.asarray(y_te), dtype=torch.int64),
        mean=mean,
        std=std,
    )
    logger.info("loaded %s: %d train / %d test", name, handle.num_train, len(handle.test_y))
    return handle


# --------------------------------------------------------------------------- partitions


@dataclass
class PartitionSpec:
    scheme: Scheme = "dirichlet"
    num_clients: int = 10
    alpha: float | None = 0.1
    classes_per_client: int | None = None
    sigma: float | None = None
    # label skew inside lognormal_amount; None gives IID labels within each client
    label_alpha: float | None = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")
        if self.scheme == "dirichlet":
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("dirichlet partition needs alpha > 0")
        elif self.scheme == "class_count":
            if self.classes_per_client is None or self.classes_per_client < 1:
                raise ValueError("class_count partition needs classes_per_client >= 1")
        elif self.scheme == "lognormal_amount":
            if self.sigma is None or self.sigma <= 0:
                raise ValueError("lognormal_amount partition needs sigma > 0")
        else:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")

    def params(self) -> dict:
        if self.scheme == "dirichlet":
            return {"alpha": self.alpha, "num_clients": self.num_clients}
        if self.scheme == "class_count":
            return {"classes_per_client": self.classes_per_client, "num_clients": self.num_clients}
        return {"sigma": self.sigma, "label_alpha": self.label_alpha, "num_clients": self.num_clients}


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    class_histogram: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.indices)


def _make_shards(assignment: list[list[np.ndarray]], labels: np.ndarray, num_classes: int) -> list[ClientShard]:
    shards = []
    for k, parts in enumerate(assignment):
        idx = np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        hist = np.bincount(labels[idx], minlength=num_classes)
        shards.append(ClientShard(client_id=k, indices=idx.astype(np.int64), class_histogram=hist))
    return shards


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing exactly to ``total``, proportional to ``proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # stable order keeps ties deterministic
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _class_indices(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        out.append(idx)
    return out


def partition_dirichlet(handle: DatasetHandle, spec: PartitionSpec) -> list[ClientShard]:
    """Per-class Dirichlet allocation of train indices to clients.

    For every class a proportion vector over clients is drawn from
    ``Dir(alpha)`` and the (shuffled) class indices are cut contiguously by
    those proportions.  Draws leaving a client empty are repeated.
    """
    if spec.scheme != "dirichlet":
        raise ValueError(f"expected a dirichlet spec, got {spec.scheme!r}")
    labels = handle.train_labels()
    n = spec.num_clients
    rng = np.random.default_rng(spec.seed)
    if n == 1:
        return _make_shards([[np.arange(len(labels))]], labels, handle.num_classes)

    for attempt in range(MAX_PARTITION_RETRIES):
        assignment: list[list[np.ndarray]] = [[] for _ in range(n)]
        for idx in _class_indices(labels, handle.num_classes, rng):
            props = rng.dirichlet(np.full(n, spec.alpha))
            counts = largest_remainder(props, len(idx))
            for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                assignment[k].append(part)
        shards = _make_shards(assignment, labels, handle.num_classes)
        if min(len(s) for s in shards) > 0:
            if attempt:
                logger.debug("dirichlet partition needed %d re-draws", attempt)
            return shards
    raise PartitionError(
        f"no partition without empty clients after {MAX_PARTITION_RETRIES} draws "
        f"(alpha={spec.alpha} too small for n={n})"
    )


def class_assignment(num_classes: int, num_clients: int, classes_per_client: int, rng: np.random.Generator) -> list[list[int]]:
    """Round-robin over a shuffled class list; client k takes C consecutive entries."""
    order = rng.permutation(num_classes)
    return [
        [int(order[(k * classes_per_client + j) % num_classes]) for j in range(classes_per_client)]
        for k in range(num_clients)
    ]


def partition_class_count(handle: DatasetHandle, spec: PartitionSpec) -> list[ClientShard]:
    """Each client holds exactly ``classes_per_client`` classes.

    A class's indices are split evenly among the clients that hold it.
    """
    if spec.scheme != "class_count":
        raise ValueError(f"expected a class_count spec, got {spec.scheme!r}")
    C, n, K = spec.classes_per_client, spec.num_clients, handle.num_classes
    if C > K:
        raise PartitionError(f"classes_per_client={C} exceeds num_classes={K}")
    if n * C < K:
        raise PartitionError(f"{n} clients x {C} classes cannot cover {K} classes")

    labels = handle.train_labels()
    rng = np.random.default_rng(spec.seed)
    classes = class_assignment(K, n, C, rng)
    holders: dict[int, list[int]] = {c: [] for c in range(K)}
    for k, cls in enumerate(classes):
        for c in cls:
            holders[c].append(k)

    assignment: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c, idx in enumerate(_class_indices(labels, K, rng)):
        for k, part in zip(holders[c], np.array_split(idx, len(holders[c]))):
            assignment[k].append(part)
    return _make_shards(assignment, labels, K)


def partition_lognormal(handle: DatasetHandle, spec: PartitionSpec) -> list[ClientShard]:
    """Client sizes from LogNormal(0, sigma^2), labels skewed by ``Dir(label_alpha)``.

    Sizes are rescaled to the train-set size with largest-remainder rounding.
    Each client then fills its quota class by class from its own Dirichlet
    label proportions, topping up from whatever classes remain when a class
    runs out.  Every train index ends up in exactly one shard.
    """
    if spec.scheme != "lognormal_amount":
        raise ValueError(f"expected a lognormal_amount spec, got {spec.scheme!r}")
    labels = handle.train_labels()
    n, K, N = spec.num_clients, handle.num_classes, len(labels)
    rng = np.random.default_rng(spec.seed)

    for _ in range(MAX_PARTITION_RETRIES):
        sizes = largest_remainder(rng.lognormal(0.0, spec.sigma, size=n), N)
        if sizes.min() > 0:
            break
    else:
        raise PartitionError(f"lognormal sizes kept producing empty clients (sigma={spec.sigma})")

    pools = _class_indices(labels, K, rng)
    cursor = np.zeros(K, dtype=np.int64)
    assignment: list[list[np.ndarray]] = [[] for _ in range(n)]
    for k in range(n):
        available = np.array([len(p) for p in pools]) - cursor
        if spec.label_alpha is None:
            props = available / available.sum()
        else:
            props = rng.dirichlet(np.full(K, spec.label_alpha))
        want = np.minimum(largest_remainder(props, int(sizes[k])), available)
        deficit = int(sizes[k] - want.sum())
        while deficit > 0:
            spare = available - want
            extra = np.minimum(largest_remainder(spare, min(deficit, int(spare.sum()))), spare)
            want += extra
            deficit -= int(extra.sum())
        for c in np.flatnonzero(want):
            assignment[k].append(pools[c][cursor[c] : cursor[c] + want[c]])
            cursor[c] += want[c]
    return _make_shards(assignment, labels, K)


def partition(handle: DatasetHandle, spec: PartitionSpec) -> list[ClientShard]:
    """Dispatch on ``spec.scheme``."""
    fn = {
        "dirichlet": partition_dirichlet,
        "class_count": partition_class_count,
        "lognormal_amount": partition_lognormal,
    }[spec.scheme]
    return fn(handle, spec)


def partition_to_json(spec: PartitionSpec, shards: list[ClientShard]) -> str:
    doc = {
        "scheme": spec.scheme,
        "params": spec.params(),
        "seed": spec.seed,
        "shards": [{"client_id": s.client_id, "indices": s.indices.tolist()} for s in shards],
    }
    return json.dumps(doc)


def partition_from_json(text: str, handle: DatasetHandle) -> tuple[PartitionSpec, list[ClientShard]]:
    """Rebuild a partition exactly as written by :func:`partition_to_json`."""
    doc = json.loads(text)
    params = dict(doc["params"])
    spec = PartitionSpec(scheme=doc["scheme"], seed=doc["seed"], **params)
    labels = handle.train_labels()
    assignment = [[np.asarray(s["indices"], dtype=np.int64)] for s in sorted(doc["shards"], key=lambda s: s["client_id"])]
    return spec, _make_shards(assignment, labels, handle.num_classes)
