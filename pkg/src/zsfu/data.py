"""Dataset loading, client partitioning and forget/retain splits."""

from __future__ import annotations

import gzip
import json
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

DATA_ROOT_ENV = "ZSFU_DATA_ROOT"


class DatasetLoadError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    train_size: int
    test_size: int


@dataclass
class ImageSet:
    """Labeled image tensor pair, indexed by position."""

    x: torch.Tensor
    y: torch.Tensor

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"x/y length mismatch: {len(self.x)} vs {len(self.y)}")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, indices) -> "ImageSet":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return ImageSet(self.x[idx], self.y[idx])

    def class_mask(self, classes: Iterable[int]) -> torch.Tensor:
        classes = torch.as_tensor(sorted(set(int(c) for c in classes)), dtype=self.y.dtype)
        return torch.isin(self.y, classes)

    def batches(self, batch_size: int, generator: torch.Generator | None = None, shuffle: bool = False):
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]


@dataclass(frozen=True)
class ClientPartition:
    client_id: int
    sample_indices: list[int]

    def __len__(self) -> int:
        return len(self.sample_indices)


@dataclass(frozen=True)
class DeletionRequest:
    client_id: int
    forget_classes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "forget_classes", frozenset(int(c) for c in self.forget_classes))
        if not self.forget_classes:
            raise ValueError(f"deletion request from client {self.client_id} names no classes")

    def validate(self, num_classes: int) -> None:
        bad = [c for c in self.forget_classes if not 0 <= c < num_classes]
        if bad:
            raise ValueError(f"client {self.client_id}: classes {sorted(bad)} outside [0, {num_classes})")


# ---------------------------------------------------------------------------
# raw readers

_MNIST_FILES = {
    "train_x": "train-images-idx3-ubyte",
    "train_y": "train-labels-idx1-ubyte",
    "test_x": "t10k-images-idx3-ubyte",
    "test_y": "t10k-labels-idx1-ubyte",
}


def _find(root: Path, stem: str, subdirs: Sequence[str]) -> Path:
    for sub in subdirs:
        for suffix in ("", ".gz"):
            p = root / sub / (stem + suffix)
            if p.is_file():
                return p
    raise DatasetLoadError(f"missing dataset file {stem!r} under {root}")


def read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise DatasetLoadError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise DatasetLoadError(f"corrupt idx file {path}: bad magic")
    ndim = raw[3]
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(np.int64)
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims))
    if len(raw) - offset != expected:
        raise DatasetLoadError(f"corrupt idx file {path}: expected {expected} bytes of payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def _load_mnist(root: Path):
    subdirs = ("", "MNIST/raw", "mnist")
    arrs = {k: read_idx(_find(root, v, subdirs)) for k, v in _MNIST_FILES.items()}
    return (arrs["train_x"][:, None], arrs["train_y"], arrs["test_x"][:, None], arrs["test_y"])


def _unpickle(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except (OSError, pickle.UnpicklingError, EOFError) as exc:
        raise DatasetLoadError(f"cannot read {path}: {exc}") from exc


def _load_cifar10(root: Path):
    base = root / "cifar-10-batches-py"
    xs, ys = [], []
    for i in range(1, 6):
        p = base / f"data_batch_{i}"
        if not p.is_file():
            raise DatasetLoadError(f"missing dataset file {p}")
        d = _unpickle(p)
        xs.append(np.asarray(d["data"], dtype=np.uint8))
        ys.append(np.asarray(d["labels"]))
    p = base / "test_batch"
    if not p.is_file():
        raise DatasetLoadError(f"missing dataset file {p}")
    t = _unpickle(p)
    return (np.concatenate(xs).reshape(-1, 3, 32, 32), np.concatenate(ys),
            np.asarray(t["data"], dtype=np.uint8).reshape(-1, 3, 32, 32), np.asarray(t["labels"]))


def _load_cifar100(root: Path):
    base = root / "cifar-100-python"
    out = []
    for split in ("train", "test"):
        p = base / split
        if not p.is_file():
            raise DatasetLoadError(f"missing dataset file {p}")
        d = _unpickle(p)
        out += [np.asarray(d["data"], dtype=np.uint8).reshape(-1, 3, 32, 32), np.asarray(d["fine_labels"])]
    return tuple(out)


def _load_mnist5k(root: Path, train_per_class: int = 350):
    # 5000 real MNIST digits (500/class) shipped with mlxtend; used when the full archive is absent
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover
        raise DatasetLoadError("mnist5k requires the mlxtend package") from exc
    x, y = mnist_data()
    x = x.reshape(-1, 1, 28, 28).astype(np.uint8)
    y = y.astype(np.int64)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(y == c)
        train_idx.append(idx[:train_per_class])
        test_idx.append(idx[train_per_class:])
    tr, te = np.concatenate(train_idx), np.concatenate(test_idx)
    return x[tr], y[tr], x[te], y[te]


_LOADERS = {
    "mnist": (_load_mnist, 10),
    "cifar10": (_load_cifar10, 10),
    "cifar100": (_load_cifar100, 100),
    "mnist5k": (_load_mnist5k, 10),
}

DATASET_NAMES = tuple(_LOADERS)


def default_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "~/.cache/zsfu/data")).expanduser()


def load_dataset(name: str, root: str | os.PathLike | None = None) -> tuple[ImageSet, ImageSet, DatasetManifest]:
    """Load a benchmark dataset from disk.

    Pixels are scaled to [0, 1] and standardized per channel with the
    training-set mean/std, so synthesized inputs live on the same scale.
    """
    if name not in _LOADERS:
        raise ValueError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    loader, num_classes = _LOADERS[name]
    root = Path(root).expanduser() if root is not None else default_root()
    xtr, ytr, xte, yte = loader(root)

    xtr = torch.tensor(np.asarray(xtr), dtype=torch.float32).div_(255.0)
    xte = torch.tensor(np.asarray(xte), dtype=torch.float32).div_(255.0)
    mean = xtr.mean(dim=(0, 2, 3), keepdim=True)
    std = xtr.std(dim=(0, 2, 3), keepdim=True)
    xtr = (xtr - mean) / std
    xte = (xte - mean) / std
    train = ImageSet(xtr, torch.from_numpy(np.asarray(ytr, dtype=np.int64)))
    test = ImageSet(xte, torch.from_numpy(np.asarray(yte, dtype=np.int64)))
    manifest = DatasetManifest(
        name=name,
        input_shape=tuple(int(s) for s in xtr.shape[1:]),
        num_classes=num_classes,
        train_size=len(train),
        test_size=len(test),
    )
    return train, test, manifest


# ---------------------------------------------------------------------------
# partitioning

def partition_iid(train: ImageSet | int, n_clients: int, seed: int) -> list[ClientPartition]:
    n = train if isinstance(train, int) else len(train)
    if n_clients <= 0:
        raise ValueError(f"n_clients must be positive, got {n_clients}")
    if n_clients > n:
        raise ValueError(f"n_clients={n_clients} exceeds {n} samples")
    perm = np.random.default_rng(seed).permutation(n)
    return [ClientPartition(i, sorted(int(j) for j in part))
            for i, part in enumerate(np.array_split(perm, n_clients))]


def save_partitions(partitions: Sequence[ClientPartition], path: str | os.PathLike) -> None:
    payload = {str(p.client_id): list(p.sample_indices) for p in partitions}
    Path(path).write_text(json.dumps(payload))


def load_partitions(path: str | os.PathLike) -> list[ClientPartition]:
    payload = json.loads(Path(path).read_text())
    return [ClientPartition(int(k), [int(i) for i in v]) for k, v in sorted(payload.items(), key=lambda kv: int(kv[0]))]


def forget_classes(requests: Sequence[DeletionRequest]) -> set[int]:
    out: set[int] = set()
    for r in requests:
        out |= r.forget_classes
    return out


def split_forget_retain(dataset: ImageSet, requests: Sequence[DeletionRequest],
                        num_classes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Index sets (D_f, D_r) for class-level deletion.

    A sample belongs to D_f when its label is named by any request; client
    scoping only matters for noise attribution, not for membership here.
    """
    if not requests:
        raise ValueError("at least one deletion request is required")
    if num_classes is not None:
        for r in requests:
            r.validate(num_classes)
    mask = dataset.class_mask(forget_classes(requests)).numpy()
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def client_class_indices(dataset: ImageSet, partition: ClientPartition, cls: int) -> list[int]:
    idx = np.asarray(partition.sample_indices, dtype=np.int64)
    if len(idx) == 0:
        return []
    return idx[dataset.y[torch.from_numpy(idx)].numpy() == cls].tolist()
