"""Error-minimization noise: synthetic inputs a frozen model assigns to a given class.

Each requesting client optimizes Gaussian-initialized tensors so the global
model classifies them as the class being forgotten (or retained). Only these
tensors, never real samples, are sent to the server.
"""

from __future__ import annotations

import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .data import ClientPartition, DeletionRequest, ImageSet, client_class_indices

log = logging.getLogger(__name__)


class NoiseTrainingError(RuntimeError):
    pass


@dataclass
class NoiseConfig:
    epochs: int = 40          # E_no
    lr: float = 0.1           # mu_no
    batch_size: int = 100     # B
    samples_per_class: int | None = None  # overrides the mirrored real count
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("noise epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("noise lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("noise batch size must be >= 1")


@dataclass
class NoiseMatrix:
    values: torch.Tensor          # (n, C, H, W), split into batches of ``batch_size``
    labels: torch.Tensor          # (n,)
    owner_client: int
    target_split: str             # "forget" | "retain"
    batch_size: int
    loss_trace: list[float] = field(default_factory=list)
    seed: int = 0

    @property
    def class_label(self) -> int:
        return int(self.labels[0])

    @property
    def n_batches(self) -> int:
        return math.ceil(len(self.labels) / self.batch_size)

    def batches(self) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        for s in range(0, len(self.labels), self.batch_size):
            yield self.values[s:s + self.batch_size], self.labels[s:s + self.batch_size]


@dataclass
class NoiseBundle:
    matrices: list[NoiseMatrix]
    target_split: str
    weights: dict[int, float] = field(default_factory=dict)
    config: NoiseConfig | None = None

    def __len__(self) -> int:
        return len(self.matrices)

    @property
    def empty(self) -> bool:
        return not self.matrices

    def clients(self) -> list[int]:
        return sorted({m.owner_client for m in self.matrices})

    def by_client(self) -> dict[int, list[NoiseMatrix]]:
        out: dict[int, list[NoiseMatrix]] = {}
        for m in self.matrices:
            out.setdefault(m.owner_client, []).append(m)
        return out

    def batches(self) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        for m in self.matrices:
            yield from m.batches()

    def as_imageset(self) -> ImageSet:
        return ImageSet(torch.cat([m.values for m in self.matrices]),
                        torch.cat([m.labels for m in self.matrices]))


@contextmanager
def frozen(model: nn.Module):
    """Eval mode with parameter gradients disabled; restores both on exit."""
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def proxy_seed(seed: int, client_id: int, cls: int, split: str) -> int:
    return (seed * 1_000_003 + client_id * 10_007 + cls * 101 + (0 if split == "forget" else 1)) % (2**63)


def batch_loss(model: nn.Module, values: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(model(values), labels)


def matrix_loss(model: nn.Module, matrix: NoiseMatrix) -> float:
    """Mean over the matrix's batches of the batch cross-entropy."""
    with torch.no_grad(), frozen(model):
        losses = [batch_loss(model, x, y).item() for x, y in matrix.batches()]
    return sum(losses) / len(losses)


def bundle_loss(model: nn.Module, bundle: NoiseBundle) -> float:
    """Server-side objective: per-client batch-averaged loss, averaged over clients."""
    per_client = []
    for mats in bundle.by_client().values():
        with torch.no_grad(), frozen(model):
            losses = [batch_loss(model, x, y).item() for m in mats for x, y in m.batches()]
        per_client.append(sum(losses) / len(losses))
    return sum(per_client) / len(per_client)


def train_noise(model: nn.Module, class_label: int, shape: Sequence[int], epochs: int, lr: float,
                seed: int, batch_size: int | None = None, owner_client: int = 0,
                target_split: str = "forget") -> NoiseMatrix:
    """Optimize ``shape[0]`` Gaussian inputs toward ``class_label`` for ``epochs`` passes.

    Each sample takes its own gradient step (the batch cross-entropy is
    summed, not averaged) so the step size does not depend on batch size.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    n = int(shape[0])
    batch_size = batch_size or n
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    values = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    labels = torch.full((n,), int(class_label), dtype=torch.long)
    trace = []
    with frozen(model):
        for epoch in range(epochs):
            epoch_losses = []
            for s in range(0, n, batch_size):
                chunk = values[s:s + batch_size].clone().requires_grad_(True)
                per_sample = F.cross_entropy(model(chunk), labels[s:s + batch_size], reduction="none")
                if not torch.isfinite(per_sample).all():
                    raise NoiseTrainingError(f"non-finite noise loss at epoch {epoch}")
                (grad,) = torch.autograd.grad(per_sample.sum(), chunk)
                values[s:s + batch_size] = (chunk - lr * grad).detach()
                epoch_losses.append(per_sample.mean().item())
            trace.append(sum(epoch_losses) / len(epoch_losses))
    return NoiseMatrix(values, labels, owner_client, target_split, batch_size, trace, seed)


def _sample_count(train: ImageSet | None, part: ClientPartition | None, cls: int, cfg: NoiseConfig) -> int:
    if cfg.samples_per_class is not None:
        return cfg.samples_per_class
    if train is None or part is None:
        raise ValueError("need the client's data (or samples_per_class) to size the noise")
    return len(client_class_indices(train, part, cls))


def forge_forget_proxies(model: nn.Module, requests: Sequence[DeletionRequest], cfg: NoiseConfig,
                         input_shape: Sequence[int], train: ImageSet | None = None,
                         partitions: Sequence[ClientPartition] | None = None) -> NoiseBundle:
    """One noise matrix per (client, forgotten class) pair.

    The sample count mirrors how many examples of that class the client holds,
    unless ``cfg.samples_per_class`` overrides it. ``train`` is only read to
    count labels locally, as a client would.
    """
    if not requests:
        raise ValueError("at least one deletion request is required")
    parts = {p.client_id: p for p in partitions or []}
    matrices = []
    for req in requests:
        for cls in sorted(req.forget_classes):
            n = _sample_count(train, parts.get(req.client_id), cls, cfg)
            if n == 0:
                log.info("client %d holds no samples of class %d; nothing to forge", req.client_id, cls)
                continue
            try:
                m = train_noise(model, cls, (n, *input_shape), cfg.epochs, cfg.lr,
                                proxy_seed(cfg.seed, req.client_id, cls, "forget"),
                                cfg.batch_size, req.client_id, "forget")
            except NoiseTrainingError as exc:
                raise NoiseTrainingError(f"client {req.client_id}, class {cls}: {exc}") from exc
            matrices.append(m)
    return NoiseBundle(matrices, "forget", config=cfg)


def forge_retain_proxies(model: nn.Module, clients: Sequence[ClientPartition], retain_classes: Sequence[int],
                         cfg: NoiseConfig, input_shape: Sequence[int], train: ImageSet | None = None,
                         retained_sizes: dict[int, int] | None = None) -> NoiseBundle:
    """Retain-class proxies per client, weighted by each client's |D_r^i|.

    An empty bundle (``bundle.empty``) means no client retains any data.
    """
    matrices, weights = [], {}
    for part in clients:
        held = []
        for cls in sorted(set(int(c) for c in retain_classes)):
            n = _sample_count(train, part, cls, cfg)
            if n > 0:
                held.append((cls, n))
        if not held:
            continue
        if retained_sizes is not None and part.client_id in retained_sizes:
            weights[part.client_id] = float(retained_sizes[part.client_id])
        elif train is not None:
            weights[part.client_id] = float(sum(len(client_class_indices(train, part, c)) for c, _ in held))
        else:
            weights[part.client_id] = float(sum(n for _, n in held))
        for cls, n in held:
            try:
                matrices.append(train_noise(model, cls, (n, *input_shape), cfg.epochs, cfg.lr,
                                            proxy_seed(cfg.seed, part.client_id, cls, "retain"),
                                            cfg.batch_size, part.client_id, "retain"))
            except NoiseTrainingError as exc:
                raise NoiseTrainingError(f"client {part.client_id}, class {cls}: {exc}") from exc
    if not matrices:
        log.warning("no retained classes on any client: retain bundle is empty")
    return NoiseBundle(matrices, "retain", weights, cfg)


def proxy_prediction_rate(model: nn.Module, matrix: NoiseMatrix) -> float:
    with torch.no_grad(), frozen(model):
        pred = model(matrix.values).argmax(1)
    return (pred == matrix.labels).float().mean().item()


# ---------------------------------------------------------------------------
# persistence: tensor archive + JSON sidecar

def save_bundle(bundle: NoiseBundle, path: str | os.PathLike) -> None:
    path = Path(path)
    tensors, meta = {}, []
    for i, m in enumerate(bundle.matrices):
        tensors[f"{i}.values"] = m.values.contiguous()
        tensors[f"{i}.labels"] = m.labels.contiguous()
        meta.append({"client_id": m.owner_client, "class_label": m.class_label, "target_split": m.target_split,
                     "batch_size": m.batch_size, "seed": m.seed, "loss_trace": m.loss_trace})
    cfg = bundle.config
    sidecar = {
        "target_split": bundle.target_split,
        "weights": {str(k): v for k, v in bundle.weights.items()},
        "E_no": cfg.epochs if cfg else None,
        "mu_no": cfg.lr if cfg else None,
        "seed": cfg.seed if cfg else None,
        "matrices": meta,
    }
    if tensors:
        save_file(tensors, str(path.with_suffix(".safetensors")))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))


def load_bundle(path: str | os.PathLike) -> NoiseBundle:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    tensors = load_file(str(path.with_suffix(".safetensors"))) if sidecar["matrices"] else {}
    mats = [NoiseMatrix(tensors[f"{i}.values"], tensors[f"{i}.labels"], m["client_id"], m["target_split"],
                        m["batch_size"], list(m["loss_trace"]), m["seed"])
            for i, m in enumerate(sidecar["matrices"])]
    cfg = None
    if sidecar.get("E_no") is not None:
        cfg = NoiseConfig(epochs=sidecar["E_no"], lr=sidecar["mu_no"], seed=sidecar["seed"],
                          batch_size=mats[0].batch_size if mats else 100)
    return NoiseBundle(mats, sidecar["target_split"], {int(k): v for k, v in sidecar["weights"].items()}, cfg)
