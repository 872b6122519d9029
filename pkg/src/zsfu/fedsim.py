"""Federated training simulator: local optimization, FedAvg, per-round checkpoints."""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ClientPartition, ImageSet
from .models import TappedClassifier, build_model, clone_state, model_header, save_checkpoint
from .runlog import CsvLog, metrics_log

log = logging.getLogger(__name__)


class FederationError(RuntimeError):
    pass


@dataclass
class FedConfig:
    n_clients: int = 10
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 100
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    momentum: float = 0.0
    weighted: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_clients", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("rounds", "local_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")

    @classmethod
    def for_dataset(cls, dataset: str, **overrides) -> "FedConfig":
        # MNIST: batch 100 / lr 0.01 / SGD; CIFAR: batch 128 / lr 0.01 / Adam
        base = dict(batch_size=100, learning_rate=0.01, optimizer="sgd")
        if dataset.startswith("cifar"):
            base = dict(batch_size=128, learning_rate=0.01, optimizer="adam")
        base.update(overrides)
        return cls(**base)


@dataclass
class FedRun:
    config: FedConfig
    round_checkpoints: list[Path] = field(default_factory=list)
    final_global: dict[str, torch.Tensor] | None = None
    test_accuracy: list[float] = field(default_factory=list)


def make_optimizer(params, cfg: FedConfig, lr: float | None = None) -> torch.optim.Optimizer:
    lr = cfg.learning_rate if lr is None else lr
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)


def train_epochs(model: nn.Module, data: ImageSet, cfg: FedConfig, epochs: int,
                 generator: torch.Generator, lr: float | None = None) -> list[float]:
    """Minibatch cross-entropy training in place; returns per-epoch mean loss."""
    opt = make_optimizer(model.parameters(), cfg, lr)
    model.train()
    losses = []
    for _ in range(epochs):
        total, n = 0.0, 0
        for xb, yb in data.batches(cfg.batch_size, generator, shuffle=True):
            opt.zero_grad()
            loss = F.cross_entropy(model(xb), yb)
            loss.backward()
            opt.step()
            total += loss.item() * len(yb)
            n += len(yb)
        losses.append(total / max(n, 1))
    return losses


def client_generator(seed: int, round_idx: int, client_id: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + round_idx * 7919 + client_id)


def local_train(model: TappedClassifier, global_state: dict[str, torch.Tensor], data: ImageSet,
                cfg: FedConfig, generator: torch.Generator) -> dict[str, torch.Tensor] | None:
    """Run ``cfg.local_epochs`` of local training from ``global_state``.

    ``model`` is scratch space; ``global_state`` is never modified. Returns
    ``None`` for an empty partition so the server can skip that client.
    """
    if len(data) == 0:
        return None
    model.load_state_dict(global_state)
    if cfg.local_epochs == 0:
        return clone_state(model)
    train_epochs(model, data, cfg, cfg.local_epochs, generator)
    return clone_state(model)


def fedavg(updates: Sequence, weights: Sequence[float] | None = None):
    """Elementwise (optionally weighted) mean of client parameters.

    Accepts flat tensors or state dicts; integer buffers such as BN step
    counters are taken from the first update.
    """
    updates = [u for u in updates if u is not None]
    if not updates:
        raise ValueError("fedavg needs at least one update")
    if weights is not None:
        if len(weights) != len(updates):
            raise ValueError("one weight per update required")
        w = torch.tensor(weights, dtype=torch.float64)
        w = w / w.sum()
    if isinstance(updates[0], torch.Tensor):
        shapes = {tuple(u.shape) for u in updates}
        if len(shapes) != 1:
            raise ValueError(f"mixed parameter shapes {sorted(shapes)}")
        stacked = torch.stack(list(updates))
        if weights is None:
            return stacked.mean(dim=0)
        return torch.tensordot(w.to(stacked.dtype), stacked, dims=1)

    keys = list(updates[0])
    for u in updates[1:]:
        if list(u) != keys or any(u[k].shape != updates[0][k].shape for k in keys):
            raise ValueError("updates come from different architectures")
    out = {}
    for k in keys:
        t0 = updates[0][k]
        if not t0.is_floating_point():
            out[k] = t0.clone()
            continue
        stacked = torch.stack([u[k] for u in updates])
        out[k] = stacked.mean(dim=0) if weights is None else torch.tensordot(w.to(t0.dtype), stacked, dims=1)
    return out


@torch.no_grad()
def accuracy(model: nn.Module, data: ImageSet, batch_size: int = 1000) -> float:
    if len(data) == 0:
        return float("nan")
    model.eval()
    correct = 0
    for xb, yb in data.batches(batch_size):
        correct += (model(xb).argmax(1) == yb).sum().item()
    return 100.0 * correct / len(data)


def run_federation(cfg: FedConfig, train: ImageSet, partitions: Sequence[ClientPartition], arch: str,
                   num_classes: int, run_dir: str | os.PathLike | None = None, test: ImageSet | None = None,
                   init_state: dict[str, torch.Tensor] | None = None, metrics: CsvLog | None = None,
                   phase: str = "fed") -> FedRun:
    """Broadcast -> local_train per client -> fedavg, for ``cfg.rounds`` rounds."""
    in_ch, side = int(train.x.shape[1]), int(train.x.shape[2])
    model = build_model(arch, num_classes, in_ch, side, seed=cfg.seed)
    if init_state is not None:
        model.load_state_dict(init_state)
    global_state = clone_state(model)
    ckpt_dir = None
    if run_dir is not None:
        ckpt_dir = Path(run_dir) / "fed"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics = metrics if metrics is not None else metrics_log(run_dir)
    client_data = [train.subset(p.sample_indices) for p in partitions]
    sizes = [len(d) for d in client_data]
    run = FedRun(cfg)

    for rnd in range(1, cfg.rounds + 1):
        updates, weights = [], []
        # client order does not affect the result: each client has its own generator
        for part, data in zip(partitions, client_data):
            upd = local_train(model, global_state, data, cfg, client_generator(cfg.seed, rnd, part.client_id))
            if upd is None:
                log.info("round %d: client %d has no data, skipped", rnd, part.client_id)
                continue
            updates.append(upd)
            weights.append(len(data))
        global_state = fedavg(updates, weights if cfg.weighted else None)
        model.load_state_dict(global_state)
        if test is not None:
            acc = accuracy(model, test)
            run.test_accuracy.append(acc)
            metrics.append(phase=phase, step=rnd, metric="test_accuracy", value=acc)
        if ckpt_dir is not None:
            path = ckpt_dir / f"round_{rnd:04d}.ckpt"
            try:
                save_checkpoint(global_state, path, model_header(model, seed=cfg.seed, round=rnd))
            except Exception as exc:
                raise FederationError(f"checkpoint write failed at round {rnd}: {exc}") from exc
            run.round_checkpoints.append(path)
        log.debug("round %d done (clients=%d)", rnd, len(updates))

    run.final_global = global_state
    return run


def config_dict(cfg: FedConfig) -> dict:
    return asdict(cfg)
