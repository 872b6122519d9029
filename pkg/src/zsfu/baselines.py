"""Reference unlearning methods: retrain (B1), negative gradient (B2), random labels (B3), retain fine-tune (B4).

B2-B4 run on the server with direct access to real data. They are not
zero-shot and exist only as comparison rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .data import ClientPartition, ImageSet
from .fedsim import FedConfig, FedRun, make_optimizer, run_federation
from .models import TappedClassifier

BASELINES = ("retrain", "neg_gradient", "random_label", "retain_finetune")
# every baseline reads real client data; the tables flag them as such
USES_REAL_DATA = frozenset(BASELINES)


@dataclass
class BaselineConfig:
    epochs: int = 1
    lr: float = 0.01
    batch_size: int = 100
    lr_multiplier: float = 10.0   # B4 only
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr_multiplier <= 0:
            raise ValueError("lr_multiplier must be positive")


def retain_partitions(train: ImageSet, partitions: Sequence[ClientPartition],
                      forget: Sequence[int]) -> list[ClientPartition]:
    drop = train.class_mask(forget)
    return [ClientPartition(p.client_id, [i for i in p.sample_indices if not bool(drop[i])]) for p in partitions]


def retrain_from_scratch(arch: str, train: ImageSet, partitions: Sequence[ClientPartition],
                         forget: Sequence[int], cfg: FedConfig, num_classes: int, **kwargs) -> FedRun:
    """B1: federated training from a fresh initialization on D_r only."""
    parts = retain_partitions(train, partitions, forget)
    if not any(len(p) for p in parts):
        raise ValueError("retain set is empty; nothing to retrain on")
    return run_federation(cfg, train, parts, arch, num_classes, **kwargs)


def _sgd_loop(model: TappedClassifier, data: ImageSet, cfg: BaselineConfig, lr: float, loss_fn) -> list[float]:
    if cfg.epochs == 0 or len(data) == 0:
        return []
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.SGD(model.parameters(), lr=lr)
    model.eval()
    trace = []
    for epoch in range(cfg.epochs):
        for xb, yb in data.batches(cfg.batch_size, gen, shuffle=True):
            opt.zero_grad()
            loss = loss_fn(model(xb), yb, epoch)
            loss.backward()
            opt.step()
            trace.append(loss.item())
    return trace


def neg_gradient_finetune(model: TappedClassifier, forget_data: ImageSet, cfg: BaselineConfig) -> list[float]:
    """B2: gradient ascent on cross-entropy over D_f. Returns the (positive) CE per step."""
    trace = _sgd_loop(model, forget_data, cfg, cfg.lr, lambda logits, y, _: -F.cross_entropy(logits, y))
    return [-v for v in trace]


def random_labels(y: torch.Tensor, num_classes: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform labels over the classes other than each sample's own."""
    offset = torch.randint(1, num_classes, y.shape, generator=generator)
    return (y + offset) % num_classes


def random_label_finetune(model: TappedClassifier, forget_data: ImageSet, cfg: BaselineConfig,
                          num_classes: int) -> list[float]:
    """B3: descent toward random wrong labels, drawn afresh each epoch."""
    if num_classes < 2:
        raise ValueError("random relabelling needs at least two classes")
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    per_epoch = [random_labels(forget_data.y, num_classes, gen) for _ in range(cfg.epochs)]
    relabelled = [ImageSet(forget_data.x, labels) for labels in per_epoch]
    trace = []
    for epoch, data in enumerate(relabelled):
        one = BaselineConfig(1, cfg.lr, cfg.batch_size, cfg.lr_multiplier, cfg.seed + epoch)
        trace += _sgd_loop(model, data, one, cfg.lr, lambda logits, y, _: F.cross_entropy(logits, y))
    return trace


def retain_finetune(model: TappedClassifier, retain_data: ImageSet, cfg: BaselineConfig,
                    fed: FedConfig | None = None) -> list[float]:
    """B4: plain fine-tuning on D_r at ``lr_multiplier`` times the base rate."""
    lr = cfg.lr * cfg.lr_multiplier
    if fed is None:
        return _sgd_loop(model, retain_data, cfg, lr, lambda logits, y, _: F.cross_entropy(logits, y))
    # reuse the federation's optimizer family (e.g. Adam on CIFAR)
    if cfg.epochs == 0 or len(retain_data) == 0:
        return []
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model.parameters(), fed, lr)
    model.eval()
    trace = []
    for _ in range(cfg.epochs):
        for xb, yb in retain_data.batches(cfg.batch_size, gen, shuffle=True):
            opt.zero_grad()
            loss = F.cross_entropy(model(xb), yb)
            loss.backward()
            opt.step()
            trace.append(loss.item())
    return trace
