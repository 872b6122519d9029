"""Post-unlearning accuracy check and one-shot zero-shot repair on retain proxies."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .noise import NoiseBundle, NoiseMatrix
from .runlog import CsvLog

log = logging.getLogger(__name__)


class RepairError(RuntimeError):
    pass


@dataclass
class RepairPolicy:
    delta: float = 5.0    # accuracy-drop threshold, percent
    epochs: int = 5       # E_re
    lr: float = 0.05      # mu_re
    seed: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.epochs < 0:
            raise ValueError("repair epochs must be non-negative")


def accuracy_drop(acc_before: float, acc_after: float) -> float:
    """Relative drop in percent: (before - after) / before * 100."""
    if acc_before <= 0:
        raise ValueError("acc_before must be positive")
    return (acc_before - acc_after) / acc_before * 100.0


@dataclass
class RepairDecision:
    client_id: int
    acc_before: float
    acc_after: float
    drop: float
    triggered: bool


@dataclass
class RepairGate:
    """Collects per-client requests; the repair itself may run only once."""

    policy: RepairPolicy
    decisions: list[RepairDecision] = field(default_factory=list)
    used: bool = False

    def evaluate(self, before: Mapping[int, float], after: Mapping[int, float]) -> list[RepairDecision]:
        self.decisions = []
        for cid in sorted(before):
            drop = accuracy_drop(before[cid], after[cid])
            self.decisions.append(RepairDecision(cid, before[cid], after[cid], drop, drop > self.policy.delta))
        return self.decisions

    @property
    def triggered(self) -> bool:
        return any(d.triggered for d in self.decisions)

    def claim(self) -> None:
        if self.used:
            raise RepairError("repair already ran for this unlearning run")
        self.used = True

    def log_to(self, metrics: CsvLog) -> None:
        for d in self.decisions:
            for key in ("acc_before", "acc_after", "drop", "triggered"):
                v = getattr(d, key)
                metrics.append(phase="repair_decision", step=d.client_id, metric=key,
                               value=int(v) if isinstance(v, bool) else v)


def aggregate_retain_proxies(bundles: Sequence[NoiseBundle]) -> NoiseBundle:
    """Merge per-client retain bundles; weights become |D_r^i|-proportional probabilities."""
    if not bundles:
        raise ValueError("no retain bundles to aggregate")
    mats: list[NoiseMatrix] = []
    weights: dict[int, float] = {}
    for b in bundles:
        if b.target_split != "retain":
            raise ValueError("only retain bundles can be aggregated for repair")
        mats.extend(b.matrices)
        for cid, w in b.weights.items():
            weights[cid] = weights.get(cid, 0.0) + float(w)
    present = {m.owner_client for m in mats}
    weights = {c: w for c, w in weights.items() if c in present and w > 0}
    total = sum(weights.values())
    if not mats or total == 0:
        return NoiseBundle([], "retain", {}, bundles[0].config)
    return NoiseBundle(mats, "retain", {c: w / total for c, w in sorted(weights.items())}, bundles[0].config)


def batch_schedule(bundle: NoiseBundle, n_draws: int, generator: torch.Generator) -> list[tuple[int, int, int]]:
    """Draw (client, matrix index, batch start) triples, clients sampled by weight."""
    by_client = {}
    for i, m in enumerate(bundle.matrices):
        for s in range(0, len(m.labels), m.batch_size):
            by_client.setdefault(m.owner_client, []).append((i, s))
    clients = sorted(c for c in by_client if bundle.weights.get(c, 0) > 0)
    if not clients:
        return []
    w = torch.tensor([bundle.weights[c] for c in clients], dtype=torch.float64)
    picks = torch.multinomial(w, n_draws, replacement=True, generator=generator).tolist()
    out = []
    for p in picks:
        cid = clients[p]
        slots = by_client[cid]
        i, s = slots[int(torch.randint(len(slots), (1,), generator=generator))]
        out.append((cid, i, s))
    return out


def repair_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Squared error between softmax outputs and one-hot labels (summed over classes, mean over batch)."""
    target = F.one_hot(y, logits.shape[1]).to(logits.dtype)
    return (torch.softmax(logits, dim=1) - target).pow(2).sum(dim=1).mean()


def run_repair(model: nn.Module, retain_bundle: NoiseBundle, policy: RepairPolicy,
               metrics: CsvLog | None = None) -> list[float]:
    """E_re epochs of SGD on the repair loss; modifies ``model`` in place."""
    if retain_bundle.empty:
        log.warning("empty retain bundle: repair skipped")
        return []
    gen = torch.Generator().manual_seed(policy.seed)
    n_batches = sum(m.n_batches for m in retain_bundle.matrices)
    params = list(model.parameters())
    model.eval()
    trace = []
    for epoch in range(policy.epochs):
        losses = []
        for _, i, s in batch_schedule(retain_bundle, n_batches, gen):
            m = retain_bundle.matrices[i]
            x, y = m.values[s:s + m.batch_size], m.labels[s:s + m.batch_size]
            loss = repair_loss(model(x), y)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            with torch.no_grad():
                for p, g in zip(params, grads):
                    if g is not None:
                        p.sub_(policy.lr * g)
            losses.append(loss.item())
        trace.append(sum(losses) / len(losses))
        if metrics is not None:
            metrics.append(phase="repair", step=epoch + 1, metric="loss", value=trace[-1])
    return trace
