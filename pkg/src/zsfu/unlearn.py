"""Unlearning step: forgetting losses, drift loss, gradient masking and harmonization."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import (TappedClassifier, build_model, flatten_params, load_flat,
                     log_softmax_with_temperature, softmax_with_temperature)
from .noise import NoiseBundle, frozen
from .runlog import CsvLog

log = logging.getLogger(__name__)

LOG_FLOOR = -30.0

TRACE_FIELDS = ("step", "epoch", "batch", "L_hard", "L_confusion", "L_distillation", "L_drift",
                "cos_gf_gr", "projection_applied", "G_norm")


class UnlearnError(RuntimeError):
    pass


@dataclass
class UnlearnHyper:
    mu_c: float = 0.5
    mu_d: float = 0.5
    temp: float = 4.0
    n_teachers: int = 3
    lr: float = 1e-3           # mu_un
    epochs: int = 10           # E_un
    mask_quantile: float = 0.9
    log_floor: float = LOG_FLOOR
    reduction: str = "sum"     # per-batch reduction of the hard and confusion terms
    teacher_seed: int = 1234
    # ablation switches
    use_hard: bool = True
    use_confusion: bool = True
    use_distillation: bool = True
    use_drift: bool = True
    use_mask: bool = True
    use_harmonize: bool = True
    freeze_y_fake: bool = False

    def __post_init__(self):
        if self.mu_c < 0 or self.mu_d < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.temp > 0:
            raise ValueError("temperature must be positive")
        if self.n_teachers < 1:
            raise ValueError("need at least one teacher")
        if not 0.0 < self.mask_quantile <= 1.0:
            raise ValueError("mask_quantile must lie in (0, 1]")


# ---------------------------------------------------------------------------
# losses on logits

def _reduce(t: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return t.sum()
    if reduction == "mean":
        return t.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def hard_loss(logits: torch.Tensor, y: torch.Tensor, floor: float = LOG_FLOOR, reduction: str = "sum") -> torch.Tensor:
    """Sum of log p(y_f); minimizing it lowers confidence on the forgotten label."""
    logp = torch.log_softmax(logits, dim=1).gather(1, y[:, None]).squeeze(1)
    return _reduce(logp.clamp(min=floor), reduction)


def find_y_fake(logits_or_probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Most probable class other than ``y``; ties go to the smallest index."""
    scores = logits_or_probs.detach().clone()
    scores[torch.arange(len(y)), y] = -math.inf
    return scores.argmax(dim=1)


def confusion_loss(logits: torch.Tensor, y_fake: torch.Tensor, floor: float = LOG_FLOOR,
                   reduction: str = "sum") -> torch.Tensor:
    logp = torch.log_softmax(logits, dim=1).gather(1, y_fake[:, None]).squeeze(1)
    return -_reduce(logp.clamp(min=floor), reduction)


def kl_teacher_student(teacher_logits: torch.Tensor, student_logits: torch.Tensor, temp: float) -> torch.Tensor:
    """Mean over samples of KL(P_teacher || P_student), both temperature-softened."""
    p_t = softmax_with_temperature(teacher_logits, temp)
    log_p_t = log_softmax_with_temperature(teacher_logits, temp)
    log_p_s = log_softmax_with_temperature(student_logits, temp)
    return (p_t * (log_p_t - log_p_s)).sum(dim=1).mean()


def distillation_loss(student_logits: torch.Tensor, teacher_logits: Sequence[torch.Tensor], temp: float) -> torch.Tensor:
    if not temp > 0:
        raise ValueError(f"temperature must be positive, got {temp}")
    return sum(kl_teacher_student(t, student_logits, temp) for t in teacher_logits) / len(teacher_logits)


def unlearn_loss(logits: torch.Tensor, y: torch.Tensor, teacher_logits: Sequence[torch.Tensor],
                 hyper: UnlearnHyper, y_fake: torch.Tensor | None = None) -> tuple[torch.Tensor, dict]:
    """hard + mu_c * confusion + mu_d * distillation, with each term switchable."""
    if y_fake is None:
        y_fake = find_y_fake(logits, y)
    parts = {
        "L_hard": hard_loss(logits, y, hyper.log_floor, hyper.reduction),
        "L_confusion": confusion_loss(logits, y_fake, hyper.log_floor, hyper.reduction),
        "L_distillation": (distillation_loss(logits, teacher_logits, hyper.temp)
                           if teacher_logits else logits.new_zeros(())),
    }
    total = logits.new_zeros(())
    if hyper.use_hard:
        total = total + parts["L_hard"]
    if hyper.use_confusion and hyper.mu_c:
        total = total + hyper.mu_c * parts["L_confusion"]
    if hyper.use_distillation and hyper.mu_d and teacher_logits:
        total = total + hyper.mu_d * parts["L_distillation"]
    return total, {k: v.item() for k, v in parts.items()}


def drift_loss(current: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    if current.shape != reference.shape:
        raise ValueError(f"parameter vectors differ: {tuple(current.shape)} vs {tuple(reference.shape)}")
    return 0.5 * (current - reference).pow(2).sum()


# ---------------------------------------------------------------------------
# gradient surgery

def mask_from_scores(scores: torch.Tensor, quantile: float | None = None,
                     threshold: float | None = None) -> torch.Tensor:
    """1 where ``scores`` is strictly below the threshold (or its quantile), else 0."""
    if (quantile is None) == (threshold is None):
        raise ValueError("give exactly one of quantile / threshold")
    if threshold is None:
        threshold = torch.quantile(scores.double(), quantile).item()
    return (scores < threshold).to(scores.dtype)


def forget_gradient_scores(model: nn.Module, forget_bundle: NoiseBundle) -> torch.Tensor:
    """|grad| of proxy cross-entropy at the reference weights, summed over batches."""
    if forget_bundle.empty:
        raise ValueError("cannot build a gradient mask from an empty forget bundle")
    params = list(model.parameters())
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    was_training = model.training
    model.eval()
    try:
        acc = torch.zeros(sum(p.numel() for p in params), dtype=params[0].dtype)
        for x, y in forget_bundle.batches():
            grads = torch.autograd.grad(F.cross_entropy(model(x), y, reduction="sum"), params, allow_unused=True)
            acc += torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1).abs()
                              for p, g in zip(params, grads)])
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)
        model.train(was_training)
    return acc


def gradient_mask(model_at_ref: nn.Module, forget_bundle: NoiseBundle, quantile: float) -> torch.Tensor:
    return mask_from_scores(forget_gradient_scores(model_at_ref, forget_bundle), quantile=quantile)


def mask_hash(mask: torch.Tensor) -> str:
    return hashlib.sha256(mask.detach().cpu().numpy().tobytes()).hexdigest()


def apply_mask(g_r: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if g_r.shape != mask.shape:
        raise ValueError(f"gradient/mask length mismatch: {tuple(g_r.shape)} vs {tuple(mask.shape)}")
    return g_r * mask


@dataclass
class Harmonized:
    g_f: torch.Tensor     # corrected forgetting gradient
    G: torch.Tensor       # composite update direction
    cos: float            # cosine before correction (nan when undefined)
    projected: bool
    skipped: bool         # retain gradient was zero


def harmonize(g_f: torch.Tensor, g_r: torch.Tensor) -> Harmonized:
    """Drop the part of ``g_f`` that opposes ``g_r``, then add ``g_r``."""
    if g_f.shape != g_r.shape:
        raise ValueError("gradient length mismatch")
    nr2 = torch.dot(g_r, g_r)
    if nr2 == 0:
        return Harmonized(g_f, g_f + g_r, float("nan"), False, True)
    dot = torch.dot(g_r, g_f)
    nf = torch.linalg.vector_norm(g_f)
    cos = (dot / (nf * nr2.sqrt())).item() if nf > 0 else 0.0
    if cos < 0:
        g_f = g_f - (dot / nr2) * g_r
        return Harmonized(g_f, g_f + g_r, cos, True, False)
    return Harmonized(g_f, g_f + g_r, cos, False, False)


# ---------------------------------------------------------------------------
# teachers and the unlearning loop

def make_teachers(template: TappedClassifier, n: int, seed: int) -> list[TappedClassifier]:
    """Untrained models of the student's architecture."""
    from .models import _num_classes
    out = []
    for i in range(n):
        t = build_model(template.arch, _num_classes(template), template.in_channels,
                        template.image_size, seed=seed + i)
        t.to(next(template.parameters()).dtype)
        t.eval()
        for p in t.parameters():
            p.requires_grad_(False)
        out.append(t)
    return out


def run_unlearn(model: TappedClassifier, ref_flat: torch.Tensor, teachers: Sequence[nn.Module],
                forget_bundle: NoiseBundle, hyper: UnlearnHyper, mask: torch.Tensor | None = None,
                trace: CsvLog | None = None, ref_model: nn.Module | None = None) -> torch.Tensor:
    """Masked, harmonized gradient descent over the forget proxies.

    ``ref_flat`` holds the pre-unlearning weights. ``mask`` is computed once
    by the caller (``gradient_mask`` at the reference weights) and reused for
    every step. Updates ``model`` in place and returns its final flat weights.
    """
    if hyper.use_mask and mask is None:
        raise ValueError("use_mask=True needs a precomputed mask")
    if hyper.freeze_y_fake and ref_model is None:
        raise ValueError("freeze_y_fake needs the reference model")
    params = list(model.parameters())
    model.eval()
    ref_flat = ref_flat.detach()
    mhash = mask_hash(mask) if mask is not None else None
    step = 0
    for epoch in range(hyper.epochs):
        for b, (x, y) in enumerate(forget_bundle.batches()):
            logits = model(x)
            with torch.no_grad():
                t_logits = [t(x) for t in teachers]
                y_fake = None
                if hyper.freeze_y_fake:
                    with frozen(ref_model):
                        y_fake = find_y_fake(ref_model(x), y)
            loss, parts = unlearn_loss(logits, y, t_logits, hyper, y_fake)
            if loss.requires_grad:
                grads = torch.autograd.grad(loss, params, allow_unused=True)
                g_f = torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1)
                                 for p, g in zip(params, grads)])
            else:
                g_f = torch.zeros_like(ref_flat)

            w = flatten_params(model)
            if hyper.use_drift:
                g_r = w - ref_flat
                parts["L_drift"] = drift_loss(w, ref_flat).item()
            else:
                g_r = torch.zeros_like(w)
                parts["L_drift"] = 0.0
            if hyper.use_mask:
                g_r = apply_mask(g_r, mask)
            if hyper.use_harmonize:
                h = harmonize(g_f, g_r)
                G, cos, projected = h.G, h.cos, h.projected
            else:
                G = g_f + g_r
                denom = torch.linalg.vector_norm(g_f) * torch.linalg.vector_norm(g_r)
                cos = (torch.dot(g_f, g_r) / denom).item() if denom > 0 else float("nan")
                projected = False
            if not torch.isfinite(G).all():
                raise UnlearnError(f"non-finite update at epoch {epoch}, batch {b}")
            load_flat(model, w - hyper.lr * G)
            step += 1
            if trace is not None:
                trace.append(step=step, epoch=epoch + 1, batch=b, cos_gf_gr=cos, projection_applied=int(projected),
                             G_norm=torch.linalg.vector_norm(G).item(), **parts)
    if mask is not None and mask_hash(mask) != mhash:
        raise UnlearnError("gradient mask changed during the run")
    return flatten_params(model)
