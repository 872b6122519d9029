"""Knowledge disentanglement: L1 suppression of weak final-conv channels on forget proxies."""

from __future__ import annotations

import math

import torch

from .models import TappedClassifier
from .noise import NoiseBundle
from .runlog import CsvLog


class DisentangleError(RuntimeError):
    pass


def channel_l1(features: torch.Tensor) -> torch.Tensor:
    """Per-channel L1 norm; accepts (C, H, W) or (B, C, H, W)."""
    return features.abs().sum(dim=(-2, -1))


def n_retained(alpha: float, channels: int) -> int:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    # guard against 0.7 * 10 == 7.000000000000001
    return max(1, math.ceil(alpha * channels - 1e-9))


def compute_threshold(norms: torch.Tensor, alpha: float) -> float:
    """Value of the ceil(alpha*C)-th largest norm: channels strictly below it are suppressed."""
    k = n_retained(alpha, norms.numel())
    ordered = sorted(range(norms.numel()), key=lambda i: (-float(norms[i]), i))
    return float(norms[ordered[k - 1]])


def suppressed_mask(norms: torch.Tensor, alpha: float) -> torch.Tensor:
    return norms < compute_threshold(norms.detach(), alpha)


def disentangle_loss(batch_features: torch.Tensor, alpha: float, retention: bool = True) -> torch.Tensor:
    """Scaled sum of the sub-threshold channel norms, averaged over the batch.

    The threshold comes from the batch-mean channel norms. ``retention=False``
    reads ``alpha`` as the suppressed fraction instead of the kept one.
    """
    if batch_features.dim() == 3:
        batch_features = batch_features.unsqueeze(0)
    keep = alpha if retention else 1.0 - alpha
    c = batch_features.shape[1]
    norms = channel_l1(batch_features)                 # (B, C)
    weak = suppressed_mask(norms.mean(0).detach(), keep)
    return (norms[:, weak].sum(dim=1) / ((1.0 - keep) * c)).mean()


@torch.no_grad()
def active_channels(model: TappedClassifier, bundle: NoiseBundle, alpha: float) -> float:
    """Mean count of channels at or above the proxy-set threshold, per sample."""
    model.eval()
    feats = torch.cat([model.features(x) for x, _ in bundle.batches()])
    norms = channel_l1(feats)
    thr = compute_threshold(norms.mean(0), alpha)
    return (norms >= thr).sum(1).float().mean().item()


def run_disentangle(model: TappedClassifier, forget_bundle: NoiseBundle, epochs: int, lr: float, alpha: float,
                    retention: bool = True, metrics: CsvLog | None = None) -> list[float]:
    """Gradient descent on the disentangle loss over every forget-proxy batch.

    Updates ``model`` in place (batch-norm statistics stay frozen) and returns
    the per-epoch mean loss.
    """
    if forget_bundle.target_split != "forget":
        raise ValueError("disentanglement runs on forget proxies")
    trace = []
    model.eval()
    params = [p for p in model.parameters()]
    step = 0
    for epoch in range(epochs):
        losses = []
        for x, _ in forget_bundle.batches():
            feats = model.features(x)
            loss = disentangle_loss(feats, alpha, retention)
            # NaN norms never compare below the threshold, so check the features too
            if not (torch.isfinite(loss) and torch.isfinite(feats).all()):
                raise DisentangleError(f"non-finite disentangle loss at epoch {epoch}")
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            with torch.no_grad():
                for p, g in zip(params, grads):
                    if g is not None:
                        p.sub_(lr * g)
            losses.append(loss.item())
            step += 1
        mean = sum(losses) / len(losses)
        trace.append(mean)
        if metrics is not None:
            metrics.append(phase="disentangle", step=epoch + 1, metric="loss", value=mean)
    return trace
