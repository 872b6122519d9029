"""Audit metrics: split accuracy, output similarity to an oracle model, t-test and membership inference."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import stats

from .data import ImageSet
from .noise import frozen

EVAL_BATCH = 1000


@torch.no_grad()
def predict_logits(model: nn.Module, data: ImageSet, batch_size: int = EVAL_BATCH) -> torch.Tensor:
    with frozen(model):
        chunks = [model(data.x[s:s + batch_size]) for s in range(0, len(data), batch_size)]
    if not chunks:
        return torch.empty(0, 0)
    return torch.cat(chunks)


def predict_probs(model: nn.Module, data: ImageSet) -> torch.Tensor:
    return torch.softmax(predict_logits(model, data).double(), dim=1)


def _acc(pred: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        return math.nan
    return (pred == y).double().mean().item() * 100.0


def split_accuracy(model: nn.Module, data: ImageSet, forget_classes: Iterable[int]) -> tuple[float, float]:
    """Top-1 accuracy (percent) on retained-class and forgotten-class samples.

    A split with no samples is reported as nan rather than 0.
    """
    forget = data.class_mask(forget_classes)
    pred = predict_logits(model, data).argmax(1) if len(data) else data.y
    return _acc(pred[~forget], data.y[~forget]), _acc(pred[forget], data.y[forget])


# ---------------------------------------------------------------------------
# output similarity

def jsd_rows(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Per-row Jensen-Shannon divergence in nats; 0 * log 0 is taken as 0."""
    m = 0.5 * (p + q)

    def kl(a, b):
        return torch.where(a > 0, a * (torch.log(a) - torch.log(b.clamp_min(1e-300))), torch.zeros_like(a)).sum(1)

    return (0.5 * kl(p, m) + 0.5 * kl(q, m)).clamp_min(0.0)


def jsd(model_a: nn.Module, model_b: nn.Module, data: ImageSet) -> float:
    return jsd_rows(predict_probs(model_a, data), predict_probs(model_b, data)).mean().item()


def l2_outputs(model_a: nn.Module, model_b: nn.Module, data: ImageSet) -> float:
    diff = predict_probs(model_a, data) - predict_probs(model_b, data)
    return torch.linalg.vector_norm(diff, dim=1).mean().item()


# ---------------------------------------------------------------------------
# t-test

@dataclass
class TTestResult:
    p_value: float
    statistic: float
    degenerate: bool = False   # both samples had zero variance


def ttest_samples(a, b) -> TTestResult:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("t-test needs at least two samples per group")
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        return TTestResult(1.0 if a[0] == b[0] else 0.0, 0.0 if a[0] == b[0] else math.inf, True)
    res = stats.ttest_ind(a, b)
    if not np.isfinite(res.pvalue):
        # subnormal spreads underflow the pooled variance; fall back to the constant-sample rule
        same = a.mean() == b.mean()
        return TTestResult(1.0 if same else 0.0, 0.0 if same else math.inf, True)
    return TTestResult(float(np.clip(res.pvalue, 0.0, 1.0)), float(res.statistic))


def confidence_scores(model: nn.Module, data: ImageSet, statistic: str = "max_confidence") -> np.ndarray:
    probs = predict_probs(model, data)
    if statistic == "max_confidence":
        return probs.max(1).values.numpy()
    if statistic == "loss":
        return -torch.log(probs.gather(1, data.y[:, None]).squeeze(1).clamp_min(1e-300)).numpy()
    raise ValueError(f"unknown t-test statistic {statistic!r}")


def ttest_pvalue(model_a: nn.Module, model_b: nn.Module, data: ImageSet,
                 statistic: str = "max_confidence") -> TTestResult:
    return ttest_samples(confidence_scores(model_a, data, statistic), confidence_scores(model_b, data, statistic))


# ---------------------------------------------------------------------------
# membership inference

def per_sample_loss(model: nn.Module, data: ImageSet) -> np.ndarray:
    logits = predict_logits(model, data).double()
    return F.cross_entropy(logits, data.y, reduction="none").numpy()


def best_threshold(member_loss: np.ndarray, nonmember_loss: np.ndarray) -> float:
    """Threshold t maximizing balanced accuracy of the rule "loss <= t means member"."""
    cands = np.unique(np.concatenate([member_loss, nonmember_loss]))
    m = np.sort(member_loss)
    n = np.sort(nonmember_loss)
    tpr = np.searchsorted(m, cands, side="right") / len(m)
    tnr = 1.0 - np.searchsorted(n, cands, side="right") / len(n)
    bal = 0.5 * (tpr + tnr)
    # the "nobody is a member" rule scores exactly 0.5
    i = int(np.argmax(bal))
    if bal[i] <= 0.5:
        return -math.inf
    # midpoint to the next observed loss generalizes better to held-out samples
    return float(0.5 * (cands[i] + cands[i + 1])) if i + 1 < len(cands) else float(cands[i])


def balanced_attack_accuracy(member_loss: np.ndarray, nonmember_loss: np.ndarray, threshold: float) -> float:
    return 50.0 * (np.mean(member_loss <= threshold) + np.mean(nonmember_loss > threshold))


def mia_from_losses(member_loss, nonmember_loss, repeats: int = 10, seed: int = 0) -> float:
    """Loss-threshold attack, averaged over random calibration/evaluation halves.

    Both groups are first subsampled to the same size. Each repeat fits the
    threshold on one half and scores balanced accuracy on the other.
    """
    member_loss = np.asarray(member_loss, dtype=np.float64)
    nonmember_loss = np.asarray(nonmember_loss, dtype=np.float64)
    n = min(len(member_loss), len(nonmember_loss))
    if n < 4:
        raise ValueError("membership inference needs at least 4 samples in each group")
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(repeats):
        mem = rng.permutation(member_loss)[:n]
        non = rng.permutation(nonmember_loss)[:n]
        half = n // 2
        thr = best_threshold(mem[:half], non[:half])
        scores.append(balanced_attack_accuracy(mem[half:], non[half:], thr))
    return float(np.mean(scores))


def mia_success(model: nn.Module, members: ImageSet, nonmembers: ImageSet, repeats: int = 10, seed: int = 0) -> float:
    if len(members) == 0 or len(nonmembers) == 0:
        raise ValueError("membership inference needs members and non-members")
    m_cls, n_cls = set(members.y.unique().tolist()), set(nonmembers.y.unique().tolist())
    if m_cls != n_cls:
        raise ValueError(f"member classes {sorted(m_cls)} and non-member classes {sorted(n_cls)} differ")
    return mia_from_losses(per_sample_loss(model, members), per_sample_loss(model, nonmembers), repeats, seed)


# ---------------------------------------------------------------------------
# report

@dataclass
class AuditReport:
    method: str
    acc_Dr_train: float
    acc_Df_train: float
    acc_Dr_test: float
    acc_Df_test: float
    jsd: float | None = None
    l2: float | None = None
    p_value: float | None = None           # against the retrained oracle
    p_value_origin: float | None = None    # against the pre-unlearning model
    mia_Dr: float | None = None
    mia_Df: float | None = None
    extra: dict = field(default_factory=dict)

    def check(self) -> None:
        for k in ("acc_Dr_train", "acc_Df_train", "acc_Dr_test", "acc_Df_test", "mia_Dr", "mia_Df"):
            v = getattr(self, k)
            if v is not None and not math.isnan(v) and not 0.0 <= v <= 100.0:
                raise ValueError(f"{k}={v} is not a percentage")
        for k in ("jsd", "l2"):
            v = getattr(self, k)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ValueError(f"{k}={v} must be finite and non-negative")
        for k in ("p_value", "p_value_origin"):
            v = getattr(self, k)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")

    def flat(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update({f"extra.{k}": v for k, v in extra.items()})
        return d

    def save(self, path: str | os.PathLike) -> None:
        self.check()
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=1, allow_nan=True))
        row = self.flat()
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "AuditReport":
        return cls(**json.loads(Path(path).read_text()))


def audit(model: nn.Module, method: str, train: ImageSet, test: ImageSet, forget_classes: Iterable[int],
          oracle: nn.Module | None = None, origin: nn.Module | None = None, mia_repeats: int = 10,
          seed: int = 0, ttest_statistic: str = "max_confidence") -> AuditReport:
    """Every metric for one model; similarity metrics need the retrained ``oracle``."""
    forget_classes = sorted(set(int(c) for c in forget_classes))
    dr_tr, df_tr = split_accuracy(model, train, forget_classes)
    dr_te, df_te = split_accuracy(model, test, forget_classes)
    rep = AuditReport(method, dr_tr, df_tr, dr_te, df_te)
    if oracle is not None:
        rep.jsd = jsd(model, oracle, test)
        rep.l2 = l2_outputs(model, oracle, test)
        rep.p_value = ttest_pvalue(model, oracle, test, ttest_statistic).p_value
    if origin is not None:
        rep.p_value_origin = ttest_pvalue(model, origin, test, ttest_statistic).p_value
    fm_tr, fm_te = train.class_mask(forget_classes), test.class_mask(forget_classes)
    if fm_tr.any() and fm_te.any():
        rep.mia_Df = mia_success(model, train.subset(fm_tr.nonzero().flatten()),
                                 test.subset(fm_te.nonzero().flatten()), mia_repeats, seed)
    if (~fm_tr).any() and (~fm_te).any():
        rep.mia_Dr = mia_success(model, train.subset((~fm_tr).nonzero().flatten()),
                                 test.subset((~fm_te).nonzero().flatten()), mia_repeats, seed)
    rep.check()
    return rep
