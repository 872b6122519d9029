"""Comparison tables and figures built from persisted audit reports."""

from __future__ import annotations

import csv
import json
import math
import os
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import AuditReport

COLUMNS = (
    ("acc_Dr_test", "acc_Dr", "{:.2f}"),
    ("acc_Df_test", "acc_Df", "{:.2f}"),
    ("jsd", "JSD", "{:.4f}"),
    ("l2", "L2", "{:.4f}"),
    ("p_value", "p", "{:.3g}"),
    ("mia_Df", "MIA_Df", "{:.2f}"),
)
METHOD_ORDER = ("origin", "retrain", "neg_gradient", "random_label", "retain_finetune", "ours_unrepaired", "ours")


def seed_dirs(paths: Sequence[str | os.PathLike]) -> list[Path]:
    """Expand experiment dirs into their ``seed_*`` run dirs; run dirs pass through."""
    out = []
    for p in map(Path, paths):
        if (p / "audit").is_dir():
            out.append(p)
        else:
            out.extend(sorted(d for d in p.glob("seed_*") if (d / "audit").is_dir()))
    return out


def collect(paths: Sequence[str | os.PathLike]) -> dict[tuple[str, str], list[tuple[Path, AuditReport]]]:
    """(variant, method) -> [(report path, report)] across seeds."""
    groups: dict[tuple[str, str], list] = defaultdict(list)
    for d in seed_dirs(paths):
        for f in sorted((d / "audit").glob("*.json")):
            rep = AuditReport.load(f)
            groups[(rep.extra.get("variant", d.parent.name), rep.method)].append((f, rep))
    return dict(groups)


def _values(reports, key) -> list[float]:
    vals = [getattr(r, key) for _, r in reports]
    return [float(v) for v in vals if v is not None and not math.isnan(float(v))]


def format_cell(vals: list[float], fmt: str) -> str:
    if not vals:
        return "n/a"
    if len(vals) == 1:
        return fmt.format(vals[0])
    return f"{fmt.format(float(np.mean(vals)))}±{fmt.format(float(np.std(vals, ddof=1)))}"


def _sort_key(item):
    (variant, method), _ = item
    rank = METHOD_ORDER.index(method) if method in METHOD_ORDER else len(METHOD_ORDER)
    return (variant, rank, method)


def table_rows(paths: Sequence[str | os.PathLike]) -> list[dict]:
    rows = []
    for (variant, method), reps in sorted(collect(paths).items(), key=_sort_key):
        row = {"variant": variant, "method": method, "seeds": len(reps)}
        for key, label, fmt in COLUMNS:
            row[label] = format_cell(_values(reps, key), fmt)
        row["real_data"] = "yes" if any(r.extra.get("uses_real_data") for _, r in reps) else "no"
        row["sources"] = ";".join(str(p) for p, _ in reps)
        rows.append(row)
    return rows


def emit_tables(paths: Sequence[str | os.PathLike], out_dir: str | os.PathLike) -> tuple[Path, Path]:
    rows = table_rows(paths)
    if not rows:
        raise ValueError("no audit reports found under the given directories")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / "table.csv", out / "table.txt"
    fields = ["variant", "method", "seeds"] + [c[1] for c in COLUMNS] + ["real_data", "sources"]
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    shown = fields[:-1]
    widths = {f: max(len(f), *(len(str(r[f])) for r in rows)) for f in shown}
    lines = ["  ".join(f.ljust(widths[f]) for f in shown), "  ".join("-" * widths[f] for f in shown)]
    lines += ["  ".join(str(r[f]).ljust(widths[f]) for f in shown) for r in rows]
    txt_path.write_text("\n".join(lines) + "\n")
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# figures

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams.update({"svg.hashsalt": "zsfu", "path.simplify": False})
    return plt


def _save(fig, path: Path) -> None:
    # no Software/date metadata, so identical data gives identical bytes
    fig.savefig(path, dpi=100, metadata={"Software": None})


def emit_figures(paths: Sequence[str | os.PathLike], out_dir: str | os.PathLike) -> list[Path]:
    groups = collect(paths)
    if not groups:
        raise ValueError("no audit reports found under the given directories")
    plt = _pyplot()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    items = sorted(groups.items(), key=_sort_key)
    labels = [m if len({v for (v, _), _ in items}) == 1 else f"{v}/{m}" for (v, m), _ in items]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    for ax, (key, title) in zip(axes, [("jsd", "JSD to retrained"), ("l2", "L2 to retrained"),
                                       ("p_value", "t-test p vs retrained")]):
        means = [np.mean(_values(r, key)) if _values(r, key) else 0.0 for _, r in items]
        stds = [np.std(_values(r, key)) if len(_values(r, key)) > 1 else 0.0 for _, r in items]
        ax.bar(range(len(items)), means, yerr=stds, color="#4c72b0")
        ax.set_xticks(range(len(items)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    p = out / "similarity.png"
    _save(fig, p)
    plt.close(fig)
    written.append(p)

    before, after = [], []
    for d in seed_dirs(paths):
        f = d / "disentangle.json"
        if f.exists():
            info = json.loads(f.read_text())
            before += [v for v in info["non_target_acc_before"].values() if v == v]
            after += [v for v in info["non_target_acc_after"].values() if v == v]
    if before:
        fig, ax = plt.subplots(figsize=(4, 3.6))
        ax.boxplot([before, after])
        ax.set_xticks([1, 2])
        ax.set_xticklabels(["before", "after"])
        ax.set_ylabel("non-target class accuracy (%)")
        ax.set_title("disentanglement", fontsize=9)
        fig.tight_layout()
        p = out / "disentangle_box.png"
        _save(fig, p)
        plt.close(fig)
        written.append(p)
    return written
