"""Plot-ready CSV tables, a text summary and minimal SVG charts from an evaluation report."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .experiment import CONDITIONS, accuracy_by_score_bin
from .metrics import SCALAR_METRICS
from .stats import significance_stars

# Bins are centred on each risk threshold so the middle bin straddles it.
DEFAULT_BIN_EDGES = {
    "sdq": (0, 10, 14, 18, 22, 40),
    "insomnia": (0, 8, 13, 20, 25, 32),
    "suicidal": (0, 1, 2, 3),
    "eating": (0.0, 1.5, 2.2, 3.2, 4.0, 6.0),
}


def load_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("v") != 1 or "outcomes" not in doc:
        raise ValueError(f"{path} is not an evaluation report")
    return doc


def dump_json(doc, path) -> Path:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else v for v in row])
    return path


def _conditions(doc: dict, outcome: str) -> list[str]:
    present = doc["outcomes"][outcome]
    return [c for c in CONDITIONS if c in present] + sorted(c for c in present if c not in CONDITIONS)


def score_bin_table(doc: dict, bin_edges: dict | None = None, condition: str = "combined") -> list[dict]:
    """Per-bin accuracy pooled over repetitions."""
    edges_by_outcome = {**DEFAULT_BIN_EDGES, **(bin_edges or {})}
    rows = []
    for outcome in sorted(doc["outcomes"]):
        entry = doc["outcomes"][outcome].get(condition)
        if entry is None or outcome not in edges_by_outcome:
            continue
        probs = np.array(entry["probabilities"], dtype=float)
        reps = probs.shape[1]
        preds = (probs >= 0.5).T.ravel()
        labels = np.tile(np.array(entry["labels"], dtype=int), reps)
        scores = np.tile(np.array(entry["scores"], dtype=float), reps)
        for b in accuracy_by_score_bin(preds, labels, scores, edges_by_outcome[outcome]):
            rows.append({"outcome": outcome, "condition": condition, **b})
    return rows


def write_tables(doc: dict, out_dir, svg: bool = False, bin_edges: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    per_rep, summary, confusion = [], [], []
    for outcome in sorted(doc["outcomes"]):
        for cond in _conditions(doc, outcome):
            entry = doc["outcomes"][outcome][cond]
            for r, bundle in enumerate(entry["repetitions"]):
                per_rep.append([outcome, cond, r] + [bundle[m] for m in SCALAR_METRICS])
                cm = bundle["confusion"]
                confusion.append([outcome, cond, r, cm["tp"], cm["tn"], cm["fp"], cm["fn"]])
            for m in SCALAR_METRICS:
                s = entry["summary"][m]
                summary.append([outcome, cond, m, s["mean"], s["sd"]])
    written.append(_write_csv(out / "metrics.csv", ["outcome", "condition", "repetition", *SCALAR_METRICS], per_rep))
    written.append(_write_csv(out / "summary.csv", ["outcome", "condition", "metric", "mean", "sd"], summary))
    written.append(_write_csv(out / "confusion.csv", ["outcome", "condition", "repetition", "tp", "tn", "fp", "fn"], confusion))
    if doc.get("comparisons"):
        keys = ["outcome", "condition_a", "condition_b", "mean_a", "sd_a", "mean_b", "sd_b", "p", "note"]
        written.append(_write_csv(out / "comparisons.csv", keys, [[row.get(k) for k in keys] for row in doc["comparisons"]]))
    cond = "combined" if any("combined" in v for v in doc["outcomes"].values()) else None
    if cond:
        bins = score_bin_table(doc, bin_edges, cond)
        keys = ["outcome", "condition", "low", "high", "n", "accuracy"]
        written.append(_write_csv(out / "score_bins.csv", keys, [[b[k] for k in keys] for b in bins]))
    summary_path = out / "summary.txt"
    summary_path.write_text(summary_text(doc))
    written.append(summary_path)
    if svg:
        written.append(write_bar_svg(doc, out / "balanced_accuracy.svg"))
    return written


def _fmt(mean, sd) -> str:
    if mean is None:
        return "  n/a    "
    return f"{mean:.2f} ± {sd:.2f}"


def summary_text(doc: dict) -> str:
    lines = ["Balanced accuracy and related metrics (mean ± SD over repetitions)", ""]
    show = ("balanced_accuracy", "auc", "auc_pr", "f1_macro", "sensitivity", "specificity", "precision")
    head = f"{'outcome':<10} {'condition':<10} " + " ".join(f"{m[:12]:>13}" for m in show)
    lines.append(head)
    lines.append("-" * len(head))
    for outcome in sorted(doc["outcomes"]):
        for cond in _conditions(doc, outcome):
            s = doc["outcomes"][outcome][cond]["summary"]
            cells = " ".join(f"{_fmt(s[m]['mean'], s[m]['sd']):>13}" for m in show)
            lines.append(f"{outcome:<10} {cond:<10} {cells}")
    if doc.get("comparisons"):
        lines += ["", "Pairwise Wilcoxon signed-rank tests on balanced accuracy", ""]
        for row in doc["comparisons"]:
            p = row.get("p")
            ptxt = f"p={p:.4f} {significance_stars(p)}" if p is not None else f"({row.get('note')})"
            lines.append(
                f"{row['outcome']:<10} {row['condition_a']} {row['mean_a']:.3f} vs "
                f"{row['condition_b']} {row['mean_b']:.3f}  {ptxt}".rstrip()
            )
    lines.append("")
    lines.append("* p < .05, ** p < .01, *** p < .001")
    return "\n".join(lines) + "\n"


def write_bar_svg(doc: dict, path, metric: str = "balanced_accuracy") -> Path:
    """Grouped bars (one group per outcome, one bar per condition) with SD whiskers."""
    outcomes = sorted(doc["outcomes"])
    conds = sorted({c for o in outcomes for c in doc["outcomes"][o]}, key=lambda c: (c not in CONDITIONS, CONDITIONS.index(c) if c in CONDITIONS else 0, c))
    colours = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"]
    bar_w, gap, left, top, height = 22, 18, 50, 20, 200
    width = left + len(outcomes) * (len(conds) * bar_w + gap) + 140
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 70}" font-family="sans-serif" font-size="11">',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + height}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + height}" x2="{width - 140}" y2="{top + height}" stroke="black"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = top + height * (1 - tick)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{tick:.2f}</text>')
    x = left + gap / 2
    for o in outcomes:
        for k, c in enumerate(conds):
            s = doc["outcomes"][o].get(c, {}).get("summary", {}).get(metric)
            if s and s["mean"] is not None:
                h = height * s["mean"]
                parts.append(
                    f'<rect x="{x:.1f}" y="{top + height - h:.1f}" width="{bar_w - 2}" height="{h:.1f}" fill="{colours[k % len(colours)]}"/>'
                )
                y1, y2 = top + height * (1 - s["mean"] - s["sd"]), top + height * (1 - s["mean"] + s["sd"])
                cx = x + (bar_w - 2) / 2
                parts.append(f'<line x1="{cx:.1f}" y1="{y1:.1f}" x2="{cx:.1f}" y2="{y2:.1f}" stroke="black"/>')
            x += bar_w
        parts.append(f'<text x="{x - len(conds) * bar_w / 2:.1f}" y="{top + height + 16}" text-anchor="middle">{escape(o)}</text>')
        x += gap
    for k, c in enumerate(conds):
        y = top + 14 * k
        parts.append(f'<rect x="{width - 130}" y="{y}" width="10" height="10" fill="{colours[k % len(colours)]}"/>')
        parts.append(f'<text x="{width - 115}" y="{y + 9}">{escape(c)}</text>')
    parts.append(f'<text x="{left}" y="{top + height + 40}">{escape(metric.replace("_", " "))}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
