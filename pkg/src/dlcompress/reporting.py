"""Report writers: CSV exports with full-scale context anchors.

The desk-scale pipelines mirror published full-scale results that are
not reproducible here; those reference points ride along in every
report so trade-off curves can be read against them.
"""

from __future__ import annotations

import csv
import json
import os
from typing import Iterable

#: published full-scale reference points (not desk-reproducible)
CONTEXT_ANCHORS = {
    "structured_pruning": {
        "setup": "AlexNet on Flowers-102, transfer-learned, globally pruned",
        "accuracy": 0.698,
        "reference_accuracy": 0.819,
        "nps": 2.03e6,
        "gflops": 0.47,
        "mmacs": 237,
    },
    "unstructured_pruning": {
        "setup": "ResNet56 on CIFAR10, 10 rounds",
        "test_error": 0.066,
        "weights_pruned_fraction": 0.83,
    },
    "mixed_precision": {
        "setup": "ResNet20 on CIFAR10, 5 coarse iterations + training",
        "accuracy": 0.912,
        "weight_cb": 79,
        "act_cb": 79,
    },
}


def anchor_comment_lines(kind: str) -> list[str]:
    anchor = CONTEXT_ANCHORS[kind]
    return [
        f"# context anchor (full-scale, not desk-reproducible): "
        + ", ".join(f"{k}={v}" for k, v in anchor.items())
    ]


def write_csv(path, rows: Iterable[dict], anchor_kind: str | None = None) -> None:
    """CSV with optional '#' anchor comment lines before the header."""
    rows = list(rows)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        if anchor_kind is not None:
            for line in anchor_comment_lines(anchor_kind):
                f.write(line + "\n")
        if not rows:
            return
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path) as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))


def write_json(path, payload: dict, anchor_kind: str | None = None) -> None:
    if anchor_kind is not None:
        payload = dict(payload, context_anchor=CONTEXT_ANCHORS[anchor_kind])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# curve exports
# ---------------------------------------------------------------------------

def export_curves(reports: dict[str, list[dict]], out_dir) -> list[str]:
    """Merge labeled report row-lists into plot-ready curve CSVs.

    ``reports`` maps a series label (e.g. "dlp", "l1") to rows that carry
    any of: prune_amount, accuracy, nps, macs, bits, per-class columns.
    One CSV per available x-axis is written into ``out_dir``.
    """
    if not reports:
        raise ValueError("need at least one report")
    axes = {
        "accuracy_vs_prune_amount.csv": "prune_amount",
        "accuracy_vs_nps.csv": "nps",
        "accuracy_vs_macs.csv": "macs",
        "accuracy_vs_bits.csv": "bits",
    }
    written = []
    for fname, x_col in axes.items():
        merged = []
        for series, rows in reports.items():
            for row in rows:
                if x_col in row and "accuracy" in row:
                    merged.append({"series": series, x_col: row[x_col],
                                   "accuracy": row["accuracy"]})
        if merged:
            path = os.path.join(out_dir, fname)
            write_csv(path, merged)
            written.append(path)
    per_class = []
    for series, rows in reports.items():
        for row in rows:
            cls_cols = {k: v for k, v in row.items() if k.startswith("class_")}
            if cls_cols:
                per_class.append({"series": series, **cls_cols})
    if per_class:
        path = os.path.join(out_dir, "per_class_accuracy.csv")
        write_csv(path, per_class)
        written.append(path)
    return written
