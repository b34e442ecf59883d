"""Hard segmentation metrics and constraint-satisfaction reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ltnseg import autodiff as ad
from ltnseg.constraints import (FOREGROUND, ConstraintParams, connectedness_hard, nested_either,
                                sample_rng, volume_similarity_hard)

REPORT_COLUMNS = ("model", "fraction", "dice_mean", "dice_std", "connected_mean", "connected_std",
                  "nested_mean", "nested_std", "simvol_mean", "simvol_std")


def dice_per_class(pred_labels, true_labels, class_id):
    """2|P & T| / (|P| + |T|) for one class; 1.0 when both masks are empty."""
    p = np.asarray(pred_labels) == class_id
    t = np.asarray(true_labels) == class_id
    if p.shape != t.shape:
        raise ad.ShapeError("dice", p.shape, t.shape)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def mean_dice(pred_labels, true_labels, classes=FOREGROUND):
    return float(np.mean([dice_per_class(pred_labels, true_labels, c) for c in classes]))


def predict_labels(model, images, chunk=64):
    out = []
    with ad.no_grad():
        for start in range(0, len(images), chunk):
            probs = model.forward(images[start:start + chunk])
            out.append(np.argmax(probs.data, axis=1))
    return np.concatenate(out)


def sample_metrics(labels, params, sample_id=0):
    """(connected, nested, simvol) of one label grid."""
    rng = sample_rng(params.seed, sample_id, 0)
    return (connectedness_hard(labels, params), float(nested_either(labels, params, rng)),
            volume_similarity_hard(labels, params))


@dataclass
class ReportRow:
    model: str
    fraction: float
    dice_mean: float
    dice_std: float
    connected_mean: float
    connected_std: float
    nested_mean: float
    nested_std: float
    simvol_mean: float
    simvol_std: float


@dataclass
class ConstraintReport:
    rows: list = field(default_factory=list)
    fraction: float = 1.0

    def row(self, name):
        for r in self.rows:
            if r.model == name:
                return r
        raise KeyError(name)


def summarize(name, fraction, pred_labels, true_labels, params, sample_ids=None):
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if len(pred_labels) == 0:
        raise ValueError("empty dataset")
    ids = np.arange(len(pred_labels)) if sample_ids is None else np.asarray(sample_ids)
    dice, conn, nest, vol = [], [], [], []
    for sid, pred, true in zip(ids, pred_labels, true_labels):
        dice.append(mean_dice(pred, true))
        c, n, v = sample_metrics(pred, params, int(sid))
        conn.append(c)
        nest.append(n)
        vol.append(v)
    stats = []
    for values in (dice, conn, nest, vol):
        # fixed-order summation keeps statistics independent of sample order
        arr = np.sort(np.asarray(values, dtype=np.float64))
        stats += [float(arr.mean()), float(arr.std())]
    return ReportRow(name, float(fraction), *stats)


def constraint_report(predictions, true_labels, params=None, fraction=1.0, sample_ids=None):
    """Table-style report: one row per model plus a leading ground-truth row.

    ``predictions`` maps model names to predicted label grids ``(N, *spatial)``.
    """
    params = params or ConstraintParams()
    true_labels = np.asarray(true_labels)
    if len(true_labels) == 0:
        raise ValueError("empty dataset")
    rows = [summarize("Ground Truth", fraction, true_labels, true_labels, params, sample_ids)]
    for name, pred in predictions.items():
        rows.append(summarize(name, fraction, pred, true_labels, params, sample_ids))
    return ConstraintReport(rows, float(fraction))


def report_from_models(models, images, true_labels, params=None, fraction=1.0, sample_ids=None):
    preds = {name: predict_labels(m, images) for name, m in models.items()}
    return constraint_report(preds, true_labels, params, fraction, sample_ids)


# -- emission ---------------------------------------------------------------

def format_table(report):
    header = f"{'Model':<16} {'Dice':>17} {'Connected (up)':>17} {'Nested (down)':>17} {'SimVol (up)':>17}"
    lines = [header, "-" * len(header)]
    for r in report.rows:
        cells = [f"{m:.4f} ± {s:.4f}" for m, s in ((r.dice_mean, r.dice_std), (r.connected_mean, r.connected_std),
                                                  (r.nested_mean, r.nested_std), (r.simvol_mean, r.simvol_std))]
        lines.append(f"{r.model:<16} " + " ".join(f"{c:>17}" for c in cells))
    return "\n".join(lines)


def emit_report(report, path, fmt="csv"):
    path = Path(path)
    rows = [asdict(r) for r in report.rows]
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    elif fmt == "json":
        path.write_text(json.dumps({"columns": list(REPORT_COLUMNS), "fraction": report.fraction, "rows": rows},
                                   indent=2))
    elif fmt in ("text", "text-table"):
        path.write_text(format_table(report) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report(path):
    path = Path(path)
    if path.suffix == ".json":
        payload = json.loads(path.read_text())
        return ConstraintReport([ReportRow(**r) for r in payload["rows"]], payload["fraction"])
    with path.open(newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(ReportRow(rec["model"], *(float(rec[c]) for c in REPORT_COLUMNS[1:])))
    return ConstraintReport(rows, rows[0].fraction if rows else 1.0)
