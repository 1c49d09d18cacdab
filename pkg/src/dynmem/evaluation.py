"""Accuracy, R-matrix construction, BWT/FWT and periodic validation probes.

The R-matrix has one row per evaluation checkpoint (base model, then after
each task's pure segment) and one column per task; backward and forward
transfer are averaged over the K-1 applicable tasks.
"""
from __future__ import annotations

import csv
import io

import numpy as np

from .data import TASKS
from .validation import ConfigError, ShapeError

R_ROWS = ("base", "after_A", "after_B", "after_C")

CSV_HEADER = ("step", "strategy", "seed", "task", "split", "metric", "value")


def accuracy(model, images, labels, batch_size=256):
    """Fraction of correct eval-mode predictions."""
    labels = np.asarray(labels).reshape(-1)
    if len(labels) == 0:
        raise ConfigError("accuracy needs a non-empty dataset")
    correct = 0
    for start in range(0, len(labels), batch_size):
        preds = model.predict(images[start : start + batch_size])
        correct += int(np.sum(preds == labels[start : start + batch_size]))
    return correct / len(labels)


def _check_rmatrix(R):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (len(R_ROWS), len(TASKS)):
        raise ShapeError(f"R-matrix must be {len(R_ROWS)}x{len(TASKS)}, got {R.shape}")
    return R


def bwt(R):
    """Mean over earlier tasks of (final accuracy - accuracy at the end of
    the task's own pure segment). Negative values quantify forgetting."""
    R = _check_rmatrix(R)
    final = R[-1]
    return float(np.mean([final[i] - R[1 + i, i] for i in range(len(TASKS) - 1)]))


def fwt(R, baseline):
    """Mean over later tasks of (accuracy just before the task's segment
    begins - the base model's accuracy on that task)."""
    R = _check_rmatrix(R)
    baseline = np.asarray(baseline, dtype=np.float64).reshape(-1)
    if baseline.shape != (len(TASKS),):
        raise ShapeError(f"baseline must have one entry per task, got {baseline.shape}")
    return float(np.mean([R[i, i] - baseline[i] for i in range(1, len(TASKS))]))


def probe_steps(total_steps, every=30):
    """Validation cadence: step 0, every `every` steps, and the final step."""
    steps = {0, total_steps}
    steps.update(range(every, total_steps, every))
    return sorted(steps)


def validation_probe(model, validation, step, strategy, seed):
    """One accuracy row per task on the validation split; never mutates state."""
    rows = []
    for task in TASKS:
        ds = validation.task_subset(task)
        rows.append({
            "step": step, "strategy": strategy, "seed": seed, "task": task,
            "split": "val", "metric": "accuracy",
            "value": accuracy(model, ds.images, ds.labels),
        })
    return rows


def rows_to_csv(rows):
    """Render metric rows into the canonical CSV (deterministic bytes)."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r[k] for k in CSV_HEADER])
    return buf.getvalue()


def read_metrics_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def aggregate(values):
    """Mean and sample standard deviation of the per-run values."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return mean, sd


def aggregate_summaries(summaries, metrics):
    """mean +/- sd across run summaries for each named scalar metric."""
    out = {}
    for m in metrics:
        vals = [s[m] for s in summaries if s.get(m) is not None]
        if not vals:
            out[m] = None
            continue
        mean, sd = aggregate(vals)
        out[m] = {"mean": mean, "sd": sd}
    return out
