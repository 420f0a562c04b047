"""Accuracy bookkeeping, group metrics, decision regions, result files.

The accuracy matrix holds Acc[t][n]: micro accuracy on the test data of
tasks 0..n measured after learning task t (lower triangular). The headline
number is the mean of its diagonal. Group metrics macro-average per-class
accuracies after splitting classes into a sample-rich and a sample-poor
half by training count.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset, TaskDataset


def evaluate(
    model: nn.Model,
    dataset: Dataset,
    tasks: list[TaskDataset],
) -> tuple[list[float], dict[int, float]]:
    """Argmax accuracy over all seen classes for every task prefix.

    Returns (prefix accuracies [acc on tasks 0..n for each n], per-class
    accuracy over the union of test sets).
    """
    covered = set(model.head.class_offsets)
    correct_cum, total_cum = 0, 0
    prefix_acc: list[float] = []
    per_class: dict[int, float] = {}
    for task in tasks:
        missing = [c for c in task.class_ids if c not in covered]
        if missing:
            raise ValueError(f"model has no classifier for classes {missing}")
        for c in task.class_ids:
            idx = task.test_by_class[c]
            pred = np.argmax(model.logits(dataset.samples[idx]), axis=1)
            hits = int((pred == dataset.labels[idx]).sum())
            per_class[c] = hits / len(idx)
            correct_cum += hits
            total_cum += len(idx)
        prefix_acc.append(correct_cum / total_cum)
    return prefix_acc, per_class


@dataclass
class AccuracyMatrix:
    """Lower-triangular accuracy grid over T+1 tasks; NaN marks unset cells."""

    num_stages: int
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.full((self.num_stages, self.num_stages), np.nan)

    def set_row(self, t: int, prefix_accuracies: list[float]) -> None:
        if len(prefix_accuracies) != t + 1:
            raise ValueError(f"row {t} needs {t + 1} entries")
        if any(not 0.0 <= a <= 1.0 for a in prefix_accuracies):
            raise ValueError(f"accuracies must lie in [0, 1], got {prefix_accuracies}")
        self.values[t, : t + 1] = prefix_accuracies

    def diagonal(self) -> np.ndarray:
        return np.diagonal(self.values).copy()


def average_incremental_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean of the per-stage accuracies on all classes seen so far."""
    diag = matrix.diagonal()
    if np.any(np.isnan(diag)):
        missing = np.flatnonzero(np.isnan(diag)).tolist()
        raise ValueError(f"accuracy matrix is missing diagonal entries {missing}")
    return float(diag.mean())


@dataclass
class GroupReport:
    long_classes: list[int]
    tail_classes: list[int]
    long_accuracy: float
    tail_accuracy: float
    all_accuracy: float


def group_accuracy(
    per_class_accuracy: dict[int, float],
    train_counts: dict[int, int],
) -> GroupReport:
    """Split classes by training count (richer half = long) and macro-average."""
    classes = sorted(per_class_accuracy)
    missing = [c for c in classes if c not in train_counts]
    if missing:
        raise ValueError(f"no training counts for classes {missing}")
    ranked = sorted(classes, key=lambda c: (-train_counts[c], c))
    cut = (len(ranked) + 1) // 2
    long_ids, tail_ids = ranked[:cut], ranked[cut:]

    def mean_acc(ids):
        return float(np.mean([per_class_accuracy[c] for c in ids])) if ids else float("nan")

    return GroupReport(
        long_classes=sorted(long_ids),
        tail_classes=sorted(tail_ids),
        long_accuracy=mean_acc(long_ids),
        tail_accuracy=mean_acc(tail_ids),
        all_accuracy=mean_acc(classes),
    )


def decision_region_grid(
    bank: nn.ClassifierBank,
    bounds: tuple[tuple[float, float], tuple[float, float]],
    resolution: int,
) -> np.ndarray:
    """Argmax class id on a resolution x resolution grid of 2D feature space.

    Cell [i, j] is the class at (x_i, y_j) with x varying over bounds[0] and
    y over bounds[1].
    """
    if bank.feature_dim != 2:
        raise ValueError("decision regions require 2D features")
    (x_min, x_max), (y_min, y_max) = bounds
    xs = np.linspace(x_min, x_max, resolution)
    ys = np.linspace(y_min, y_max, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    points = np.column_stack([gx.ravel(), gy.ravel()])
    pred = np.argmax(nn.logits(bank, points), axis=1)
    return pred.reshape(resolution, resolution)


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def write_accuracy_matrix_csv(path: Path, matrix: AccuracyMatrix) -> None:
    n = matrix.num_stages
    lines = ["task," + ",".join(f"upto_{j}" for j in range(n))]
    for t in range(n):
        cells = [
            _fmt(matrix.values[t, j]) if j <= t and not np.isnan(matrix.values[t, j]) else ""
            for j in range(n)
        ]
        lines.append(f"{t}," + ",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def read_accuracy_matrix_csv(path: Path) -> AccuracyMatrix:
    lines = path.read_text().strip().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    matrix = AccuracyMatrix(len(rows))
    for cells in rows:
        t = int(cells[0])
        acc = [float(v) for v in cells[1:] if v != ""]
        matrix.set_row(t, acc)
    return matrix


def write_region_csv(path: Path, grid: np.ndarray, bounds, resolution: int) -> None:
    (x_min, x_max), (y_min, y_max) = bounds
    xs = np.linspace(x_min, x_max, resolution)
    ys = np.linspace(y_min, y_max, resolution)
    lines = ["x,y,class"]
    for i in range(resolution):
        for j in range(resolution):
            lines.append(f"{_fmt(xs[i])},{_fmt(ys[j])},{int(grid[i, j])}")
    path.write_text("\n".join(lines) + "\n")


def persist_results(
    out_dir: str | Path,
    metadata: dict,
    matrix: AccuracyMatrix,
    group_reports: list[GroupReport],
    loss_curves: list[dict],
    region_grids: dict[int, tuple[np.ndarray, tuple, int]] | None = None,
) -> dict[str, Path]:
    """Write metrics.json, accuracy_matrix.csv and optional region CSVs.

    Output is byte-stable for a fixed seed except the timestamp field in
    metrics.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = dict(metadata)
    payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    payload["average_incremental_accuracy"] = average_incremental_accuracy(matrix)
    payload["diagonal_accuracy"] = [float(v) for v in matrix.diagonal()]
    payload["group_reports"] = [
        {
            "task": t,
            "long": rep.long_accuracy,
            "tail": rep.tail_accuracy,
            "all": rep.all_accuracy,
            "long_classes": rep.long_classes,
            "tail_classes": rep.tail_classes,
        }
        for t, rep in enumerate(group_reports)
    ]
    payload["loss_curves"] = loss_curves
    files = {}
    metrics_path = out / "metrics.json"
    metrics_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    files["metrics"] = metrics_path
    csv_path = out / "accuracy_matrix.csv"
    write_accuracy_matrix_csv(csv_path, matrix)
    files["accuracy_matrix"] = csv_path
    if region_grids:
        for t, (grid, bounds, resolution) in region_grids.items():
            p = out / f"regions_t{t}.csv"
            write_region_csv(p, grid, bounds, resolution)
            files[f"regions_t{t}"] = p
    return files
