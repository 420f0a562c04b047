"""Datasets, incremental scenarios, herding, and the exemplar bank.

A scenario carves one immutable dataset into a sequence of disjoint-class
tasks. Training counts follow an exponential long-tail decay (or are flat),
test splits stay class-balanced regardless. Exemplars are kept as indices
into the dataset, never copies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .seeding import child_rng

SCENARIO_KINDS = ("ordered-long-tail", "shuffled-long-tail", "conventional")


@dataclass
class Dataset:
    samples: np.ndarray  # [N, in] float64
    labels: np.ndarray   # [N] int
    class_names: list[str] | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.samples) == 0:
            raise ValueError("dataset is empty")
        if len(self.samples) != len(self.labels):
            raise ValueError("samples and labels disagree in length")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def input_dim(self) -> int:
        return self.samples.shape[1]

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass
class ScenarioSpec:
    """Layout of an incremental run: base task plus num_tasks equal additions."""

    kind: str = "conventional"
    base_classes: int = 10
    new_classes_per_task: int = 2
    num_tasks: int = 5
    imbalance_ratio: float = 0.01
    max_per_class: int = 100
    test_per_class: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.kind == "conventional":
            self.imbalance_ratio = 1.0
        if not 0 < self.imbalance_ratio <= 1:
            raise ValueError("imbalance_ratio must lie in (0, 1]")
        if min(self.base_classes, self.max_per_class, self.test_per_class) < 1:
            raise ValueError("base_classes, max_per_class, test_per_class must be >= 1")
        if self.num_tasks < 0 or (self.num_tasks > 0 and self.new_classes_per_task < 1):
            raise ValueError("need new_classes_per_task >= 1 when num_tasks > 0")

    @property
    def total_classes(self) -> int:
        return self.base_classes + self.num_tasks * self.new_classes_per_task

    def class_ids_of_task(self, t: int) -> list[int]:
        if t == 0:
            return list(range(self.base_classes))
        start = self.base_classes + (t - 1) * self.new_classes_per_task
        return list(range(start, start + self.new_classes_per_task))


@dataclass
class TaskDataset:
    task_id: int
    class_ids: list[int]
    train_by_class: dict[int, np.ndarray]  # dataset indices per class
    test_by_class: dict[int, np.ndarray]

    def train_count(self, class_id: int) -> int:
        return len(self.train_by_class[class_id])

    def train_indices(self) -> np.ndarray:
        return np.concatenate([self.train_by_class[c] for c in self.class_ids])

    def test_indices(self) -> np.ndarray:
        return np.concatenate([self.test_by_class[c] for c in self.class_ids])


def long_tail_counts(num_classes: int, n_max: int, ratio: float) -> np.ndarray:
    """Per-class training counts decaying geometrically from n_max to n_max*ratio.

    counts[k] = max(1, round(n_max * ratio**(k / (K-1)))), so counts[0] is
    always n_max and the vector is non-increasing. ratio=1 gives a flat
    vector; a single class gets [n_max].
    """
    if num_classes < 1 or n_max < 1:
        raise ValueError("num_classes and n_max must be >= 1")
    if not 0 < ratio <= 1:
        raise ValueError(f"imbalance ratio must lie in (0, 1], got {ratio}")
    if num_classes == 1:
        return np.array([n_max])
    exponents = np.arange(num_classes) / (num_classes - 1)
    raw = n_max * ratio**exponents
    return np.maximum(1, np.floor(raw + 0.5).astype(int))  # round half up


def build_scenario(dataset: Dataset, spec: ScenarioSpec) -> list[TaskDataset]:
    """Split the dataset into spec.num_tasks+1 disjoint-class tasks.

    Ordered long-tail assigns the decaying counts in class-index order (so the
    base task holds the richest classes); shuffled permutes the count vector
    across classes with a seeded permutation; conventional is flat. Test sets
    take test_per_class samples from every class before train subsampling.
    """
    k_used = spec.total_classes
    if k_used > dataset.num_classes:
        raise ValueError(
            f"scenario needs {k_used} classes, dataset has {dataset.num_classes}"
        )
    counts = long_tail_counts(k_used, spec.max_per_class, spec.imbalance_ratio)
    if spec.kind == "shuffled-long-tail":
        perm = child_rng(spec.seed, "scenario-count-shuffle").permutation(k_used)
        counts = counts[perm]

    tasks = []
    for t in range(spec.num_tasks + 1):
        class_ids = spec.class_ids_of_task(t)
        train_by_class, test_by_class = {}, {}
        for c in class_ids:
            pool = dataset.indices_of(c)
            need = spec.test_per_class + int(counts[c])
            if len(pool) < need:
                raise ValueError(
                    f"class {c} has {len(pool)} samples, scenario needs {need}"
                )
            order = child_rng(spec.seed, f"scenario-class:{c}").permutation(len(pool))
            shuffled = pool[order]
            test_by_class[c] = np.sort(shuffled[: spec.test_per_class])
            train_by_class[c] = np.sort(
                shuffled[spec.test_per_class : spec.test_per_class + int(counts[c])]
            )
        tasks.append(TaskDataset(t, class_ids, train_by_class, test_by_class))
    return tasks


def herding_select(features: np.ndarray, m: int, normalize: bool = False) -> list[int]:
    """Greedy mean-matching selection of min(m, N) rows, in selection order.

    Step k picks the unused row whose inclusion brings the running mean of the
    selected features closest (L2) to the overall mean; ties go to the lowest
    index.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("features must be a non-empty [N, d] matrix")
    if m <= 0:
        return []
    if normalize:
        features = features / (np.linalg.norm(features, axis=1, keepdims=True) + 1e-12)
    mean = features.mean(axis=0)
    n = len(features)
    chosen: list[int] = []
    running_sum = np.zeros(features.shape[1])
    available = np.ones(n, dtype=bool)
    for k in range(1, min(m, n) + 1):
        candidate_means = (running_sum + features) / k
        dist = np.linalg.norm(mean - candidate_means, axis=1)
        dist[~available] = np.inf
        j = int(np.argmin(dist))
        chosen.append(j)
        running_sum += features[j]
        available[j] = False
    return chosen


@dataclass
class ExemplarBank:
    """Per-class herding-ranked caches of dataset indices, at most `capacity` each."""

    capacity: int
    by_class: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.by_class)

    def size(self) -> int:
        return sum(len(v) for v in self.by_class.values())


def update_exemplars(
    bank: ExemplarBank,
    dataset: Dataset,
    task: TaskDataset,
    extractor: nn.MlpFeatureExtractor,
    normalize: bool = False,
) -> ExemplarBank:
    """Fill the bank for the task's classes from current-extractor herding ranks."""
    if dataset.input_dim != extractor.input_dim:
        raise ValueError(
            f"dataset dim {dataset.input_dim} does not match extractor input "
            f"{extractor.input_dim}"
        )
    for c in task.class_ids:
        idx = task.train_by_class[c]
        feats = nn.forward(extractor, dataset.samples[idx])
        order = herding_select(feats, bank.capacity, normalize=normalize)
        bank.by_class[c] = idx[order]
    return bank


def make_synthetic_clusters(
    num_classes: int,
    dim: int,
    separation: float,
    within_std: float,
    n_per_class: int,
    seed: int,
) -> Dataset:
    """Isotropic Gaussian blobs with seeded means at pairwise distance
    >= separation * within_std."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    rng = np.random.default_rng(seed)
    min_dist = separation * within_std
    radius = max(min_dist * num_classes ** (1.0 / dim), 1.0)
    means: list[np.ndarray] = []
    for _ in range(8):  # widen the placement radius when rejection stalls
        means = []
        placed = True
        for _ in range(num_classes):
            for _ in range(200):
                candidate = rng.normal(0.0, radius, size=dim)
                if all(np.linalg.norm(candidate - m) >= min_dist for m in means):
                    means.append(candidate)
                    break
            else:
                placed = False
                break
        if placed:
            break
        radius *= 1.5
    else:
        raise ValueError(
            f"cannot place {num_classes} means at separation {separation} in dim {dim}"
        )
    samples = np.concatenate(
        [m + within_std * rng.standard_normal((n_per_class, dim)) for m in means]
    )
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(samples=samples, labels=labels)


def load_csv(path: str, delimiter: str = ",") -> Dataset:
    """Read `label, feature...` rows; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for i, row in enumerate(reader):
            row = [cell.strip() for cell in row if cell.strip() != ""]
            if not row:
                continue
            if i == 0:
                try:
                    float(row[0])
                except ValueError:
                    continue  # header
            rows.append(row)
    if not rows:
        raise ValueError(f"no data rows in {path}")
    labels = np.array([int(float(r[0])) for r in rows])
    samples = np.array([[float(v) for v in r[1:]] for r in rows])
    return Dataset(samples=samples, labels=labels)
