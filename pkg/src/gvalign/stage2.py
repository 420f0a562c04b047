"""Stage 2: global-variance-driven classifier alignment, and the per-task loop.

After stage 1, class prototypes are recomputed from the pooled task +
exemplar data. The covariance of the most-populated base-task class (fixed
at task 0, in feature space) is shared by every class: alignment retrains
only the classifier heads on Gaussian pseudo-features drawn around each
prototype with that covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, nn
from .data import Dataset, ExemplarBank, TaskDataset, update_exemplars
from .seeding import child_rng
from .stage1 import FrozenTeacher, Stage1Config, one_hot, stage1_train


@dataclass
class ProtoBank:
    """Mean feature vector and sample count per class seen so far."""

    prototypes: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)


@dataclass
class GlobalVariance:
    """Shared feature covariance with its sampling factorization."""

    sigma: np.ndarray       # [d, d] symmetric
    cholesky: np.ndarray    # lower triangular, L L^T = sigma + jitter * I
    jitter: float
    source_class: int
    source_count: int
    source_mean: np.ndarray


@dataclass
class AlignConfig:
    learning_rate: float = 0.1
    epochs: int = 100
    samples_per_class: int = 64
    batch_size: int = 128

    def __post_init__(self):
        if min(self.learning_rate, self.epochs, self.samples_per_class, self.batch_size) <= 0:
            raise ValueError("all alignment settings must be positive")


def compute_prototypes(
    extractor: nn.MlpFeatureExtractor,
    dataset: Dataset,
    indices_by_class: dict[int, np.ndarray],
) -> ProtoBank:
    """Per-class feature means over the pooled task + exemplar indices."""
    bank = ProtoBank()
    for c in sorted(indices_by_class):
        idx = np.asarray(indices_by_class[c])
        if len(idx) == 0:
            raise ValueError(f"class {c} has no samples in the prototype pool")
        feats = nn.forward(extractor, dataset.samples[idx])
        bank.prototypes[c] = feats.mean(axis=0)
        bank.counts[c] = len(idx)
    return bank


def estimate_global_variance(
    extractor: nn.MlpFeatureExtractor,
    dataset: Dataset,
    base_task: TaskDataset,
) -> GlobalVariance:
    """Unbiased feature covariance of the base task's most-populated class.

    Ties go to the lowest class id. The stored Cholesky factor is of
    sigma + eps*I with eps = 1e-6 * trace(sigma) / d (1e-12 for a zero
    trace) so sampling stays defined for rank-deficient covariances.
    """
    if base_task.task_id != 0:
        raise ValueError("global variance is estimated on the base task only")
    source = max(base_task.class_ids, key=lambda c: (base_task.train_count(c), -c))
    idx = base_task.train_by_class[source]
    if len(idx) < 2:
        raise ValueError("cannot estimate covariance from fewer than 2 samples")
    feats = nn.forward(extractor, dataset.samples[idx])
    mean = feats.mean(axis=0)
    centered = feats - mean
    sigma = centered.T @ centered / (len(idx) - 1)
    sigma = (sigma + sigma.T) / 2.0
    d = sigma.shape[0]
    trace = float(np.trace(sigma))
    jitter = 1e-6 * trace / d if trace > 0 else 1e-12
    factor = np.linalg.cholesky(sigma + jitter * np.eye(d))
    return GlobalVariance(
        sigma=sigma,
        cholesky=factor,
        jitter=jitter,
        source_class=int(source),
        source_count=len(idx),
        source_mean=mean,
    )


def sample_pseudo_features(
    prototype: np.ndarray,
    gv: GlobalVariance,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw n feature vectors from N(prototype, sigma) via the stored factor.

    A zero covariance short-circuits to exact copies of the prototype (the
    jitter only exists to keep the factorization defined).
    """
    d = len(prototype)
    if d != gv.sigma.shape[0]:
        raise ValueError(
            f"prototype dim {d} does not match covariance dim {gv.sigma.shape[0]}"
        )
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return np.zeros((0, d))
    if not gv.sigma.any():
        return np.tile(prototype, (n, 1))
    z = rng.standard_normal((n, d))
    return prototype + z @ gv.cholesky.T


def align_classifiers(
    bank: nn.ClassifierBank,
    protos: ProtoBank,
    gv: GlobalVariance,
    cfg: AlignConfig,
    rng: np.random.Generator,
) -> list[float]:
    """Fine-tune the head blocks only, on fresh pseudo-features each epoch.

    Works purely in feature space; the extractor is never touched. Returns
    the per-epoch mean cross-entropy, bank updated in place.
    """
    class_ids = protos.classes
    if class_ids != sorted(bank.class_offsets):
        raise ValueError(
            f"prototype classes {class_ids} do not match head classes "
            f"{sorted(bank.class_offsets)}"
        )
    k = bank.num_classes
    curve = []
    for epoch in range(cfg.epochs):
        feats = np.concatenate(
            [
                sample_pseudo_features(protos.prototypes[c], gv, cfg.samples_per_class, rng)
                for c in class_ids
            ]
        )
        labels = np.repeat(class_ids, cfg.samples_per_class)
        order = rng.permutation(len(feats))
        targets = one_hot(labels[order], k)
        feats = feats[order]
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(feats), cfg.batch_size):
            xb = feats[start : start + cfg.batch_size]
            yb = targets[start : start + cfg.batch_size]
            lg = nn.logits(bank, xb)
            loss, grad = nn.cross_entropy(lg, yb)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite alignment loss at epoch {epoch}")
            grad_w, grad_b, _ = nn.head_gradients(bank, xb, grad)
            for w, gw in zip(bank.weights, grad_w):
                w -= cfg.learning_rate * gw
            for b, gb in zip(bank.biases, grad_b):
                b -= cfg.learning_rate * gb
            epoch_loss += loss
            batches += 1
        curve.append(epoch_loss / batches)
    return curve


@dataclass
class IncrementalState:
    """Mutable cross-task state owned by the experiment loop."""

    exemplars: ExemplarBank
    prototypes: ProtoBank | None = None
    global_variance: GlobalVariance | None = None
    train_counts: dict[int, int] = field(default_factory=dict)
    next_task: int = 0


@dataclass
class TaskResult:
    task_id: int
    prefix_accuracy: list[float]  # accuracy over tasks 0..n for n = 0..t
    per_class_accuracy: dict[int, float]
    stage1_losses: list[float]
    stage2_losses: list[float] | None


def run_task(
    model: nn.Model,
    dataset: Dataset,
    eval_tasks: list[TaskDataset],
    state: IncrementalState,
    stage1_cfg: Stage1Config,
    align_cfg: AlignConfig,
    seed: int,
    align: bool = True,
    herding_normalize: bool = False,
) -> TaskResult:
    """One full incremental step on task eval_tasks[-1].

    Sequence: snapshot teacher, append head block, stage-1 training on the
    task + exemplar pool, prototypes, (base task only) global variance,
    classifier alignment, exemplar update, evaluation over all seen tasks.
    Ablations pass align=False to stop after stage 1.
    """
    task = eval_tasks[-1]
    if task.task_id != state.next_task:
        raise RuntimeError(
            f"tasks must be presented in order: expected {state.next_task}, "
            f"got {task.task_id}"
        )
    t = task.task_id

    teacher = None
    if stage1_cfg.incremental_loss == "ce+distill" and t >= 1:
        teacher = FrozenTeacher(model.copy(), stage1_cfg.temperature)

    model.head.append_block(
        task.class_ids, model.extractor.feature_dim, child_rng(seed, f"head-init:{t}")
    )

    pool_by_class = {c: task.train_by_class[c] for c in task.class_ids}
    for c, idx in state.exemplars.by_class.items():
        pool_by_class[c] = idx
    pool_idx = np.concatenate([pool_by_class[c] for c in sorted(pool_by_class)])
    x, labels = dataset.samples[pool_idx], dataset.labels[pool_idx]

    stage1_losses = stage1_train(
        model,
        x,
        labels,
        stage1_cfg,
        rng_batch=child_rng(seed, f"stage1-batch:{t}"),
        rng_mix=child_rng(seed, f"stage1-mixup:{t}"),
        teacher=teacher,
        new_class_ids=task.class_ids,
    )

    stage2_losses = None
    if align:
        state.prototypes = compute_prototypes(model.extractor, dataset, pool_by_class)
        if t == 0:
            state.global_variance = estimate_global_variance(
                model.extractor, dataset, task
            )
        stage2_losses = align_classifiers(
            model.head,
            state.prototypes,
            state.global_variance,
            align_cfg,
            child_rng(seed, f"stage2:{t}"),
        )

    update_exemplars(
        state.exemplars, dataset, task, model.extractor, normalize=herding_normalize
    )
    for c in task.class_ids:
        state.train_counts[c] = task.train_count(c)
    state.next_task += 1

    prefix_acc, per_class = metrics.evaluate(model, dataset, eval_tasks)
    return TaskResult(
        task_id=t,
        prefix_accuracy=prefix_acc,
        per_class_accuracy=per_class,
        stage1_losses=stage1_losses,
        stage2_losses=stage2_losses,
    )
