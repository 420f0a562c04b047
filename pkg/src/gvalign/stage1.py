"""Stage 1: robust feature learning.

Each mini-batch from the combined new-task + exemplar pool contributes two
loss terms that are simply added before one SGD step: the incremental loss
(plain cross-entropy, optionally plus distillation against a frozen copy of
the previous-task model) and a mixup cross-entropy on convex combinations of
the batch with a permuted copy of itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

INCREMENTAL_LOSSES = ("ce", "ce+distill")


@dataclass
class MixupConfig:
    enabled: bool = True
    new_only: bool = False  # restrict mixing partners to current-task samples


@dataclass
class FrozenTeacher:
    """Snapshot of the model at the end of the previous task, for distillation."""

    model: nn.Model
    temperature: float = 2.0

    @property
    def num_classes(self) -> int:
        return self.model.num_classes


@dataclass
class Stage1Config:
    sgd: nn.SgdConfig = field(default_factory=nn.SgdConfig)
    incremental_loss: str = "ce"
    distill_weight: float = 1.0
    temperature: float = 2.0
    mixup: MixupConfig = field(default_factory=MixupConfig)

    def __post_init__(self):
        if self.incremental_loss not in INCREMENTAL_LOSSES:
            raise ValueError(f"unknown incremental loss {self.incremental_loss!r}")
        if self.distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")


def sample_mixup_lambda(rng: np.random.Generator) -> float:
    """Mixing coefficient drawn Beta(1, 1), i.e. uniform on [0, 1]."""
    return float(rng.beta(1.0, 1.0))


def mixup_batch(
    x_a: np.ndarray,
    y_a: np.ndarray,
    x_b: np.ndarray,
    y_b: np.ndarray,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination lam * (x_a, y_a) + (1 - lam) * (x_b, y_b)."""
    if x_a.shape != x_b.shape or y_a.shape != y_b.shape:
        raise ValueError(
            f"mixup inputs must be shape-matched, got {x_a.shape}/{x_b.shape} "
            f"and {y_a.shape}/{y_b.shape}"
        )
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return x_a.copy(), y_a.copy()
    if lam == 0.0:
        return x_b.copy(), y_b.copy()
    return lam * x_a + (1 - lam) * x_b, lam * y_a + (1 - lam) * y_b


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def distillation_loss(
    student_old_logits: np.ndarray,
    teacher_logits: np.ndarray,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """Temperature-scaled KL(teacher || student) over old classes, batch mean.

    Returns the loss already scaled by temperature**2 and its gradient w.r.t.
    the student's old-class logits.
    """
    if student_old_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"student old-class logits {student_old_logits.shape} vs teacher "
            f"{teacher_logits.shape}"
        )
    tau = temperature
    b = student_old_logits.shape[0]

    def log_softmax(z):
        s = z - z.max(axis=1, keepdims=True)
        return s - np.log(np.exp(s).sum(axis=1, keepdims=True))

    log_p = log_softmax(teacher_logits / tau)
    log_q = log_softmax(student_old_logits / tau)
    p = np.exp(log_p)
    kl = float((p * (log_p - log_q)).sum() / b)
    grad = tau * (np.exp(log_q) - p) / b  # d(tau^2 * KL / B) / d logits
    return tau * tau * kl, grad


def incremental_loss(
    variant: str,
    model: nn.Model,
    x: np.ndarray,
    targets: np.ndarray,
    teacher: FrozenTeacher | None = None,
    distill_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Incremental-task loss and its gradient w.r.t. the model's logits.

    "ce" is cross-entropy over all seen classes; "ce+distill" adds
    distill_weight times the distillation term on the teacher's classes.
    """
    if variant not in INCREMENTAL_LOSSES:
        raise ValueError(f"unknown incremental loss {variant!r}")
    lg = model.logits(x)
    loss, grad = nn.cross_entropy(lg, targets)
    if variant == "ce+distill":
        if teacher is None:
            raise ValueError("ce+distill requires a frozen teacher")
        if distill_weight > 0:  # weight 0 must reproduce plain ce bit-exactly
            k_old = teacher.num_classes
            t_logits = teacher.model.logits(x)
            d_loss, d_grad = distillation_loss(lg[:, :k_old], t_logits, teacher.temperature)
            loss += distill_weight * d_loss
            grad[:, :k_old] += distill_weight * d_grad
    return loss, grad


def stage1_train(
    model: nn.Model,
    x: np.ndarray,
    labels: np.ndarray,
    cfg: Stage1Config,
    rng_batch: np.random.Generator,
    rng_mix: np.random.Generator,
    teacher: FrozenTeacher | None = None,
    new_class_ids: list[int] | None = None,
) -> list[float]:
    """Train extractor and head on the pooled task+exemplar data.

    Returns the per-epoch mean of the summed loss; the model is updated in
    place. `new_class_ids` is only needed when mixup is restricted to
    current-task samples.
    """
    if len(x) == 0:
        raise ValueError("empty training pool")
    k = model.num_classes
    targets = one_hot(labels, k)
    use_teacher = (
        cfg.incremental_loss == "ce+distill"
        and teacher is not None
        and cfg.distill_weight > 0
    )
    new_mask = None
    if cfg.mixup.enabled and cfg.mixup.new_only:
        if new_class_ids is None:
            raise ValueError("mixup.new_only requires new_class_ids")
        new_mask = np.isin(labels, new_class_ids)

    curve = []
    n = len(x)
    bs = cfg.sgd.batch_size
    for epoch in range(cfg.sgd.epochs):
        lr = cfg.sgd.lr_at(epoch)
        order = rng_batch.permutation(n)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, bs):
            rows = order[start : start + bs]
            xb, yb = x[rows], targets[rows]
            cache = nn.forward_cached(model.extractor, xb)
            lg = nn.logits(model.head, cache.features)
            loss, grad = nn.cross_entropy(lg, yb)
            if use_teacher:
                k_old = teacher.num_classes
                t_logits = teacher.model.logits(xb)
                d_loss, d_grad = distillation_loss(
                    lg[:, :k_old], t_logits, cfg.temperature
                )
                loss += cfg.distill_weight * d_loss
                grad[:, :k_old] += cfg.distill_weight * d_grad
            grads = nn.backward(model.extractor, model.head, cache, grad)

            if cfg.mixup.enabled:
                lam = sample_mixup_lambda(rng_mix)
                if new_mask is not None:
                    keep = new_mask[rows]
                    xm_src, ym_src = xb[keep], yb[keep]
                else:
                    xm_src, ym_src = xb, yb
                if len(xm_src) >= 1:
                    perm = rng_mix.permutation(len(xm_src))
                    x_mix, y_mix = mixup_batch(
                        xm_src, ym_src, xm_src[perm], ym_src[perm], lam
                    )
                    mix_cache = nn.forward_cached(model.extractor, x_mix)
                    mix_logits = nn.logits(model.head, mix_cache.features)
                    mix_loss, mix_grad = nn.cross_entropy(mix_logits, y_mix)
                    loss += mix_loss
                    grads.add(
                        nn.backward(model.extractor, model.head, mix_cache, mix_grad)
                    )

            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {batches}"
                )
            nn.sgd_step(model.extractor, model.head, grads, lr)
            epoch_loss += loss
            batches += 1
        curve.append(epoch_loss / batches)
    return curve
