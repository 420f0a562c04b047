"""Dense feature extractor, growing classifier heads, and exact gradients.

Everything is float64 numpy. The MLP applies a rectifier after every layer
except (optionally) the last, so features are a plain affine map by default.
Classifier heads are stored as one block per task; blocks only ever get
appended, existing blocks and their logits are untouched by growth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_out, fan_in))


@dataclass
class MlpFeatureExtractor:
    """Feature map: a stack of affine layers with ReLU between them."""

    weights: list[np.ndarray]  # each [out, in]
    biases: list[np.ndarray]   # each [out]
    final_activation: bool = False

    def __post_init__(self):
        for i in range(len(self.weights) - 1):
            if self.weights[i + 1].shape[1] != self.weights[i].shape[0]:
                raise ValueError(
                    f"layer {i + 1} expects input dim {self.weights[i + 1].shape[1]}, "
                    f"layer {i} outputs {self.weights[i].shape[0]}"
                )

    @classmethod
    def create(
        cls,
        layer_dims: list[int],
        rng: np.random.Generator,
        final_activation: bool = False,
    ) -> "MlpFeatureExtractor":
        """Build from [in, hidden..., feature_dim] with seeded glorot weights."""
        weights = [
            glorot_uniform(rng, layer_dims[i + 1], layer_dims[i])
            for i in range(len(layer_dims) - 1)
        ]
        biases = [np.zeros(d) for d in layer_dims[1:]]
        return cls(weights=weights, biases=biases, final_activation=final_activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpFeatureExtractor":
        return MlpFeatureExtractor(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.final_activation,
        )

    def _activated(self, layer: int) -> bool:
        return layer < len(self.weights) - 1 or self.final_activation


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations kept for the backward pass."""

    inputs: list[np.ndarray]       # input to each layer; inputs[0] is the batch
    pre_activations: list[np.ndarray]
    features: np.ndarray


def forward(extractor: MlpFeatureExtractor, batch: np.ndarray) -> np.ndarray:
    """Map a [B, in] batch to [B, d] features."""
    return forward_cached(extractor, batch).features


def forward_cached(extractor: MlpFeatureExtractor, batch: np.ndarray) -> ForwardCache:
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 2 or batch.shape[1] != extractor.input_dim:
        raise ValueError(
            f"batch shape {batch.shape} does not match input dim {extractor.input_dim}"
        )
    inputs, pres = [batch], []
    x = batch
    for i, (w, b) in enumerate(zip(extractor.weights, extractor.biases)):
        pre = x @ w.T + b
        pres.append(pre)
        x = np.maximum(pre, 0.0) if extractor._activated(i) else pre
        if i < len(extractor.weights) - 1:
            inputs.append(x)
    return ForwardCache(inputs=inputs, pre_activations=pres, features=x)


@dataclass
class ClassifierBank:
    """Per-task head blocks over all classes seen so far.

    Block t holds one weight row (and bias) per class of task t. Global class
    ids must stay contiguous, so logit column j is class j. In cosine mode
    logits are cosines of unit-normalized rows and features; biases are
    ignored there.
    """

    weights: list[np.ndarray] = field(default_factory=list)  # each [|C_t|, d]
    biases: list[np.ndarray] = field(default_factory=list)
    mode: str = "linear"  # "linear" | "cosine"
    class_offsets: dict[int, tuple[int, int]] = field(default_factory=dict)

    _EPS = 1e-12  # keeps cosine normalization defined for zero rows/features

    def __post_init__(self):
        if self.mode not in ("linear", "cosine"):
            raise ValueError(f"unknown head mode {self.mode!r}")

    @property
    def num_classes(self) -> int:
        return sum(w.shape[0] for w in self.weights)

    @property
    def feature_dim(self) -> int:
        if not self.weights:
            raise ValueError("no classifier blocks")
        return self.weights[0].shape[1]

    def append_block(
        self,
        class_ids: list[int],
        feature_dim: int,
        rng: np.random.Generator | None = None,
    ) -> None:
        """Add a head block for `class_ids` (zero-initialized without rng)."""
        start = self.num_classes
        if sorted(class_ids) != list(range(start, start + len(class_ids))):
            raise ValueError(
                f"new block classes {sorted(class_ids)} must extend the contiguous "
                f"range starting at {start}"
            )
        n = len(class_ids)
        if rng is None:
            w = np.zeros((n, feature_dim))
        else:
            w = glorot_uniform(rng, n, feature_dim)
        block = len(self.weights)
        self.weights.append(w)
        self.biases.append(np.zeros(n))
        for row, cid in enumerate(sorted(class_ids)):
            self.class_offsets[cid] = (block, row)

    def copy(self) -> "ClassifierBank":
        return ClassifierBank(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.mode,
            dict(self.class_offsets),
        )


def logits(bank: ClassifierBank, features: np.ndarray) -> np.ndarray:
    """Logits [B, K] over all classes seen so far; column j is class j."""
    if not bank.weights:
        raise ValueError("no classifier blocks")
    features = np.asarray(features, dtype=float)
    if features.shape[1] != bank.feature_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match head dim {bank.feature_dim}"
        )
    if bank.mode == "cosine":
        f = features / (np.linalg.norm(features, axis=1, keepdims=True) + bank._EPS)
        cols = []
        for w in bank.weights:
            wn = w / (np.linalg.norm(w, axis=1, keepdims=True) + bank._EPS)
            cols.append(f @ wn.T)
        return np.concatenate(cols, axis=1)
    return np.concatenate([features @ w.T + b for w, b in zip(bank.weights, bank.biases)], axis=1)


def cross_entropy(logit_matrix: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows and its gradient w.r.t. logits.

    Targets are soft labels; each row must be a distribution. Softmax uses
    max-subtraction, gradient is (softmax - targets) / B.
    """
    logit_matrix = np.asarray(logit_matrix, dtype=float)
    targets = np.asarray(targets, dtype=float)
    _check_finite("logits", logit_matrix)
    if logit_matrix.shape != targets.shape:
        raise ValueError(f"logits {logit_matrix.shape} vs targets {targets.shape}")
    if np.any(targets < 0):
        raise ValueError("target rows must be non-negative")
    row_sums = targets.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(f"target row {bad} sums to {row_sums[bad]!r}, expected 1")
    shifted = logit_matrix - logit_matrix.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    b = logit_matrix.shape[0]
    loss = float(-(targets * log_p).sum() / b)
    grad = (np.exp(log_p) - targets) / b
    return loss, grad


@dataclass
class GradientSet:
    """Gradients shape-matched to extractor and head parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_weights: list[np.ndarray]
    head_biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, extractor: MlpFeatureExtractor, bank: ClassifierBank) -> "GradientSet":
        return cls(
            [np.zeros_like(w) for w in extractor.weights],
            [np.zeros_like(b) for b in extractor.biases],
            [np.zeros_like(w) for w in bank.weights],
            [np.zeros_like(b) for b in bank.biases],
        )

    def add(self, other: "GradientSet") -> "GradientSet":
        for mine, theirs in (
            (self.weights, other.weights),
            (self.biases, other.biases),
            (self.head_weights, other.head_weights),
            (self.head_biases, other.head_biases),
        ):
            for a, g in zip(mine, theirs):
                a += g
        return self


def head_gradients(
    bank: ClassifierBank, features: np.ndarray, grad_logits: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Gradients of the loss w.r.t. head blocks plus the feature gradient."""
    grad_w, grad_b = [], []
    grad_f = np.zeros_like(features)
    col = 0
    if bank.mode == "cosine":
        nf = np.linalg.norm(features, axis=1, keepdims=True) + bank._EPS
        fn = features / nf
        for w in bank.weights:
            n = w.shape[0]
            g = grad_logits[:, col : col + n]
            nw = np.linalg.norm(w, axis=1, keepdims=True) + bank._EPS
            wn = w / nw
            cos = fn @ wn.T
            # d(cos)/df = (wn - cos * fn) / |f|,  d(cos)/dw = (fn - cos * wn) / |w|
            grad_f += (g @ wn - (g * cos).sum(axis=1, keepdims=True) * fn) / nf
            gw = g.T @ fn - (g * cos).sum(axis=0)[:, None] * wn
            grad_w.append(gw / nw)
            grad_b.append(np.zeros(n))
            col += n
    else:
        for w, b in zip(bank.weights, bank.biases):
            n = w.shape[0]
            g = grad_logits[:, col : col + n]
            grad_w.append(g.T @ features)
            grad_b.append(g.sum(axis=0))
            grad_f += g @ w
            col += n
    return grad_w, grad_b, grad_f


def backward(
    extractor: MlpFeatureExtractor,
    bank: ClassifierBank,
    cache: ForwardCache | None,
    grad_logits: np.ndarray,
) -> GradientSet:
    """Exact gradients of the scalar loss w.r.t. every parameter.

    `cache` must come from forward_cached on the same batch.
    """
    if cache is None:
        raise ValueError("missing cached activations; call forward_cached first")
    if grad_logits.shape[0] != cache.features.shape[0]:
        raise ValueError(
            f"grad_logits batch {grad_logits.shape[0]} does not match cached "
            f"batch {cache.features.shape[0]}"
        )
    grad_w_head, grad_b_head, g = head_gradients(bank, cache.features, grad_logits)
    grad_w = [np.empty(0)] * len(extractor.weights)
    grad_b = [np.empty(0)] * len(extractor.biases)
    for i in reversed(range(len(extractor.weights))):
        if extractor._activated(i):
            g = g * (cache.pre_activations[i] > 0)
        grad_w[i] = g.T @ cache.inputs[i]
        grad_b[i] = g.sum(axis=0)
        if i > 0:
            g = g @ extractor.weights[i]
    return GradientSet(grad_w, grad_b, grad_w_head, grad_b_head)


def sgd_step(
    extractor: MlpFeatureExtractor,
    bank: ClassifierBank,
    grads: GradientSet,
    lr: float,
) -> None:
    """In-place p <- p - lr * g over every parameter array."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for params, gs in (
        (extractor.weights, grads.weights),
        (extractor.biases, grads.biases),
        (bank.weights, grads.head_weights),
        (bank.biases, grads.head_biases),
    ):
        if len(params) != len(gs):
            raise ValueError("gradient set does not match parameter layout")
        for p, g in zip(params, gs):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} vs parameter {p.shape}")
            p -= lr * g


@dataclass
class SgdConfig:
    """SGD with a step-decay schedule (lr multiplied by decay_factor at each listed epoch)."""

    learning_rate: float = 0.1
    epochs: int = 100
    batch_size: int = 128
    decay_epochs: list[int] = field(default_factory=list)
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.decay_factor <= 0:
            raise ValueError("decay_factor must be positive")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay_epochs must be strictly increasing")
        if any(e >= self.epochs or e < 0 for e in self.decay_epochs):
            raise ValueError("decay_epochs must lie in [0, epochs)")

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for boundary in self.decay_epochs:
            if epoch >= boundary:
                lr *= self.decay_factor
        return lr


@dataclass
class Model:
    """Feature extractor plus its classifier bank."""

    extractor: MlpFeatureExtractor
    head: ClassifierBank

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def features(self, batch: np.ndarray) -> np.ndarray:
        return forward(self.extractor, batch)

    def logits(self, batch: np.ndarray) -> np.ndarray:
        return logits(self.head, self.features(batch))

    def copy(self) -> "Model":
        return Model(self.extractor.copy(), self.head.copy())
