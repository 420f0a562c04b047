"""Derived random streams.

Every stochastic stage of an experiment (scenario subsampling, batch order,
mixup coefficients, pseudo-feature draws, ...) pulls from its own child
generator so that toggling one stage never perturbs another. The split rule
is (seed, label) -> child stream via a SeedSequence whose spawn key is the
first 8 bytes of sha256(label); sha256 keeps it stable across platforms and
interpreter runs, unlike Python's builtin hash.
"""

from __future__ import annotations

import hashlib

import numpy as np


def label_key(label: str) -> tuple[int, int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[:4], "big"),
        int.from_bytes(digest[4:8], "big"),
    )


def child_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for stream `label` derived from `seed`."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=label_key(label)))


def child_seed(seed: int, label: str) -> int:
    """Plain integer seed for stream `label`, for APIs that take one."""
    return int(np.random.SeedSequence(seed, spawn_key=label_key(label)).generate_state(1)[0])
