"""Momentum prototypes, cosine pseudo-labels and the confidence curriculum."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, Tensor, cosine_matrix, no_grad


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class Prototypes:
    centroids: np.ndarray
    momentum: float = 0.9
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.initialized is None:
            self.initialized = np.zeros(self.centroids.shape[0], dtype=bool)
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")

    @classmethod
    def empty(cls, n_classes: int, dim: int, momentum: float = 0.9) -> "Prototypes":
        return cls(np.zeros((n_classes, dim)), momentum)

    @property
    def n_classes(self) -> int:
        return self.centroids.shape[0]


def update_prototypes(protos: Prototypes, source_feats, labels) -> Prototypes:
    """Momentum update of every class present in the batch.

    A class seen for the first time takes its batch mean directly; absent
    classes keep their centroid unchanged.
    """
    feats = _array(source_feats)
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and labels.max() >= protos.n_classes:
        raise ValueError(f"label {labels.max()} out of range for {protos.n_classes} classes")
    cent = protos.centroids.copy()
    init = protos.initialized.copy()
    mu = protos.momentum
    for c in np.unique(labels):
        m = feats[labels == c].mean(axis=0)
        cent[c] = mu * cent[c] + (1.0 - mu) * m if init[c] else m
        init[c] = True
    return Prototypes(cent, mu, init)


def assign_pseudo_labels(target_feats, protos: Prototypes):
    """Nearest prototype by cosine.  Returns (labels, scores); ties go to the lowest class."""
    if not protos.initialized.all():
        missing = np.flatnonzero(~protos.initialized).tolist()
        raise ContractError(f"prototypes for classes {missing} were never initialized")
    with no_grad():
        sims = cosine_matrix(Tensor(_array(target_feats)), Tensor(protos.centroids)).data
    labels = np.argmax(sims, axis=1)
    return labels, sims[np.arange(len(labels)), labels]


@dataclass(frozen=True)
class ConfidenceSchedule:
    eta0: float = 0.1
    eta_max: float = 0.95
    total_steps: int = 1
    mode: str = "linear"
    step_size: float = 0.05
    step_every: int = 15

    def __post_init__(self):
        if not 0.0 <= self.eta0 <= self.eta_max <= 1.0:
            raise ValueError(f"need 0 <= eta0 <= eta_max <= 1, got {self.eta0}, {self.eta_max}")
        if self.mode not in ("linear", "stepwise"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.total_steps < 1 or self.step_every < 1:
            raise ValueError("total_steps and step_every must be positive")


def confidence_ratio(schedule: ConfidenceSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("step must be non-negative")
    s = schedule
    if s.mode == "linear":
        eta = s.eta0 + t / s.total_steps * (s.eta_max - s.eta0)
    else:
        eta = s.eta0 + s.step_size * (t // s.step_every)
    return float(min(max(eta, s.eta0), s.eta_max))


def confident_count(eta: float, n: int) -> int:
    """ceil(eta * n), immune to float noise such as 0.3 * 10 = 3.0000000000000004."""
    return min(n, math.ceil(round(eta * n, 9)))


@dataclass
class PartitionedTarget:
    confident: np.ndarray
    distrusted: np.ndarray
    labels: np.ndarray
    scores: np.ndarray

    @property
    def confident_labels(self) -> np.ndarray:
        return self.labels[self.confident]

    @property
    def confident_fraction(self) -> float:
        n = len(self.confident) + len(self.distrusted)
        return len(self.confident) / n if n else 0.0


def partition(target_feats, labels, scores, eta: float, mode: str = "quantile") -> PartitionedTarget:
    """Split a target batch into confident and distrusted index sets.

    quantile: the ceil(eta * n) highest scores, earlier index first on ties.
    threshold: every sample with score >= eta.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n = len(scores)
    if target_feats is not None and len(target_feats) != n:
        raise ValueError("scores are not aligned with features")
    if mode == "quantile":
        order = np.argsort(-scores, kind="stable")
        conf = np.sort(order[:confident_count(eta, n)])
    elif mode == "threshold":
        conf = np.flatnonzero(scores >= eta)
    else:
        raise ValueError(f"unknown partition mode {mode!r}")
    mask = np.zeros(n, dtype=bool)
    mask[conf] = True
    return PartitionedTarget(conf, np.flatnonzero(~mask), labels, scores)
