"""Differentiable ranking losses: smooth AP, TSAP and the Matryoshka sum."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, _stable_sigmoid, as_tensor, pairwise_distances

log = logging.getLogger(__name__)


class NoUsableQueryError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01
    mrl_dims: tuple = (64, 128, 192)
    mrl_weights: tuple = (1.0, 0.5, 0.25)

    def __post_init__(self):
        object.__setattr__(self, "mrl_dims", tuple(int(m) for m in self.mrl_dims))
        object.__setattr__(self, "mrl_weights", tuple(float(w) for w in self.mrl_weights))
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if len(self.mrl_dims) != len(self.mrl_weights):
            raise ValueError("mrl_dims and mrl_weights must have the same length")
        if any(w < 0 for w in self.mrl_weights):
            raise ValueError("mrl_weights must be non-negative")
        if list(self.mrl_dims) != sorted(set(self.mrl_dims)) or self.mrl_dims[0] < 1:
            raise ValueError("mrl_dims must be strictly increasing positive integers")


class BatchLabels:
    """Positive and candidate sets for every query of a batch.

    ``omega[q]`` is the set of candidates ranked for query ``q``; it never
    contains ``q`` and always contains ``positives[q]``.
    """

    def __init__(self, positives: Sequence[set], omega: Sequence[set] | None = None):
        n = len(positives)
        self.n = n
        self.positives = [frozenset(int(i) for i in p) for p in positives]
        if omega is None:
            omega = [set(range(n)) - {q} for q in range(n)]
        self.omega = [frozenset(int(i) for i in o) for o in omega]
        if len(self.omega) != n:
            raise ValueError("positives and omega must cover the same queries")
        for q in range(n):
            if q in self.positives[q] or q in self.omega[q]:
                raise ValueError(f"query {q} cannot be its own candidate")
            if not self.positives[q] <= self.omega[q]:
                raise ValueError(f"positives of query {q} must be a subset of its candidates")
            if any(not 0 <= j < n for j in self.omega[q]):
                raise ValueError(f"candidate index out of range for query {q}")

    @classmethod
    def from_masks(cls, positive_mask: np.ndarray, omega_mask: np.ndarray) -> "BatchLabels":
        pos = [set(np.flatnonzero(row)) for row in positive_mask]
        om = [set(np.flatnonzero(row)) for row in omega_mask]
        return cls(pos, om)

    def masks(self) -> tuple[np.ndarray, np.ndarray]:
        pos = np.zeros((self.n, self.n))
        om = np.zeros((self.n, self.n))
        for q in range(self.n):
            pos[q, list(self.positives[q])] = 1.0
            om[q, list(self.omega[q])] = 1.0
        return pos, om

    def usable_queries(self) -> list[int]:
        return [q for q in range(self.n) if self.positives[q]]

    def permuted(self, perm: Sequence[int]) -> "BatchLabels":
        """Labels after moving old index ``perm[k]`` to new index ``k``."""
        inv = {old: new for new, old in enumerate(perm)}
        pos = [{inv[j] for j in self.positives[old]} for old in perm]
        om = [{inv[j] for j in self.omega[old]} for old in perm]
        return BatchLabels(pos, om)


def sigmoid_relax(x, tau: float):
    """1 / (1 + exp(-x / tau)), evaluated without overflow."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    arr = np.asarray(x, dtype=np.float64) / tau
    out = _stable_sigmoid(np.atleast_1d(arr))
    return float(out[0]) if arr.ndim == 0 else out.reshape(arr.shape)


def smooth_ap_batch(dist: Tensor, pos_mask: np.ndarray, omega_mask: np.ndarray, tau: float) -> Tensor:
    """Smooth AP for every row of a (queries x candidates) distance tensor.

    Rows without positives yield NaN-free garbage and must be masked out by
    the caller.
    """
    dist = as_tensor(dist)
    b, n = dist.shape
    diff = dist.reshape(b, n, 1) - dist.reshape(b, 1, n)  # [q, i, j] = d(q,i) - d(q,j)
    g = (diff * (1.0 / tau)).sigmoid()
    not_self = 1.0 - np.eye(n)[None, :, :]
    num = (g * (pos_mask[:, None, :] * not_self)).sum(axis=2) + 1.0
    den = (g * (omega_mask[:, None, :] * not_self)).sum(axis=2) + 1.0
    npos = np.maximum(pos_mask.sum(axis=1), 1.0)
    return ((num / den) * pos_mask).sum(axis=1) * (1.0 / npos)


def smooth_ap(q: int, distances, labels: BatchLabels, tau: float = 0.01) -> float:
    """Smooth average precision of query ``q`` given a full distance matrix."""
    if not labels.positives[q]:
        raise NoUsableQueryError(f"query {q} has no positives")
    d = np.asarray(distances, dtype=np.float64)
    pos, om = labels.masks()
    ap = smooth_ap_batch(Tensor(d[q : q + 1]), pos[q : q + 1], om[q : q + 1], tau)
    return float(ap.data[0])


def tsap_loss(z: Tensor, labels: BatchLabels, tau: float = 0.01) -> Tensor:
    """Mean over usable queries of (1 - smooth AP) on Euclidean distances of ``z``.

    ``z`` holds one (already normalized) descriptor per row.  Queries without
    in-batch positives are skipped and logged.
    """
    z = as_tensor(z)
    if z.shape[0] != labels.n:
        raise ValueError(f"{z.shape[0]} descriptors but labels for {labels.n}")
    usable = labels.usable_queries()
    if not usable:
        raise NoUsableQueryError("no query in the batch has a positive")
    skipped = labels.n - len(usable)
    if skipped:
        log.debug("tsap_loss: %d queries without positives excluded", skipped)
    pos, om = labels.masks()
    dist = pairwise_distances(z)
    idx = np.asarray(usable)
    ap = smooth_ap_batch(dist[idx], pos[idx], om[idx], tau)
    return 1.0 - ap.mean()


def normalize_rows(z: Tensor, eps: float = 1e-12) -> Tensor:
    z = as_tensor(z)
    norms = (z * z).sum(axis=1, keepdims=True).sqrt()
    if np.any(norms.data < eps):
        raise FloatingPointError("degenerate (near-zero) descriptor prefix")
    return z / norms


@dataclass
class MrlLoss:
    total: Tensor
    terms: dict  # prefix dim -> unweighted TSAP Tensor
    excluded_queries: int = 0

    def breakdown(self) -> dict:
        return {m: t.item() for m, t in self.terms.items()}


def mrl_loss(z: Tensor, labels: BatchLabels, config: LossConfig = LossConfig()) -> MrlLoss:
    """Weighted sum of TSAP losses over normalized descriptor prefixes."""
    z = as_tensor(z)
    if z.shape[1] < max(config.mrl_dims):
        raise ValueError(f"descriptor dim {z.shape[1]} < largest prefix {max(config.mrl_dims)}")
    terms = {}
    total = None
    for m, w in zip(config.mrl_dims, config.mrl_weights):
        term = tsap_loss(normalize_rows(z[:, :m]), labels, config.tau)
        terms[m] = term
        total = term * w if total is None else total + term * w
    return MrlLoss(total, terms, labels.n - len(labels.usable_queries()))
