"""Batch sampling and the optimisation loop for the descriptor head."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cloud import NormalizationParams, PointCloud, ScanRecord, preprocess
from .evaluation import RecallReport, evaluate
from .head import DescriptorHead, DescriptorHeadParams, save_checkpoint
from .ingest import DescriptorStore
from .ranking import BatchLabels, LossConfig, mrl_loss
from .splits import SplitSpec

log = logging.getLogger(__name__)


class InfeasibleBatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    positives_radius: float = 5.0
    negatives_min_radius: float = 20.0
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    normalization: NormalizationParams = field(default_factory=NormalizationParams)
    quantization: float = 0.01
    batches_per_epoch: Optional[int] = None
    max_retries: int = 100
    eval_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 4:
            raise ValueError("batch_size must be >= 4")
        if not self.positives_radius < self.negatives_min_radius:
            raise ValueError("positives_radius must be smaller than negatives_min_radius")
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning_rate must be >= 0 and momentum in [0, 1)")


def ground_distances(records: Sequence[ScanRecord]) -> np.ndarray:
    xy = np.array([r.pose[:2] for r in records]).reshape(-1, 2)
    return np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)


def batch_labels(dist: np.ndarray, positives_radius: float, negatives_min_radius: float) -> BatchLabels:
    """Positives within ``positives_radius``; candidates in the buffer between
    the two radii are left out of the ranking entirely."""
    n = dist.shape[0]
    off = ~np.eye(n, dtype=bool)
    pos = (dist <= positives_radius) & off
    omega = pos | ((dist >= negatives_min_radius) & off)
    return BatchLabels.from_masks(pos, omega)


def sample_batch(
    records: Sequence[ScanRecord],
    config: TrainConfig,
    rng: np.random.Generator,
    dist: Optional[np.ndarray] = None,
) -> tuple[list[int], BatchLabels]:
    """Draw ``batch_size`` distinct records, each with an in-batch positive.

    Anchors are paired with a random positive partner; a final odd slot is
    filled with any record that has a partner already in the batch.
    """
    b = config.batch_size
    if dist is None:
        dist = ground_distances(records)
    n = len(records)
    partner = (dist <= config.positives_radius) & ~np.eye(n, dtype=bool)
    eligible = np.flatnonzero(partner.any(axis=1))
    if len(eligible) < b:
        raise InfeasibleBatchError(f"only {len(eligible)} records have a positive partner; batch needs {b}")
    for _ in range(config.max_retries):
        chosen: list[int] = []
        taken = np.zeros(n, dtype=bool)
        for a in rng.permutation(eligible):
            if len(chosen) >= b - 1:
                break
            if taken[a]:
                continue
            options = np.flatnonzero(partner[a] & ~taken)
            if len(options) == 0:
                continue
            p = int(rng.choice(options))
            chosen += [int(a), p]
            taken[[a, p]] = True
        if len(chosen) == b - 1:
            options = np.flatnonzero(partner[:, chosen].any(axis=1) & ~taken)
            if len(options):
                chosen.append(int(rng.choice(options)))
        if len(chosen) == b:
            labels = batch_labels(dist[np.ix_(chosen, chosen)], config.positives_radius, config.negatives_min_radius)
            if all(labels.positives[q] for q in range(b)):
                return chosen, labels
    raise InfeasibleBatchError(
        f"could not assemble a batch of {b} with positives after {config.max_retries} tries "
        f"({len(eligible)} eligible of {n} records)"
    )


class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    terms: dict


@dataclass
class TrainResult:
    head: DescriptorHead
    curve: list
    checkpoint: bytes
    best_checkpoint: Optional[bytes] = None
    best_recall: Optional[float] = None
    best_epoch: Optional[int] = None


def prepare_clouds(records: Sequence[ScanRecord], config: TrainConfig) -> list[PointCloud]:
    return [preprocess(r.cloud, config.normalization, config.quantization) for r in records]


def describe_records(
    head: DescriptorHead,
    records: Sequence[ScanRecord],
    clouds: Optional[Sequence[PointCloud]] = None,
    normalization: NormalizationParams = NormalizationParams(),
    quantization: Optional[float] = 0.01,
) -> DescriptorStore:
    """Run the head over records and collect the raw descriptors in a store."""
    if clouds is None:
        clouds = [preprocess(r.cloud, normalization, quantization) for r in records]
    vectors = head.describe(list(clouds))
    store = DescriptorStore(head.config.output_dim, "learned")
    for rec, vec in zip(records, vectors):
        store.add(rec.key, vec, rec.pose)
    return store


def train(
    records: Sequence[ScanRecord],
    split: SplitSpec,
    config: TrainConfig = TrainConfig(),
    head_params: DescriptorHeadParams = DescriptorHeadParams(),
    validation: Optional[tuple] = None,
) -> TrainResult:
    """Optimise a fresh head on the split's training records.

    ``validation`` is an optional ``(database_records, query_records)`` pair;
    when given with ``config.eval_every > 0`` the checkpoint with the best
    Recall@1 (largest nested dim) is kept alongside the final one.
    """
    train_records, _ = split.select(records)
    clouds = prepare_clouds(train_records, config)
    dist = ground_distances(train_records)
    rng = np.random.default_rng(config.seed)
    head = DescriptorHead(head_params)
    opt = SGD(head.parameters(), config.learning_rate, config.momentum)
    per_epoch = config.batches_per_epoch or max(1, len(train_records) // config.batch_size)

    val_clouds = None
    if validation is not None:
        val_clouds = tuple(prepare_clouds(v, config) for v in validation)

    curve: list[EpochStats] = []
    result = TrainResult(head, curve, b"")
    for epoch in range(1, config.epochs + 1):
        losses = []
        term_sums = {m: 0.0 for m in config.loss.mrl_dims}
        for _ in range(per_epoch):
            idx, labels = sample_batch(train_records, config, rng, dist)
            head.zero_grad()
            z = head.forward_batch([clouds[i] for i in idx])
            loss = mrl_loss(z, labels, config.loss)
            value = loss.total.item()
            if not math.isfinite(value):
                keys = [train_records[i].key for i in idx]
                log.error("non-finite loss at epoch %d, batch %s", epoch, keys)
                raise NonFiniteLossError(f"loss became {value} at epoch {epoch} (batch {keys})")
            loss.total.backward()
            opt.step()
            losses.append(value)
            for m, v in loss.breakdown().items():
                term_sums[m] += v
        stats = EpochStats(epoch, float(np.mean(losses)), {m: s / per_epoch for m, s in term_sums.items()})
        curve.append(stats)
        log.info("epoch %d mean loss %.6f", epoch, stats.mean_loss)

        if val_clouds is not None and config.eval_every and epoch % config.eval_every == 0:
            recall = validation_recall(head, validation, val_clouds)
            if result.best_recall is None or recall > result.best_recall:
                result.best_recall, result.best_epoch = recall, epoch
                result.best_checkpoint = save_checkpoint(head)
    result.checkpoint = save_checkpoint(head)
    return result


def validation_recall(head: DescriptorHead, validation: tuple, clouds: tuple, threshold: float = 5.0) -> float:
    db = describe_records(head, validation[0], clouds[0])
    q = describe_records(head, validation[1], clouds[1])
    dim = head.config.output_dim
    report: RecallReport = evaluate(db, q, [dim], threshold)
    return report.results[0].recall_at_1


def loss_curve_csv(curve: Sequence[EpochStats], dims: Sequence[int] = (64, 128, 192)) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"] + [f"term_{m}" for m in dims])
    for s in curve:
        w.writerow([s.epoch, repr(s.mean_loss)] + [repr(s.terms[m]) for m in dims])
    return buf.getvalue().encode("utf-8")
