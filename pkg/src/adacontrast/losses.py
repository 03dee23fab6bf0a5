"""Objective terms: smoothed cross-entropy, class-excluded InfoNCE,
weak-strong consistency, diversity regularization, and the weighted total.

Each loss exists as a graph builder (differentiable, used by the training
loops and the gradient checks) plus a value-level wrapper with the plain
calling convention. Probabilities are clamped at 1e-12 before any log. The
momentum branch (keys, queue contents) always enters as constants, so no
gradient can reach it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .queues import ContrastQueue

LOG_FLOOR = 1e-12
EXCLUDE_MASK = -1e30


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch values of the three terms and their weighted total."""

    l_ce: float
    l_ctr: float
    l_div: float
    total: float
    weights: tuple[float, float, float]


@dataclass(frozen=True)
class ContrastiveBatch:
    """Query/key features with pseudo labels for one contrastive step."""

    queries: np.ndarray      # (B, D), live encoder on one strong view
    keys: np.ndarray         # (B, D), momentum encoder on the other strong view
    labels: np.ndarray       # (B,) pseudo labels
    temperature: float

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.queries.shape != self.keys.shape:
            raise ValueError("queries and keys must have matching shapes")
        if self.queries.shape[0] == 0:
            raise ValueError("contrastive batch is empty")


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels.astype(np.int64)] = 1.0
    return out


def _log_probs(probs: Node) -> Node:
    return ad.log(ad.clamp_min(probs, LOG_FLOOR))


# ---------------------------------------------------------------------------
# graph builders
# ---------------------------------------------------------------------------

def cross_entropy_graph(probs: Node, labels: np.ndarray, smoothing: float = 0.0) -> Node:
    """Batch mean of -sum_c target_c * log p_c with optional label smoothing."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing coefficient must be in [0, 1)")
    if probs.value.ndim != 2:
        raise ad.ShapeError("cross_entropy_graph expects (batch, classes) probabilities")
    if probs.value.shape[0] == 0:
        raise ValueError("empty batch")
    num_classes = probs.value.shape[1]
    targets = (1.0 - smoothing) * _one_hot(labels, num_classes) + smoothing / num_classes
    tape = probs.tape
    weighted = ad.mul(_log_probs(probs), tape.constant(targets, name="ce_targets"))
    return ad.neg(ad.mean_all(ad.sum_axis(weighted, axis=1)), name="ce_loss")


def diversity_graph(probs: Node) -> Node:
    """sum_c pbar_c log pbar_c over the batch-mean prediction pbar.

    Negative entropy of the mean prediction: minimized (-log C) when the
    batch covers classes uniformly, maximal (0) on collapse to one class.
    """
    if probs.value.ndim != 2 or probs.value.shape[0] == 0:
        raise ValueError("diversity_graph expects a non-empty (batch, classes) matrix")
    mean_probs = ad.mean_axis(probs, axis=0)
    return ad.sum_all(ad.mul(mean_probs, _log_probs(mean_probs)), name="diversity_loss")


def entropy_graph(probs: Node) -> Node:
    """Batch mean of the per-sample prediction entropy (baseline objective)."""
    if probs.value.ndim != 2 or probs.value.shape[0] == 0:
        raise ValueError("entropy_graph expects a non-empty (batch, classes) matrix")
    per_sample = ad.sum_axis(ad.mul(probs, _log_probs(probs)), axis=1)
    return ad.neg(ad.mean_all(per_sample), name="entropy_loss")


def info_nce_graph(queries: Node, keys: np.ndarray, labels: np.ndarray,
                   queue_keys: np.ndarray, queue_labels: np.ndarray,
                   temperature: float) -> Node:
    """Class-excluded InfoNCE.

    Per query: positive is its own key; negatives are the queue entries whose
    stored pseudo label differs from the query's. Exclusion is applied by
    adding a large negative constant to the masked logits, which zeroes both
    their softmax weight and their gradient. Queries are L2-normalized inside
    the graph; keys and queue contents enter as constants.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    batch = queries.value.shape[0]
    if batch == 0:
        raise ValueError("empty contrastive batch")
    tape = queries.tape
    keys = np.asarray(keys, dtype=np.float64)
    key_norms = np.linalg.norm(keys, axis=1, keepdims=True)
    if np.any(key_norms == 0.0):
        raise ad.NumericError("zero-norm key cannot be normalized")
    keys_unit = keys / key_norms
    queue_keys = np.asarray(queue_keys, dtype=np.float64)
    if queue_keys.ndim != 2:
        raise ad.ShapeError("queue keys must be a (entries, dim) matrix")
    if queue_keys.shape[0] > 0:
        queue_norms = np.linalg.norm(queue_keys, axis=1, keepdims=True)
        if np.any(queue_norms == 0.0):
            raise ad.NumericError("zero-norm queue key cannot be normalized")
        queue_keys = queue_keys / queue_norms
    labels = np.asarray(labels).astype(np.int64)
    queue_labels = np.asarray(queue_labels).astype(np.int64)

    q_unit = ad.l2_normalize_rows(queries, name="queries_unit")
    positive = ad.sum_axis(ad.mul(q_unit, tape.constant(keys_unit, name="keys_unit")), axis=1)
    if queue_keys.shape[0] > 0:
        negative = ad.matmul(q_unit, tape.constant(queue_keys.T, name="queue_keys"))
        logits = ad.concat_cols(ad.reshape(positive, (batch, 1)), negative)
        mask = np.zeros((batch, queue_keys.shape[0] + 1))
        mask[:, 1:] = np.where(labels[:, None] == queue_labels[None, :], EXCLUDE_MASK, 0.0)
    else:
        logits = ad.reshape(positive, (batch, 1))
        mask = np.zeros((batch, 1))
    logits = ad.add(ad.scale(logits, 1.0 / temperature),
                    tape.constant(mask, name="exclusion_mask"))
    per_query = ad.neg(ad.take_col(ad.log_softmax(logits), 0))
    return ad.mean_all(per_query, name="info_nce_loss")


# ---------------------------------------------------------------------------
# value-level API
# ---------------------------------------------------------------------------

def _scalar(build) -> float:
    tape = Tape()
    return float(build(tape).value)


def label_smoothed_ce(probs: np.ndarray, label: int, smoothing: float) -> float:
    """-sum_c target_c log p_c for one sample, targets smoothed toward uniform."""
    probs = np.asarray(probs, dtype=np.float64)
    return _scalar(lambda tape: cross_entropy_graph(
        tape.constant(probs[None, :], name="probs"), np.array([label]), smoothing))


def weak_strong_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    """Batch mean of -log p[label]: pseudo labels from the weak view grading
    predictions on the strong view."""
    probs = np.asarray(probs, dtype=np.float64)
    return _scalar(lambda tape: cross_entropy_graph(
        tape.constant(probs, name="probs"), labels, smoothing=0.0))


def diversity_loss(probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    return _scalar(lambda tape: diversity_graph(tape.constant(probs, name="probs")))


def info_nce_excluded(batch: ContrastiveBatch, queue: ContrastQueue) -> float:
    """Class-excluded InfoNCE against the current contrast-queue snapshot."""
    return _scalar(lambda tape: info_nce_graph(
        tape.constant(batch.queries, name="queries"), batch.keys, batch.labels,
        queue.keys, queue.labels, batch.temperature))


def total_loss(l_ce: float, l_ctr: float, l_div: float,
               weight_ce: float = 1.0, weight_ctr: float = 1.0,
               weight_div: float = 1.0) -> LossBreakdown:
    """Weighted sum of the three terms."""
    weights = (weight_ce, weight_ctr, weight_div)
    if any(w < 0 for w in weights):
        raise ValueError("loss weights must be >= 0")
    total = weight_ce * l_ce + weight_ctr * l_ctr + weight_div * l_div
    return LossBreakdown(l_ce, l_ctr, l_div, total, weights)
