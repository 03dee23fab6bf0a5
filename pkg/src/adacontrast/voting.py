"""Per-batch pseudo-label refinement by nearest-neighbor soft voting.

A sample's refined probability vector is the plain average of the stored
probabilities of its nearest neighbors in the voting queue (cosine distance);
the hard pseudo label is the argmax with lowest-index tie-break. When
refinement is gated off, or the queue is empty, the direct prediction is used
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .queues import VotingQueue, knn_query

PROB_TOL = 1e-6


@dataclass
class PseudoLabelRecord:
    """Refined probabilities and hard label for one sample at one step."""

    probs: np.ndarray
    label: int
    neighbor_indices: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.int64))
    refined: bool = False


def _hard_label(probs: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest class index wins ties.
    return int(np.argmax(probs))


def _check_probs(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > PROB_TOL:
        raise ValueError("direct predictions must be a probability vector")
    return probs


def refine(queue: VotingQueue, feature: np.ndarray, direct_probs: np.ndarray,
           n_neighbors: int, enabled: bool = True) -> PseudoLabelRecord:
    """Soft-vote one sample's label among its queue neighbors.

    Votes over all stored entries when the queue holds fewer than
    ``n_neighbors`` (warm-up behavior); falls back to ``direct_probs`` when
    disabled or the queue is empty.
    """
    direct_probs = _check_probs(direct_probs)
    if not enabled or len(queue) == 0:
        return PseudoLabelRecord(direct_probs.copy(), _hard_label(direct_probs))
    indices = knn_query(queue, feature, n_neighbors)
    votes = queue.probs[indices].mean(axis=0)
    return PseudoLabelRecord(votes, _hard_label(votes), indices, refined=True)


def batch_refine(queue: VotingQueue, features: np.ndarray, direct_probs: np.ndarray,
                 n_neighbors: int, enabled: bool = True) -> list[PseudoLabelRecord]:
    """Vectorized refine over a batch; the queue is not updated here.

    Queue updates happen after the optimization step, so every row of the
    batch votes against the same queue snapshot.
    """
    features = np.asarray(features, dtype=np.float64)
    direct_probs = np.asarray(direct_probs, dtype=np.float64)
    if features.shape[0] != direct_probs.shape[0]:
        raise ValueError("features and direct_probs disagree on batch size")
    if not enabled or len(queue) == 0:
        return [
            PseudoLabelRecord(_check_probs(direct_probs[i]).copy(),
                              _hard_label(direct_probs[i]))
            for i in range(features.shape[0])
        ]
    for i in range(direct_probs.shape[0]):
        _check_probs(direct_probs[i])
    stored = queue.features
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot take cosine distance to a zero query vector")
    stored_unit = stored / np.linalg.norm(stored, axis=1)[:, None]
    distances = 1.0 - (stored_unit @ (features / norms).T).T
    order = np.argsort(distances, axis=1, kind="stable")[:, :min(n_neighbors, len(queue))]
    probs = queue.probs
    records = []
    for i in range(features.shape[0]):
        votes = probs[order[i]].mean(axis=0)
        records.append(PseudoLabelRecord(votes, _hard_label(votes), order[i], refined=True))
    return records
