"""Fixed-capacity FIFO feature queues and cosine nearest-neighbor search.

Two queues drive the adaptation: a voting queue holding momentum-model
features with their predicted probabilities (soft-voting neighborhood), and a
contrast queue holding unit-norm key features with their pseudo labels
(negatives for the contrastive loss). Both evict oldest-first and iterate
oldest-to-newest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_TOL = 1e-9
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class VotingEntry:
    """One stored (feature, probability) pair."""

    feature: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class ContrastEntry:
    """One stored (unit-norm key, pseudo label) pair."""

    key: np.ndarray
    label: int


class FeatureQueue:
    """Ring buffer of aligned per-entry arrays with FIFO eviction.

    Columns are fixed at construction; enqueueing more rows than ``capacity``
    keeps only the trailing ``capacity`` rows of the push, matching a queue
    fed one entry at a time.
    """

    def __init__(self, capacity: int, columns: dict[str, tuple[int, ...]]) -> None:
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = int(capacity)
        self._columns = {
            name: np.zeros((self.capacity, *shape)) for name, shape in columns.items()
        }
        self._head = 0          # slot that the next entry overwrites
        self._length = 0
        self.inserted = 0       # lifetime enqueue count

    def __len__(self) -> int:
        return self._length

    @property
    def full(self) -> bool:
        return self._length == self.capacity

    def _validate_rows(self, rows: dict[str, np.ndarray]) -> None:
        pass

    def enqueue(self, **rows: np.ndarray) -> None:
        """Append a batch of entries, evicting the oldest past capacity."""
        names = set(rows)
        if names != set(self._columns):
            raise ValueError(f"expected columns {sorted(self._columns)}, got {sorted(names)}")
        arrays = {name: np.asarray(value, dtype=np.float64) for name, value in rows.items()}
        counts = {name: arr.shape[0] for name, arr in arrays.items()}
        if len(set(counts.values())) != 1:
            raise ValueError(f"column row counts disagree: {counts}")
        n = next(iter(counts.values()))
        self._validate_rows(arrays)
        self.inserted += n
        if self.capacity == 0 or n == 0:
            return
        if n >= self.capacity:
            for name, arr in arrays.items():
                self._columns[name][...] = arr[n - self.capacity:]
            self._head = 0
            self._length = self.capacity
            return
        start = self._head
        end = start + n
        for name, arr in arrays.items():
            buf = self._columns[name]
            if end <= self.capacity:
                buf[start:end] = arr
            else:
                first = self.capacity - start
                buf[start:] = arr[:first]
                buf[:end - self.capacity] = arr[first:]
        self._head = end % self.capacity
        self._length = min(self.capacity, self._length + n)

    def column(self, name: str) -> np.ndarray:
        """Stored rows of one column, oldest to newest."""
        buf = self._columns[name]
        if not self.full:
            return buf[:self._length].copy()
        return np.concatenate([buf[self._head:], buf[:self._head]], axis=0)

    def state_dict(self) -> dict:
        """JSON-ready snapshot for debugging or resumption."""
        return {
            "capacity": self.capacity,
            "inserted": self.inserted,
            "columns": {name: self.column(name).tolist() for name in self._columns},
        }

    def load_state_dict(self, state: dict) -> None:
        """Restore a snapshot produced by state_dict (oldest-to-newest order)."""
        if state["capacity"] != self.capacity:
            raise ValueError(f"capacity mismatch: queue has {self.capacity}, "
                             f"state has {state['capacity']}")
        self._head = 0
        self._length = 0
        rows = {name: np.asarray(values, dtype=np.float64)
                for name, values in state["columns"].items()}
        lengths = {arr.shape[0] for arr in rows.values()}
        if lengths and lengths != {0}:
            self.enqueue(**rows)
        self.inserted = state["inserted"]


class VotingQueue(FeatureQueue):
    """Momentum features + predicted probabilities for soft voting."""

    def __init__(self, capacity: int, feature_dim: int, num_classes: int) -> None:
        super().__init__(capacity, {"features": (feature_dim,), "probs": (num_classes,)})

    def _validate_rows(self, rows: dict[str, np.ndarray]) -> None:
        probs = rows["probs"]
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > PROB_TOL):
            raise ValueError("stored probabilities must be non-negative and sum to 1")
        feats = rows["features"]
        if not np.all(np.isfinite(feats)):
            raise ValueError("stored features must be finite")
        if np.any(np.linalg.norm(feats, axis=1) == 0.0):
            raise ValueError("stored features must be nonzero")

    @property
    def features(self) -> np.ndarray:
        return self.column("features")

    @property
    def probs(self) -> np.ndarray:
        return self.column("probs")

    def entries(self) -> list[VotingEntry]:
        feats, probs = self.features, self.probs
        return [VotingEntry(feats[i], probs[i]) for i in range(len(self))]


class ContrastQueue(FeatureQueue):
    """Unit-norm key features + pseudo labels; the contrastive negative pool."""

    def __init__(self, capacity: int, feature_dim: int, num_classes: int) -> None:
        super().__init__(capacity, {"keys": (feature_dim,), "labels": ()})
        self.num_classes = num_classes

    def _validate_rows(self, rows: dict[str, np.ndarray]) -> None:
        keys = rows["keys"]
        if np.any(np.abs(np.linalg.norm(keys, axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("contrast keys must be unit norm")
        labels = rows["labels"]
        if np.any(labels != np.round(labels)) or np.any(labels < 0) \
                or np.any(labels >= self.num_classes):
            raise ValueError("pseudo labels must be class indices")

    @property
    def keys(self) -> np.ndarray:
        return self.column("keys")

    @property
    def labels(self) -> np.ndarray:
        return self.column("labels").astype(np.int64)

    def entries(self) -> list[ContrastEntry]:
        keys, labels = self.keys, self.labels
        return [ContrastEntry(keys[i], int(labels[i])) for i in range(len(self))]

    @staticmethod
    def random_init(capacity: int, feature_dim: int, num_classes: int,
                    rng: np.random.Generator) -> "ContrastQueue":
        """Unit-normalized Gaussian keys with uniformly random pseudo labels."""
        queue = ContrastQueue(capacity, feature_dim, num_classes)
        if capacity == 0:
            return queue
        keys = rng.normal(0.0, 1.0, size=(capacity, feature_dim))
        keys /= np.linalg.norm(keys, axis=1, keepdims=True)
        labels = rng.integers(0, num_classes, size=capacity).astype(np.float64)
        queue.enqueue(keys=keys, labels=labels)
        return queue


def cosine_distances(query: np.ndarray, features: np.ndarray) -> np.ndarray:
    """1 - cos(query, row) for every stored feature row."""
    query = np.asarray(query, dtype=np.float64)
    qnorm = np.linalg.norm(query)
    if qnorm == 0.0:
        raise ValueError("cannot take cosine distance to a zero query vector")
    norms = np.linalg.norm(features, axis=1)
    return 1.0 - (features / norms[:, None]) @ (query / qnorm)


def knn_query(queue: VotingQueue, query: np.ndarray, n_neighbors: int) -> np.ndarray:
    """Indices (oldest-to-newest positions) of the closest stored features.

    Returns the ``n_neighbors`` smallest cosine distances, all entries when
    the queue is shorter than that; equal distances prefer the older entry.
    """
    if len(queue) < 1:
        raise ValueError("knn_query needs a non-empty queue")
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    distances = cosine_distances(query, queue.features)
    order = np.argsort(distances, kind="stable")
    return order[:min(n_neighbors, len(queue))]
