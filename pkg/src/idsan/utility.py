"""Non-biometric utility of embeddings before and after projection.

Every score is reported raw and projected, with retention as a percentage
of the raw value (100 means no loss).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embstore import EmbeddingSet
from .errors import DegenerateTask, DimError, EmptyInput, InvalidK, MissingTruth, UndefinedRetention
from .projector import one_hot

KNN_K = 20
RECALL_KS = (1, 5, 10)
_CHUNK = 2048


def _matrix(x) -> np.ndarray:
    if isinstance(x, EmbeddingSet):
        x = x.vectors
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise EmptyInput("expected a non-empty 2-d array of embeddings")
    return x


def _unit(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[1] != b.shape[1]:
        raise DimError(f"dims differ: {a.shape[1]} vs {b.shape[1]}")


def _chunks(n: int):
    for start in range(0, n, _CHUNK):
        yield slice(start, min(n, start + _CHUNK))


def knn_predict(train, train_labels, test, k: int = KNN_K) -> np.ndarray:
    """Cosine k-NN majority vote; tied classes go to the one with the nearest member."""
    xtr, xte = _unit(_matrix(train)), _unit(_matrix(test))
    _same_dim(xtr, xte)
    ytr = np.asarray(train_labels)
    if not 1 <= k <= len(xtr):
        raise InvalidK(f"k={k} outside [1, {len(xtr)}]")
    classes, codes = np.unique(ytr, return_inverse=True)
    out = np.empty(len(xte), dtype=np.int64)
    for sl in _chunks(len(xte)):
        sim = xte[sl] @ xtr.T
        nn = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        for row, idx in enumerate(nn):
            votes = np.bincount(codes[idx], minlength=len(classes))
            tied = np.flatnonzero(votes == votes.max())
            if len(tied) == 1:
                out[sl.start + row] = tied[0]
            else:
                # idx is ordered nearest first, so the first tied class seen wins
                out[sl.start + row] = next(c for c in codes[idx] if c in tied)
    return classes[out]


def knn_top1(train, train_labels, test, test_labels, k: int = KNN_K) -> float:
    pred = knn_predict(train, train_labels, test, k)
    return float(np.mean(pred == np.asarray(test_labels)))


def linear_probe_top1(train, train_labels, test, test_labels, alpha: float = 1.0) -> float:
    """One-vs-all ridge to one-hot targets with an intercept, scored by argmax."""
    xtr, xte = _matrix(train), _matrix(test)
    _same_dim(xtr, xte)
    ytr = np.asarray(train_labels)
    classes, codes = np.unique(ytr, return_inverse=True)
    if len(classes) < 2:
        raise DegenerateTask("linear probe needs at least two classes")
    x_mean = xtr.mean(axis=0)
    y = one_hot(codes)
    y_mean = y.mean(axis=0)
    xc = xtr - x_mean
    w = np.linalg.solve(xc.T @ xc + alpha * np.eye(xtr.shape[1]), xc.T @ (y - y_mean))
    pred = classes[np.argmax((xte - x_mean) @ w + y_mean, axis=1)]
    return float(np.mean(pred == np.asarray(test_labels)))


def recall_at_k(queries, gallery, truth, k) -> float | dict[int, float]:
    """Fraction of queries with a true match among the top-k gallery items by cosine.

    ``truth`` maps query index to an iterable of gallery indices. Passing a
    sequence of k values returns a dict keyed by k.
    """
    q, g = _unit(_matrix(queries)), _unit(_matrix(gallery))
    _same_dim(q, g)
    ks = [int(k)] if np.isscalar(k) else [int(v) for v in k]
    if any(v < 1 for v in ks):
        raise InvalidK(f"k must be positive: {ks}")
    sets = []
    for i in range(len(q)):
        matches = set(truth.get(i, ())) if hasattr(truth, "get") else set(truth[i])
        if not matches:
            raise MissingTruth(f"query {i} has no ground-truth gallery item")
        sets.append(np.fromiter(matches, dtype=np.int64))
    # rank of the best true match per query
    best_rank = np.empty(len(q), dtype=np.int64)
    for sl in _chunks(len(q)):
        sim = q[sl] @ g.T
        for row in range(sim.shape[0]):
            i = sl.start + row
            top = sim[row, sets[i]].max()
            best_rank[i] = int(np.count_nonzero(sim[row] > top))
    out = {v: float(np.mean(best_rank < v)) for v in ks}
    return out[ks[0]] if np.isscalar(k) else out


def truth_by_label(query_labels, gallery_labels) -> dict[int, np.ndarray]:
    """Every gallery item that shares the query's label counts as a true match."""
    gallery_labels = np.asarray(gallery_labels)
    return {i: np.flatnonzero(gallery_labels == lab) for i, lab in enumerate(np.asarray(query_labels))}


def retention(raw: float, projected: float) -> float:
    if not raw > 0:
        raise UndefinedRetention(f"retention is undefined for raw value {raw}")
    return 100.0 * projected / raw


@dataclass(frozen=True)
class UtilityResult:
    metric: str
    raw: float
    projected: float

    @property
    def retention(self) -> float:
        return retention(self.raw, self.projected)

    def to_dict(self) -> dict:
        return {"metric": self.metric, "raw": self.raw, "projected": self.projected, "retention": self.retention}


def _task_split(emb: EmbeddingSet, train_split: str, test_split: str):
    if emb.task_labels is None:
        raise DegenerateTask("embedding set has no task labels")
    tr, te = emb.rows_in(train_split), emb.rows_in(test_split)
    return emb.vectors[tr], emb.task_labels[tr], emb.vectors[te], emb.task_labels[te]


def utility_report(
    raw: EmbeddingSet,
    projected: EmbeddingSet,
    *,
    k: int = KNN_K,
    alpha: float = 1.0,
    recall_ks=RECALL_KS,
    train_split: str = "train",
    test_split: str = "test",
) -> list[UtilityResult]:
    """k-NN, linear-probe and label-match recall@k, raw versus projected."""
    if raw.count != projected.count:
        raise DimError("raw and projected sets must hold the same rows")
    a = _task_split(raw, train_split, test_split)
    b = _task_split(projected, train_split, test_split)
    results = [
        UtilityResult(f"knn_top1@{k}", knn_top1(a[0], a[1], a[2], a[3], k), knn_top1(b[0], b[1], b[2], b[3], k)),
        UtilityResult(
            "linear_probe_top1",
            linear_probe_top1(a[0], a[1], a[2], a[3], alpha),
            linear_probe_top1(b[0], b[1], b[2], b[3], alpha),
        ),
    ]
    truth = truth_by_label(a[3], a[1])
    r_raw = recall_at_k(a[2], a[0], truth, recall_ks)
    r_proj = recall_at_k(b[2], b[0], truth, recall_ks)
    results.extend(UtilityResult(f"recall@{v}", r_raw[v], r_proj[v]) for v in recall_ks)
    return results
