"""Labeled embedding sets and the EMB1 on-disk format.

An EMB1 file is a 16-byte header (magic ``EMB1``, uint32 dim, uint64 count)
followed by ``count * dim`` little-endian float32 values in row-major order.
Labels live in a JSON sidecar next to it (``x.emb`` -> ``x.meta.json``)::

    {
      "identities": ["alice", "alice", "bob", ...],   # one per row
      "splits": {"train": [...], "val": [...], "test": [...]},
      "balanced_n": 20,                               # or null
      "normalized": false,
      "task_labels": [...],                           # optional, one per row
      "tag": "celeba20/dinov2"
    }

Identity labels are strings; on load they are densified in sorted label
order. Identities missing from ``splits`` are an error unless ``splits`` is
absent altogether, in which case every identity is assigned to train.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    DegenerateVector,
    FormatError,
    InsufficientImages,
    MetadataError,
    SplitViolation,
)

log = logging.getLogger(__name__)

MAGIC = b"EMB1"
HEADER = struct.Struct("<4sIQ")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    vectors: np.ndarray  # (count, dim) float32
    identity_of: np.ndarray  # (count,) dense identity index per row
    identity_labels: tuple[str, ...]  # dense index -> original label
    split_of: tuple[str, ...]  # dense index -> "train" | "val" | "test"
    normalized: bool = False
    balanced_n: int | None = None
    task_labels: np.ndarray | None = None
    tag: str = ""
    _rows: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] == 0 or vectors.shape[1] == 0:
            raise FormatError(f"vectors must be a non-empty 2-d array, got {vectors.shape}")
        identity_of = np.asarray(self.identity_of, dtype=np.int64)
        if identity_of.shape != (vectors.shape[0],):
            raise MetadataError(
                f"{identity_of.shape[0]} identity labels for {vectors.shape[0]} rows"
            )
        m = len(self.identity_labels)
        if len(self.split_of) != m:
            raise MetadataError("split assignment does not cover every identity")
        if identity_of.min() < 0 or identity_of.max() >= m:
            raise MetadataError("identity index out of range")
        bad = sorted(set(self.split_of) - set(SPLITS))
        if bad:
            raise MetadataError(f"unknown split names {bad}")
        vectors.setflags(write=False)
        identity_of.setflags(write=False)
        order = np.argsort(identity_of, kind="stable")
        bounds = np.searchsorted(identity_of[order], np.arange(m + 1))
        rows = tuple(order[bounds[i] : bounds[i + 1]] for i in range(m))
        if self.balanced_n is not None:
            wrong = [i for i, r in enumerate(rows) if len(r) != self.balanced_n]
            if wrong:
                raise MetadataError(
                    f"balanced_n={self.balanced_n} but identity "
                    f"{self.identity_labels[wrong[0]]!r} has {len(rows[wrong[0]])} images"
                )
        task = self.task_labels
        if task is not None:
            task = np.asarray(task)
            if task.shape != (vectors.shape[0],):
                raise MetadataError("task label count does not match row count")
            task.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "identity_of", identity_of)
        object.__setattr__(self, "identity_labels", tuple(self.identity_labels))
        object.__setattr__(self, "split_of", tuple(self.split_of))
        object.__setattr__(self, "task_labels", task)
        object.__setattr__(self, "_rows", rows)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def identity_count(self) -> int:
        return len(self.identity_labels)

    def rows_of(self, identity: int) -> np.ndarray:
        """Row indices of one identity's images (B_i), ascending."""
        return self._rows[identity]

    def identities_in(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return np.array([i for i, s in enumerate(self.split_of) if s == split], dtype=np.int64)

    def rows_in(self, split: str) -> np.ndarray:
        ids = self.identities_in(split)
        if len(ids) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate([self._rows[i] for i in ids]))

    def with_vectors(self, vectors: np.ndarray, normalized: bool, tag: str | None = None):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.shape[0] != self.count:
            raise MetadataError("replacement vectors must keep the row count")
        return replace(
            self,
            vectors=vectors,
            normalized=normalized,
            tag=self.tag if tag is None else tag,
        )

    def with_splits(self, split_of: dict[int, str] | tuple[str, ...]):
        if isinstance(split_of, dict):
            split_of = tuple(split_of[i] for i in range(self.identity_count))
        return replace(self, split_of=tuple(split_of))


@dataclass(frozen=True)
class SupportQuerySplit:
    seed: int
    k: int
    support_of: dict[int, np.ndarray]
    query_of: dict[int, np.ndarray]

    def support_rows(self, identities) -> np.ndarray:
        parts = [self.support_of[int(i)] for i in identities]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def query_rows(self, identities) -> np.ndarray:
        parts = [self.query_of[int(i)] for i in identities]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def from_arrays(
    vectors,
    identities,
    splits: dict[str, list] | None = None,
    *,
    balanced_n: int | None = None,
    normalized: bool = False,
    task_labels=None,
    tag: str = "",
) -> EmbeddingSet:
    """Build an EmbeddingSet from raw labels, densifying identities in sorted order."""
    labels = [str(x) for x in identities]
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2:
        raise FormatError("vectors must be 2-d")
    if len(labels) != vectors.shape[0]:
        raise MetadataError(f"{len(labels)} identity labels for {vectors.shape[0]} rows")
    uniq = sorted(set(labels))
    index = {lab: i for i, lab in enumerate(uniq)}
    identity_of = np.array([index[lab] for lab in labels], dtype=np.int64)
    split_of = _resolve_splits(uniq, splits)
    return EmbeddingSet(
        vectors=vectors,
        identity_of=identity_of,
        identity_labels=tuple(uniq),
        split_of=split_of,
        normalized=normalized,
        balanced_n=balanced_n,
        task_labels=None if task_labels is None else np.asarray(task_labels),
        tag=tag,
    )


def _resolve_splits(uniq: list[str], splits: dict[str, list] | None) -> tuple[str, ...]:
    if splits is None:
        return tuple("train" for _ in uniq)
    owner: dict[str, str] = {}
    for name, members in splits.items():
        if name not in SPLITS:
            raise MetadataError(f"unknown split {name!r}")
        for lab in members:
            lab = str(lab)
            if lab in owner and owner[lab] != name:
                raise SplitViolation(f"identity {lab!r} appears in both {owner[lab]} and {name}")
            owner[lab] = name
    missing = [lab for lab in uniq if lab not in owner]
    if missing:
        raise MetadataError(f"{len(missing)} identities have no split, e.g. {missing[0]!r}")
    extra = sorted(set(owner) - set(uniq))
    if extra:
        log.warning("split lists name %d identities with no rows", len(extra))
    return tuple(owner[lab] for lab in uniq)


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def write_emb1(path, vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    count, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, dim, count))
        fh.write(vectors.tobytes(order="C"))


def read_emb1(path, mmap: bool = False) -> np.ndarray:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
    if len(head) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, dim, count = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if dim == 0 or count == 0:
        raise FormatError(f"{path}: empty matrix (dim={dim}, count={count})")
    expected = HEADER.size + 4 * dim * count
    if size != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {size}")
    if mmap:
        arr = np.memmap(path, dtype="<f4", mode="r", offset=HEADER.size, shape=(count, dim))
    else:
        arr = np.fromfile(path, dtype="<f4", offset=HEADER.size).reshape(count, dim)
    return arr


def save_embeddings(emb: EmbeddingSet, path, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    write_emb1(path, emb.vectors)
    labels = [emb.identity_labels[i] for i in emb.identity_of]
    splits = {s: [lab for lab, sp in zip(emb.identity_labels, emb.split_of) if sp == s] for s in SPLITS}
    meta: dict[str, Any] = {
        "identities": labels,
        "splits": splits,
        "balanced_n": emb.balanced_n,
        "normalized": emb.normalized,
        "tag": emb.tag,
    }
    if emb.task_labels is not None:
        meta["task_labels"] = emb.task_labels.tolist()
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True))
    return path


def read_sidecar(path) -> dict[str, Any]:
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise MetadataError(f"missing sidecar {meta_path}")
    try:
        return json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise MetadataError(f"{meta_path}: {exc}") from exc


def load_embeddings(path, mmap: bool = False) -> EmbeddingSet:
    """Read an EMB1 file and its sidecar. Rows are not normalized here."""
    vectors = read_emb1(path, mmap=mmap)
    meta = read_sidecar(path)
    identities = meta.get("identities")
    if identities is None:
        identities = [str(i) for i in range(vectors.shape[0])]
    if len(identities) != vectors.shape[0]:
        raise MetadataError(
            f"sidecar lists {len(identities)} identity labels for {vectors.shape[0]} rows"
        )
    emb = from_arrays(
        np.asarray(vectors),
        identities,
        meta.get("splits"),
        balanced_n=meta.get("balanced_n"),
        normalized=bool(meta.get("normalized", False)),
        task_labels=meta.get("task_labels"),
        tag=str(meta.get("tag", "")),
    )
    if emb.normalized:
        norms = np.linalg.norm(emb.vectors.astype(np.float64), axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-6:
            raise MetadataError(f"{path}: sidecar claims normalized rows but norms deviate")
    return emb


def normalize(emb: EmbeddingSet) -> EmbeddingSet:
    x = emb.vectors.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if len(zero):
        raise DegenerateVector(f"row {zero[0]} has zero norm", row=int(zero[0]))
    return emb.with_vectors((x / norms[:, None]).astype(np.float32), normalized=True)


def ensure_normalized(emb: EmbeddingSet) -> EmbeddingSet:
    return emb if emb.normalized else normalize(emb)


def _split_rng(seed: int, identity: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, identity], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def make_support_query_split(emb: EmbeddingSet, k: int, seed: int, identities=None) -> SupportQuerySplit:
    """Randomly split each identity's images into k support and n-k query images.

    Each identity draws from its own counter-based stream keyed by
    (seed, identity index), so the split of one identity does not depend on
    which other identities are present.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    ids = range(emb.identity_count) if identities is None else [int(i) for i in identities]
    support, query = {}, {}
    for i in ids:
        rows = emb.rows_of(i)
        if k >= len(rows):
            raise InsufficientImages(
                f"identity {emb.identity_labels[i]!r} has {len(rows)} images, need more than k={k}"
            )
        perm = _split_rng(seed, i).permutation(len(rows))
        support[i] = np.sort(rows[perm[:k]])
        query[i] = np.sort(rows[perm[k:]])
    return SupportQuerySplit(seed=seed, k=k, support_of=support, query_of=query)
