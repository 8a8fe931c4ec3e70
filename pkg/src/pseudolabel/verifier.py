"""Label verification with a cosine-similarity kNN over the few-shot embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .datamodel import Detection, EmbeddingMatrix, FewShotSplit
from .errors import BadK, DimensionMismatch, MissingEmbedding, NormalizationError, ZeroVector


def k_for_shots(K: int) -> int:
    """Neighbour count for ``K`` shots: ``min(K // 3 + 1, 10)``."""
    if K < 1:
        raise BadK(f"K must be >= 1, got {K}")
    return min(K // 3 + 1, 10)


@dataclass(frozen=True)
class KnnClassifier:
    train_vectors: np.ndarray  # (n, dim), unit rows
    train_labels: np.ndarray  # (n,), int
    k: int
    keys: tuple[str, ...] = ()

    @property
    def dim(self) -> int:
        return int(self.train_vectors.shape[1])

    def __len__(self) -> int:
        return int(self.train_vectors.shape[0])


@dataclass
class VerificationOutcome:
    verified: list[Detection] = field(default_factory=list)
    rejected: list[Detection] = field(default_factory=list)
    knn_label: dict[int, int] = field(default_factory=dict)  # detection id -> kNN label


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.sqrt((v * v).sum(axis=1))
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms == 0)[0])
        raise NormalizationError(f"zero embedding vector at row {bad}")
    return v / norms[:, None]


def knn_from_arrays(vectors: np.ndarray, labels: Iterable[int], k: int,
                    keys: Iterable[str] = ()) -> KnnClassifier:
    vecs = _unit_rows(np.atleast_2d(vectors))
    labs = np.asarray(list(labels), dtype=np.int64)
    if len(labs) != len(vecs):
        raise DimensionMismatch(f"{len(labs)} labels for {len(vecs)} vectors")
    if k < 1 or k > len(vecs):
        raise BadK(f"k={k} must lie in [1, {len(vecs)}]")
    vecs.setflags(write=False)
    labs.setflags(write=False)
    return KnnClassifier(vecs, labs, int(k), tuple(keys))


def build_knn(split: FewShotSplit, emb: EmbeddingMatrix, k: int) -> KnnClassifier:
    """Classifier over the novel few-shot embeddings (keys are annotation ids)."""
    rows, labels, keys = [], [], []
    for ann in split.novel_annotations:
        key = str(ann.id)
        if key not in emb:
            raise MissingEmbedding(f"no embedding row for few-shot annotation {ann.id}")
        rows.append(emb.row(key))
        labels.append(ann.category)
        keys.append(key)
    if not rows:
        raise BadK("split has no novel annotations to train on")
    return knn_from_arrays(np.stack(rows), labels, k, keys)


def classify(c: KnnClassifier, v: np.ndarray) -> int:
    """Majority label among the ``k`` most cosine-similar training rows.

    Equal similarities rank the lower row index first; equal vote counts go to
    the label whose best-ranked neighbour comes first.
    """
    q = np.asarray(v, dtype=np.float64).ravel()
    if q.shape[0] != c.dim:
        raise DimensionMismatch(f"query dim {q.shape[0]} != classifier dim {c.dim}")
    norm = np.sqrt((q * q).sum())
    if norm == 0:
        raise ZeroVector("query vector has zero norm")
    sims = (c.train_vectors * (q / norm)).sum(axis=1)
    order = np.argsort(-sims, kind="stable")[: c.k]
    votes: dict[int, int] = {}
    first_rank: dict[int, int] = {}
    for rank, idx in enumerate(order):
        lab = int(c.train_labels[idx])
        votes[lab] = votes.get(lab, 0) + 1
        first_rank.setdefault(lab, rank)
    return min(votes, key=lambda lab: (-votes[lab], first_rank[lab]))


def verify(cands: Iterable[Detection], c: KnnClassifier, cand_emb: EmbeddingMatrix
           ) -> VerificationOutcome:
    """Accept a candidate iff the kNN label equals the detector label."""
    out = VerificationOutcome()
    for det in cands:
        key = str(det.id)
        if key not in cand_emb:
            raise MissingEmbedding(f"no embedding row for candidate detection {det.id}")
        label = classify(c, cand_emb.row(key))
        out.knn_label[det.id] = label
        (out.verified if label == det.category else out.rejected).append(det)
    return out
