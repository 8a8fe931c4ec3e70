"""Network-free stand-in for end-to-end detector retraining.

The surrogate learns from an assembled annotation set exactly the way a
two-stage detector's second stage sees it: proposals around every object (and
on background) are labelled with :func:`assign_roi`, so unannotated objects
become background, ignore regions drop out, and pseudo-labels count as truth.

* classification is a cosine kNN vote over the labelled proposals' embeddings;
  a proposal yields a detection when a foreground class wins the vote, scored
  by that class's share of the neighbours' similarity mass;
* box regression is a kNN average of the positives' delta targets in
  oracle-feature space, so label noise in the training boxes carries over to
  the predicted boxes as it does for a high-capacity head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Mapping

import numpy as np

from ..datamodel import Dataset, Detection
from ..geometry import Box, BoxDelta, clip, decode_deltas, encode_deltas
from ..retrain_prep import NEGATIVE, POSITIVE, assign_roi
from .world import WorldTruth, _random_box, jitter_box, oracle_feature, random_unit

_TRAIN_ROIS, _TEST_ROIS = 20, 21


@dataclass(frozen=True)
class SurrogateParams:
    rois_per_object: int = 4
    roi_jitter: float = 0.1
    bg_rois_per_image: int = 6
    k_cls: int = 15
    k_box: int = 15
    test_bg_per_image: int = 4
    min_score: float = 0.05
    argmax_only: bool = False

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "SurrogateParams":
        return cls(**{k: raw[k] for k in cls.__dataclass_fields__ if k in raw})


@dataclass
class SurrogateModel:
    cls_vectors: np.ndarray  # (n, dim) unit rows
    cls_labels: np.ndarray  # (n,), 0 = background
    box_features: np.ndarray  # (m, d)
    box_targets: np.ndarray  # (m, 4)
    params: SurrogateParams


def _unit_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def train_surrogate(world: WorldTruth, assembled: Dataset, params: SurrogateParams,
                    seed: int) -> SurrogateModel:
    rng = np.random.default_rng([seed, _TRAIN_ROIS])
    extent = world.extent
    by_image = assembled.by_image()
    objs_by_image: dict[int, list] = {}
    for o in world.objects.values():
        if not o.test:
            objs_by_image.setdefault(o.image_id, []).append(o)
    vecs, labels, feats, targets = [], [], [], []
    for image_id in sorted(assembled.images):
        anns = by_image.get(image_id, [])
        gts = [a for a in anns if not a.is_ignore]
        ignores = [a for a in anns if a.is_ignore]
        for o in sorted(objs_by_image.get(image_id, []), key=lambda o: o.id):
            emb = np.asarray(world.object_embedding(o.id), dtype=np.float64)
            for _ in range(params.rois_per_object):
                roi = jitter_box(o.box, params.roi_jitter, rng, extent)
                a = assign_roi(roi, gts, ignores)
                if a.outcome == POSITIVE:
                    vecs.append(emb)
                    labels.append(a.category)
                    feats.append(oracle_feature(roi, o, world))
                    targets.append(encode_deltas(roi, gts[a.matched_index].box).as_array())
                elif a.outcome == NEGATIVE:
                    vecs.append(emb)
                    labels.append(0)
        for _ in range(params.bg_rois_per_image):
            roi = _random_box(world.config, rng)
            bg = random_unit(world.config.emb_dim, rng)
            a = assign_roi(roi, gts, ignores)
            if a.outcome == NEGATIVE:
                vecs.append(bg)
                labels.append(0)
    dim = world.config.emb_dim
    return SurrogateModel(
        _unit_rows(np.asarray(vecs).reshape(-1, dim)),
        np.asarray(labels, dtype=np.int64),
        np.asarray(feats).reshape(len(feats), 4 + dim),
        np.asarray(targets).reshape(-1, 4),
        params,
    )


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    k = min(k, scores.shape[1])
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    return part


def predict_surrogate(model: SurrogateModel, world: WorldTruth, seed: int) -> list[Detection]:
    """Detections of the retrained surrogate on the held-out test images."""
    rng = np.random.default_rng([seed, _TEST_ROIS])
    params = model.params
    extent = world.extent
    queries: list[tuple[int, Box, np.ndarray, np.ndarray | None]] = []
    objs_by_image: dict[int, list] = {}
    for o in world.objects.values():
        if o.test:
            objs_by_image.setdefault(o.image_id, []).append(o)
    for image_id in sorted(world.test_dataset.images):
        for o in sorted(objs_by_image.get(image_id, []), key=lambda o: o.id):
            roi = jitter_box(o.box, params.roi_jitter, rng, extent)
            queries.append((image_id, roi, np.asarray(world.object_embedding(o.id), dtype=np.float64),
                            oracle_feature(roi, o, world)))
        for _ in range(params.test_bg_per_image):
            queries.append((image_id, _random_box(world.config, rng),
                            random_unit(world.config.emb_dim, rng), None))
    if not queries or len(model.cls_labels) == 0:
        return []
    Q = _unit_rows(np.stack([q[2] for q in queries]))
    sims = Q @ model.cls_vectors.T
    nn = _top_k(sims, params.k_cls)
    votes_lab = model.cls_labels[nn]
    nn_sims = np.maximum(np.take_along_axis(sims, nn, axis=1), 0.0)
    n_classes = world.config.n_classes
    counts = np.stack([(votes_lab == c).sum(axis=1) for c in range(n_classes + 1)], axis=1)
    mass = np.stack([np.where(votes_lab == c, nn_sims, 0.0).sum(axis=1)
                     for c in range(n_classes + 1)], axis=1)
    total = np.maximum(mass.sum(axis=1), 1e-12)
    dets: list[Detection] = []
    for qi, (image_id, roi, _, feat) in enumerate(queries):
        row = counts[qi]
        share = mass[qi] / total[qi]
        if params.argmax_only:
            winner = int(np.argmax(row))  # lowest label wins count ties
            labels = [winner] if winner else []
        else:
            labels = [c for c in range(1, n_classes + 1) if share[c] >= params.min_score]
        if not labels:
            continue
        box = roi
        if feat is not None and len(model.box_targets):
            d2 = ((model.box_features - feat) ** 2).sum(axis=1)
            kb = min(params.k_box, len(d2))
            idx = np.argpartition(d2, kb - 1)[:kb]
            delta = model.box_targets[idx].mean(axis=0)
            box = clip(decode_deltas(roi, BoxDelta(*delta)), extent)
            if box.w <= 0 or box.h <= 0:
                box = roi
        for c in labels:
            dets.append(Detection(len(dets) + 1, image_id, box, c, min(1.0, float(share[c]))))
    return dets
