"""Seeded synthetic world and a noisy detector simulator.

Class centers sit on the unit sphere with a guaranteed minimum pairwise angle;
each object's embedding is its class center rotated by a small random angle.
The detector simulator reproduces the two failure modes pseudo-labelling
targets: missed objects and confident class confusions, plus jittered boxes
and optional background false positives. Every draw is logged.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from ..datamodel import (
    Annotation,
    Dataset,
    Detection,
    EmbeddingMatrix,
    FewShotSplit,
    make_few_shot_split,
)
from ..errors import CenterPlacementFailure, ValidationError
from ..geometry import Box, ImageExtent, clip, encode_deltas

# stream tags for np.random.default_rng([seed, tag])
_CENTERS, _TRAIN_IMAGES, _TEST_IMAGES, _DETECT_TRAIN, _DETECT_TEST = 0, 1, 2, 10, 11


@dataclass(frozen=True)
class WorldConfig:
    n_base: int = 6
    n_novel: int = 4
    emb_dim: int = 32
    cluster_angle_min: float = 60.0  # degrees
    intra_sigma: float = 0.1  # radians
    n_images: int = 400
    n_test_images: int = 300
    objects_per_image: tuple[int, int] = (2, 6)
    box_size: tuple[float, float] = (40.0, 160.0)  # pixels, side length range
    extent: tuple[int, int] = (640, 480)
    K: int = 10
    max_center_attempts: int = 10_000

    def __post_init__(self) -> None:
        if min(self.n_base, self.n_novel, self.emb_dim, self.n_images, self.K) < 1:
            raise ValidationError("world counts must be positive")
        if self.n_test_images < 0:
            raise ValidationError("n_test_images must be non-negative")
        if not 0.0 < self.cluster_angle_min <= 90.0:
            raise ValidationError("cluster_angle_min must lie in (0, 90]")
        if self.intra_sigma < 0:
            raise ValidationError("intra_sigma must be non-negative")
        lo, hi = self.objects_per_image
        if lo < 1 or hi < lo:
            raise ValidationError(f"bad objects_per_image range {self.objects_per_image}")
        s_lo, s_hi = self.box_size
        if s_lo <= 0 or s_hi < s_lo or s_hi > min(self.extent):
            raise ValidationError(f"bad box_size range {self.box_size}")
        ImageExtent(*self.extent)

    @property
    def n_classes(self) -> int:
        return self.n_base + self.n_novel

    @property
    def base_ids(self) -> list[int]:
        return list(range(1, self.n_base + 1))

    @property
    def novel_ids(self) -> list[int]:
        return list(range(self.n_base + 1, self.n_classes + 1))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "WorldConfig":
        kw = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        for k in ("objects_per_image", "box_size", "extent"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)

    def noise(self, raw: Mapping[str, Any]) -> "DetectorNoise":
        return DetectorNoise.from_dict(raw, self.n_classes, self.n_base)


@dataclass(frozen=True)
class ScoreModel:
    tp_mean: float = 0.9
    fp_mean: float = 0.9  # confusions are as confident as correct labels
    sigma: float = 0.08


@dataclass(frozen=True)
class DetectorNoise:
    miss_rate: float | tuple[float, ...]
    confusion: np.ndarray  # row-stochastic, indexed by category - 1
    box_jitter_sigma: float = 0.15
    score_model: ScoreModel = ScoreModel()
    fp_per_image: float = 0.0

    def __post_init__(self) -> None:
        conf = np.asarray(self.confusion, dtype=np.float64)
        if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
            raise ValidationError("confusion must be a square matrix")
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValidationError("confusion entries must lie in [0, 1]")
        if np.any(np.abs(conf.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError("confusion rows must sum to 1")
        object.__setattr__(self, "confusion", conf)
        rates = self.miss_rates(conf.shape[0])
        if np.any(rates < 0) or np.any(rates > 1):
            raise ValidationError("miss rates must lie in [0, 1]")
        if self.box_jitter_sigma < 0 or self.score_model.sigma < 0 or self.fp_per_image < 0:
            raise ValidationError("noise scales must be non-negative")

    def miss_rates(self, n_classes: int) -> np.ndarray:
        if isinstance(self.miss_rate, (int, float)):
            return np.full(n_classes, float(self.miss_rate))
        rates = np.asarray(self.miss_rate, dtype=np.float64)
        if rates.shape != (n_classes,):
            raise ValidationError(f"need {n_classes} per-class miss rates")
        return rates

    @staticmethod
    def spread_confusion(n_classes: int, offdiag: float) -> np.ndarray:
        """Identity minus ``offdiag``, spread evenly over the other classes."""
        if n_classes == 1:
            return np.ones((1, 1))
        conf = np.full((n_classes, n_classes), offdiag / (n_classes - 1))
        np.fill_diagonal(conf, 1.0 - offdiag)
        return conf

    @staticmethod
    def group_confusion(n_base: int, n_novel: int, offdiag: float) -> np.ndarray:
        """Confusions stay inside a group: novel with novel, base with base.

        A group of one class cannot be confused and keeps an identity row.
        """
        conf = np.zeros((n_base + n_novel, n_base + n_novel))
        for lo, size in ((0, n_base), (n_base, n_novel)):
            conf[lo:lo + size, lo:lo + size] = DetectorNoise.spread_confusion(size, offdiag)
        return conf

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], n_classes: int,
                  n_base: int | None = None) -> "DetectorNoise":
        """Build from JSON; the matrix may be given or generated from an off-diagonal mass.

        ``confusion_structure`` is ``"uniform"`` (mass over all other classes)
        or ``"within_group"`` (needs ``n_base``).
        """
        if "confusion" in raw:
            conf = np.asarray(raw["confusion"], dtype=np.float64)
        else:
            off = float(raw.get("confusion_offdiag", 0.0))
            structure = raw.get("confusion_structure", "uniform")
            if structure == "uniform":
                conf = cls.spread_confusion(n_classes, off)
            elif structure == "within_group":
                if n_base is None:
                    raise ValidationError("within_group confusion needs the base class count")
                conf = cls.group_confusion(n_base, n_classes - n_base, off)
            else:
                raise ValidationError(f"unknown confusion_structure {structure!r}")
        miss = raw.get("miss_rate", 0.0)
        return cls(
            miss_rate=tuple(miss) if isinstance(miss, (list, tuple)) else float(miss),
            confusion=conf,
            box_jitter_sigma=float(raw.get("box_jitter_sigma", 0.0)),
            score_model=ScoreModel(**raw.get("score_model", {})),
            fp_per_image=float(raw.get("fp_per_image", 0.0)),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "miss_rate": list(self.miss_rate) if isinstance(self.miss_rate, tuple) else self.miss_rate,
            "confusion": self.confusion.tolist(),
            "box_jitter_sigma": self.box_jitter_sigma,
            "score_model": asdict(self.score_model),
            "fp_per_image": self.fp_per_image,
        }


@dataclass(frozen=True)
class HiddenObject:
    id: int
    image_id: int
    category: int
    box: Box
    test: bool = False


@dataclass
class WorldTruth:
    config: WorldConfig
    seed: int
    centers: np.ndarray  # (n_classes, emb_dim), row c-1 is category c
    dataset: Dataset  # exhaustive ground truth of the training images
    test_dataset: Dataset  # held-out images used to score retrained models
    true_embeddings: EmbeddingMatrix  # keyed by object (annotation) id
    objects: dict[int, HiddenObject]
    split: FewShotSplit
    events: list[dict[str, Any]] = field(default_factory=list)

    @property
    def extent(self) -> ImageExtent:
        return ImageExtent(*self.config.extent)

    def object_embedding(self, obj_id: int) -> np.ndarray:
        return self.true_embeddings.row(obj_id)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def perturb_on_sphere(center: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a unit vector by a random tangent step whose length has RMS ``sigma``."""
    dim = center.shape[0]
    if dim == 1 or sigma == 0:
        return center.copy()
    t = rng.standard_normal(dim)
    t -= (t @ center) * center
    t *= sigma / math.sqrt(dim - 1)
    theta = float(np.linalg.norm(t))
    if theta == 0.0:
        return center.copy()
    return _unit(math.cos(theta) * center + math.sin(theta) * (t / theta))


def random_unit(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(dim)
    while not np.any(v):
        v = rng.standard_normal(dim)
    return _unit(v)


def place_centers(n: int, dim: int, min_angle_deg: float, rng: np.random.Generator,
                  max_attempts: int) -> np.ndarray:
    """Rejection-sample ``n`` unit vectors with pairwise angle >= ``min_angle_deg``."""
    max_cos = math.cos(math.radians(min_angle_deg))
    centers: list[np.ndarray] = []
    for i in range(n):
        for _ in range(max_attempts):
            cand = random_unit(dim, rng)
            if all(float(cand @ c) <= max_cos for c in centers):
                centers.append(cand)
                break
        else:
            raise CenterPlacementFailure(
                f"could not place center {i + 1}/{n} at >= {min_angle_deg} deg in {dim}-D "
                f"after {max_attempts} attempts"
            )
    return np.stack(centers)


def _random_box(cfg: WorldConfig, rng: np.random.Generator) -> Box:
    W, H = cfg.extent
    lo, hi = cfg.box_size
    w = float(rng.uniform(lo, hi))
    h = float(rng.uniform(lo, hi))
    return Box(float(rng.uniform(0, W - w)), float(rng.uniform(0, H - h)), w, h)


def _populate(cfg: WorldConfig, centers: np.ndarray, rng: np.random.Generator, first_image: int,
              n_images: int, first_obj: int, test: bool):
    images: dict[int, ImageExtent] = {}
    objects: list[HiddenObject] = []
    vectors: list[np.ndarray] = []
    lo, hi = cfg.objects_per_image
    obj_id = first_obj
    for image_id in range(first_image, first_image + n_images):
        images[image_id] = ImageExtent(*cfg.extent)
        for _ in range(int(rng.integers(lo, hi + 1))):
            cat = int(rng.integers(1, cfg.n_classes + 1))
            box = _random_box(cfg, rng)
            vectors.append(perturb_on_sphere(centers[cat - 1], cfg.intra_sigma, rng))
            objects.append(HiddenObject(obj_id, image_id, cat, box, test))
            obj_id += 1
    return images, objects, vectors


def generate_world(cfg: WorldConfig, seed: int) -> WorldTruth:
    centers = place_centers(cfg.n_classes, cfg.emb_dim, cfg.cluster_angle_min,
                            np.random.default_rng([seed, _CENTERS]), cfg.max_center_attempts)
    categories = {c: (f"base{c}" if c <= cfg.n_base else f"novel{c - cfg.n_base}")
                  for c in range(1, cfg.n_classes + 1)}
    tr_images, tr_objs, tr_vecs = _populate(cfg, centers, np.random.default_rng([seed, _TRAIN_IMAGES]),
                                            1, cfg.n_images, 1, False)
    te_images, te_objs, te_vecs = _populate(cfg, centers, np.random.default_rng([seed, _TEST_IMAGES]),
                                            cfg.n_images + 1, cfg.n_test_images,
                                            len(tr_objs) + 1, True)

    def to_ann(o: HiddenObject) -> Annotation:
        return Annotation(o.id, o.image_id, o.box, o.category)

    dataset = Dataset(tr_images, dict(categories), [to_ann(o) for o in tr_objs])
    test_dataset = Dataset(te_images, dict(categories), [to_ann(o) for o in te_objs])
    all_objs = tr_objs + te_objs
    emb = EmbeddingMatrix([str(o.id) for o in all_objs],
                          np.stack(tr_vecs + te_vecs) if all_objs else np.zeros((0, cfg.emb_dim)))
    split = make_few_shot_split(dataset, cfg.novel_ids, cfg.K, seed)
    events = [{"event": "object", "object_id": o.id, "image_id": o.image_id,
               "category": o.category, "box": o.box.to_list(), "test": o.test} for o in all_objs]
    return WorldTruth(cfg, seed, centers, dataset, test_dataset, emb,
                      {o.id: o for o in all_objs}, split, events)


@dataclass
class Simulation:
    """Detector output; unpacks as ``(detections, embeddings)``."""

    detections: list[Detection]
    embeddings: EmbeddingMatrix
    events: list[dict[str, Any]]
    origin: dict[int, int | None]  # detection id -> hidden object id (None for pure FPs)

    def __iter__(self) -> Iterator:
        yield self.detections
        yield self.embeddings


def _jitter(box: Box, sigma: float, rng: np.random.Generator, extent: ImageExtent) -> Box:
    if sigma == 0:
        return clip(box, extent)
    z = rng.standard_normal(4)
    w = max(1.0, box.w * (1.0 + sigma * z[2]))
    h = max(1.0, box.h * (1.0 + sigma * z[3]))
    jittered = clip(Box(box.x + sigma * box.w * z[0], box.y + sigma * box.h * z[1], w, h), extent)
    if jittered.w <= 0 or jittered.h <= 0:
        return clip(box, extent)
    return jittered


def jitter_box(box: Box, sigma: float, rng: np.random.Generator, extent: ImageExtent) -> Box:
    """Gaussian jitter of position and size with std ``sigma`` times the box size, clipped."""
    return _jitter(box, sigma, rng, extent)


def simulate_detector(world: WorldTruth, noise: DetectorNoise, seed: int,
                      test: bool = False) -> Simulation:
    """Run the noisy detector over the training (or held-out test) images."""
    cfg = world.config
    n = cfg.n_classes
    if noise.confusion.shape != (n, n):
        raise ValidationError(f"confusion must be {n}x{n} for this world")
    rng = np.random.default_rng([seed, _DETECT_TEST if test else _DETECT_TRAIN])
    miss = noise.miss_rates(n)
    sm = noise.score_model
    extent = world.extent
    dataset = world.test_dataset if test else world.dataset
    objs_by_image: dict[int, list[HiddenObject]] = {i: [] for i in dataset.images}
    for o in world.objects.values():
        if o.test == test:
            objs_by_image[o.image_id].append(o)
    dets: list[Detection] = []
    keys: list[str] = []
    vecs: list[np.ndarray] = []
    events: list[dict[str, Any]] = []
    origin: dict[int, int | None] = {}

    def score(mean: float) -> float:
        return float(min(1.0, max(0.0, rng.normal(mean, sm.sigma) if sm.sigma > 0 else mean)))

    for image_id in sorted(objs_by_image):
        for o in sorted(objs_by_image[image_id], key=lambda o: o.id):
            if rng.random() < miss[o.category - 1]:
                events.append({"event": "miss", "object_id": o.id, "image_id": image_id,
                               "category": o.category})
                continue
            label = int(rng.choice(n, p=noise.confusion[o.category - 1])) + 1
            box = _jitter(o.box, noise.box_jitter_sigma, rng, extent)
            s = score(sm.tp_mean if label == o.category else sm.fp_mean)
            det = Detection(len(dets) + 1, image_id, box, label, s)
            dets.append(det)
            keys.append(str(det.id))
            vecs.append(world.object_embedding(o.id))
            origin[det.id] = o.id
            events.append({"event": "detect", "object_id": o.id, "det_id": det.id,
                           "image_id": image_id, "category": o.category, "label": label,
                           "confused": label != o.category, "box": box.to_list(), "score": s})
        n_fp = int(rng.poisson(noise.fp_per_image)) if noise.fp_per_image > 0 else 0
        for _ in range(n_fp):
            box = _random_box(cfg, rng)
            label = int(rng.integers(1, n + 1))
            det = Detection(len(dets) + 1, image_id, box, label, score(sm.fp_mean))
            dets.append(det)
            keys.append(str(det.id))
            vecs.append(random_unit(cfg.emb_dim, rng))
            origin[det.id] = None
            events.append({"event": "spurious", "det_id": det.id, "image_id": image_id,
                           "label": label, "box": box.to_list(), "score": det.score})
    matrix = np.stack(vecs) if vecs else np.zeros((0, cfg.emb_dim))
    return Simulation(dets, EmbeddingMatrix(keys, matrix), events, origin)


def oracle_feature(box: Box, hidden: HiddenObject, world: WorldTruth | np.ndarray) -> np.ndarray:
    """``encode_deltas(box, true box)`` followed by the object's class center.

    The regression target from ``box`` is exactly the first four entries, so a
    linear stage can represent the ideal correction.
    """
    centers = world.centers if isinstance(world, WorldTruth) else np.asarray(world)
    delta = encode_deltas(box, hidden.box).as_array()
    return np.concatenate([delta, centers[hidden.category - 1]])


def novel_detections(dets: Sequence[Detection], split: FewShotSplit) -> list[Detection]:
    return [d for d in dets if d.category in split.novel_categories]
