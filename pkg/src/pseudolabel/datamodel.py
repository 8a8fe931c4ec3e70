"""Dataset, detection and embedding records plus their file formats.

Annotation files are COCO-style JSON (``bbox`` is ``[x, y, w, h]``) with two
boolean extension fields per annotation, ``is_pseudo`` and ``is_ignore``.
Detection files use the COCO results format, optionally carrying an ``id``.
Embeddings live in a raw little-endian float32 matrix ``<name>.f32`` next to a
``<name>.manifest.json`` holding ``{"dim", "rows", "keys"}``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateKeyError,
    InsufficientShots,
    IntegrityError,
    ParseError,
    RangeError,
    ShapeError,
    ValidationError,
)
from .geometry import Box, ImageExtent

SOURCES = ("groundtruth", "fewshot", "pseudo", "ignore")


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    box: Box
    category: int
    is_pseudo: bool = False
    is_ignore: bool = False
    source: str = "groundtruth"

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValidationError(f"annotation {self.id}: unknown source {self.source!r}")
        if self.category < 1:
            raise ValidationError(f"annotation {self.id}: category ids start at 1")


@dataclass(frozen=True)
class Detection:
    id: int
    image_id: int
    box: Box
    category: int
    score: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise RangeError(f"detection {self.id}: score {self.score} outside [0, 1]")


@dataclass
class Dataset:
    images: dict[int, ImageExtent]
    categories: dict[int, str]
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        seen: set[int] = set()
        for ann in self.annotations:
            if ann.id in seen:
                raise IntegrityError(f"duplicate annotation id {ann.id}")
            seen.add(ann.id)
            if ann.image_id not in self.images:
                raise IntegrityError(f"annotation {ann.id} references missing image id {ann.image_id}")
            if ann.category not in self.categories:
                raise IntegrityError(
                    f"annotation {ann.id} references missing category id {ann.category}"
                )

    def by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {i: [] for i in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def with_annotations(self, annotations: Sequence[Annotation]) -> "Dataset":
        return Dataset(dict(self.images), dict(self.categories), list(annotations))


@dataclass(frozen=True)
class FewShotSplit:
    base_categories: frozenset[int]
    novel_categories: frozenset[int]
    shots: int
    novel_annotations: tuple[Annotation, ...]

    def __post_init__(self) -> None:
        if self.base_categories & self.novel_categories:
            raise ValidationError("base and novel categories overlap")
        if self.shots < 1:
            raise ValidationError("shots must be positive")
        counts: dict[int, int] = {c: 0 for c in self.novel_categories}
        for ann in self.novel_annotations:
            if ann.category not in counts:
                raise ValidationError(f"shot annotation {ann.id} is not of a novel category")
            counts[ann.category] += 1
        bad = {c: n for c, n in counts.items() if n != self.shots}
        if bad:
            raise ValidationError(f"expected {self.shots} shots per novel category, got {bad}")


class EmbeddingMatrix:
    """Row-keyed dense vectors, stored as float32 like the file format."""

    def __init__(self, keys: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2:
            raise ShapeError(f"embedding matrix must be 2-D, got shape {vectors.shape}")
        if len(keys) != vectors.shape[0]:
            raise ShapeError(f"{len(keys)} keys for {vectors.shape[0]} rows")
        if vectors.shape[1] < 1:
            raise ShapeError("embedding dim must be positive")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("embedding matrix has non-finite entries")
        self.keys: tuple[str, ...] = tuple(str(k) for k in keys)
        self.index: dict[str, int] = {}
        for i, k in enumerate(self.keys):
            if k in self.index:
                raise DuplicateKeyError(f"duplicate embedding key {k!r}")
            self.index[k] = i
        self.vectors = vectors
        self.vectors.setflags(write=False)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.keys)

    def __contains__(self, key: object) -> bool:
        return str(key) in self.index

    def row(self, key: object) -> np.ndarray:
        return self.vectors[self.index[str(key)]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.keys == other.keys and np.array_equal(self.vectors, other.vectors)

    def __repr__(self) -> str:
        return f"EmbeddingMatrix(rows={len(self)}, dim={self.dim})"


# --- annotation files -------------------------------------------------------


def _read_json(path: str | os.PathLike) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def _write_json(obj: Any, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _field(record: Mapping[str, Any], name: str, where: str) -> Any:
    try:
        return record[name]
    except (KeyError, TypeError):
        raise ParseError(f"{where}: missing field {name!r}") from None


def annotation_from_record(rec: Mapping[str, Any], where: str = "annotation") -> Annotation:
    try:
        ann_id = int(_field(rec, "id", where))
        where = f"annotation {ann_id}"
        is_ignore = bool(rec.get("is_ignore", False))
        is_pseudo = bool(rec.get("is_pseudo", False))
        default_source = "ignore" if is_ignore else "pseudo" if is_pseudo else "groundtruth"
        return Annotation(
            id=ann_id,
            image_id=int(_field(rec, "image_id", where)),
            box=Box.from_list(_field(rec, "bbox", where)),
            category=int(_field(rec, "category_id", where)),
            is_pseudo=is_pseudo,
            is_ignore=is_ignore,
            source=str(rec.get("source", default_source)),
        )
    except ParseError:
        raise
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from exc


def annotation_to_record(ann: Annotation) -> dict[str, Any]:
    return {
        "id": ann.id,
        "image_id": ann.image_id,
        "category_id": ann.category,
        "bbox": ann.box.to_list(),
        "area": ann.box.area,
        "iscrowd": 0,
        "is_pseudo": ann.is_pseudo,
        "is_ignore": ann.is_ignore,
        "source": ann.source,
    }


def dataset_from_dict(raw: Any, where: str = "dataset") -> Dataset:
    if not isinstance(raw, dict):
        raise ParseError(f"{where}: top level must be an object")
    images: dict[int, ImageExtent] = {}
    for rec in _field(raw, "images", where):
        try:
            img_id = int(_field(rec, "id", f"{where} image"))
            images[img_id] = ImageExtent(int(_field(rec, "width", f"image {img_id}")),
                                         int(_field(rec, "height", f"image {img_id}")))
        except ParseError:
            raise
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where} image record {rec!r}: {exc}") from exc
    categories: dict[int, str] = {}
    for rec in _field(raw, "categories", where):
        try:
            categories[int(_field(rec, "id", "category"))] = str(rec.get("name", ""))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where} category record {rec!r}: {exc}") from exc
    anns = [annotation_from_record(rec) for rec in _field(raw, "annotations", where)]
    return Dataset(images, categories, anns)


def dataset_to_dict(d: Dataset) -> dict[str, Any]:
    return {
        "images": [
            {"id": i, "width": e.width, "height": e.height} for i, e in sorted(d.images.items())
        ],
        "categories": [{"id": c, "name": n} for c, n in sorted(d.categories.items())],
        "annotations": [annotation_to_record(a) for a in d.annotations],
    }


def load_dataset(path: str | os.PathLike) -> Dataset:
    return dataset_from_dict(_read_json(path), where=str(path))


def save_annotations(d: Dataset, path: str | os.PathLike) -> None:
    d.validate()
    _write_json(dataset_to_dict(d), path)


save_dataset = save_annotations


# --- detection files --------------------------------------------------------


def detection_to_record(det: Detection) -> dict[str, Any]:
    return {
        "id": det.id,
        "image_id": det.image_id,
        "category_id": det.category,
        "bbox": det.box.to_list(),
        "score": det.score,
    }


def detections_from_list(raw: Any, where: str = "detections") -> list[Detection]:
    if not isinstance(raw, list):
        raise ParseError(f"{where}: results file must be a JSON array")
    out = []
    for i, rec in enumerate(raw):
        here = f"{where}[{i}]"
        try:
            score = float(_field(rec, "score", here))
            det_id = int(rec.get("id", i))
            if not 0.0 <= score <= 1.0:
                raise RangeError(f"{here} (id {det_id}): score {score} outside [0, 1]")
            out.append(
                Detection(
                    id=det_id,
                    image_id=int(_field(rec, "image_id", here)),
                    box=Box.from_list(_field(rec, "bbox", here)),
                    category=int(_field(rec, "category_id", here)),
                    score=score,
                )
            )
        except (ParseError, RangeError):
            raise
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{here}: {exc}") from exc
    ids = [d.id for d in out]
    if len(set(ids)) != len(ids):
        raise IntegrityError(f"{where}: duplicate detection ids")
    return out


def load_detections(path: str | os.PathLike) -> list[Detection]:
    return detections_from_list(_read_json(path), where=str(path))


def save_detections(dets: Iterable[Detection], path: str | os.PathLike,
                    extra: Mapping[int, Mapping[str, Any]] | None = None) -> None:
    """Write detections in results format; ``extra`` adds fields keyed by detection id."""
    records = []
    for det in dets:
        rec = detection_to_record(det)
        if extra and det.id in extra:
            rec.update(extra[det.id])
        records.append(rec)
    _write_json(records, path)


# --- embeddings -------------------------------------------------------------


def embedding_paths(stem: str | os.PathLike) -> tuple[Path, Path]:
    """Map a container name (or either of its files) to ``(data, manifest)``."""
    s = str(stem)
    for suffix in (".manifest.json", ".f32"):
        if s.endswith(suffix):
            s = s[: -len(suffix)]
    return Path(s + ".f32"), Path(s + ".manifest.json")


def load_embeddings(data_path: str | os.PathLike, manifest_path: str | os.PathLike | None = None
                    ) -> EmbeddingMatrix:
    if manifest_path is None:
        data_path, manifest_path = embedding_paths(data_path)
    manifest = _read_json(manifest_path)
    try:
        dim = int(manifest["dim"])
        rows = int(manifest["rows"])
        keys = [str(k) for k in manifest["keys"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{manifest_path}: bad manifest ({exc})") from exc
    if len(keys) != rows:
        raise ShapeError(f"{manifest_path}: {len(keys)} keys but rows={rows}")
    raw = Path(data_path).read_bytes()
    if dim <= 0 or len(raw) != rows * dim * 4:
        raise ShapeError(
            f"{data_path}: byte length {len(raw)} != rows*dim*4 = {rows}*{dim}*4"
        )
    vectors = np.frombuffer(raw, dtype="<f4").reshape(rows, dim).astype(np.float32)
    return EmbeddingMatrix(keys, vectors)


def save_embeddings(emb: EmbeddingMatrix, stem: str | os.PathLike) -> tuple[Path, Path]:
    data_path, manifest_path = embedding_paths(stem)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    data_path.write_bytes(np.ascontiguousarray(emb.vectors, dtype="<f4").tobytes())
    _write_json({"dim": emb.dim, "rows": len(emb), "keys": list(emb.keys)}, manifest_path)
    return data_path, manifest_path


# --- few-shot splits --------------------------------------------------------


def _shot_pool(d: Dataset, category: int) -> list[Annotation]:
    pool = [a for a in d.annotations
            if a.category == category and not a.is_ignore and not a.is_pseudo]
    return sorted(pool, key=lambda a: a.id)


def make_few_shot_split(d: Dataset, novel: Iterable[int], K: int, seed: int,
                        annotation_ids: Sequence[int] | None = None) -> FewShotSplit:
    """Sample exactly ``K`` annotations per novel category.

    Per category (ascending id), the pool is its ground-truth annotations sorted
    by id and ``K`` positions are drawn without replacement from one generator
    seeded with ``seed``. ``annotation_ids`` overrides the draw with a fixed
    published shot list.
    """
    novel_set = frozenset(int(c) for c in novel)
    missing = novel_set - set(d.categories)
    if missing:
        raise ValidationError(f"novel categories not in dataset: {sorted(missing)}")
    if K < 1:
        raise ValidationError("K must be positive")
    base = frozenset(d.categories) - novel_set
    chosen: list[Annotation] = []
    if annotation_ids is not None:
        by_id = {a.id: a for a in d.annotations}
        for ann_id in annotation_ids:
            if ann_id not in by_id:
                raise IntegrityError(f"shot list references missing annotation id {ann_id}")
            chosen.append(by_id[ann_id])
    else:
        rng = np.random.default_rng(seed)
        for c in sorted(novel_set):
            pool = _shot_pool(d, c)
            if len(pool) < K:
                raise InsufficientShots(f"category {c} has {len(pool)} annotations, need {K}")
            picks = np.sort(rng.choice(len(pool), size=K, replace=False))
            chosen.extend(pool[int(i)] for i in picks)
    shots = tuple(replace(a, source="fewshot", is_pseudo=False, is_ignore=False) for a in chosen)
    return FewShotSplit(base, novel_set, K, shots)


def split_to_dict(split: FewShotSplit) -> dict[str, Any]:
    return {
        "base_categories": sorted(split.base_categories),
        "novel_categories": sorted(split.novel_categories),
        "shots": split.shots,
        "novel_annotations": [annotation_to_record(a) for a in split.novel_annotations],
    }


def split_from_dict(raw: Any, where: str = "split") -> FewShotSplit:
    try:
        return FewShotSplit(
            base_categories=frozenset(int(c) for c in raw["base_categories"]),
            novel_categories=frozenset(int(c) for c in raw["novel_categories"]),
            shots=int(raw["shots"]),
            novel_annotations=tuple(annotation_from_record(r) for r in raw["novel_annotations"]),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{where}: bad split file ({exc})") from exc


def save_split(split: FewShotSplit, path: str | os.PathLike) -> None:
    _write_json(split_to_dict(split), path)


def load_split(path: str | os.PathLike) -> FewShotSplit:
    return split_from_dict(_read_json(path), where=str(path))


def read_json(path: str | os.PathLike) -> Any:
    return _read_json(path)


def write_json(obj: Any, path: str | os.PathLike) -> None:
    _write_json(obj, path)
