"""Retraining annotation set assembly and ignore-aware proposal assignment."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .datamodel import Annotation, Dataset, Detection, FewShotSplit
from .errors import IntegrityError, ValidationError
from .geometry import Box, iou
from .verifier import VerificationOutcome

IGNORE_IOU = 0.5

POSITIVE = "positive"
NEGATIVE = "negative"
IGNORED = "ignored"


@dataclass(frozen=True)
class RoiAssignment:
    outcome: str
    matched_iou: float
    category: int | None = None  # None for class-agnostic objectness positives
    matched_index: int | None = None  # index into the gts (or ignores) list that decided it

    def __post_init__(self) -> None:
        if self.outcome not in (POSITIVE, NEGATIVE, IGNORED):
            raise ValidationError(f"unknown assignment outcome {self.outcome!r}")
        if not 0.0 <= self.matched_iou <= 1.0:
            raise ValidationError(f"matched_iou {self.matched_iou} outside [0, 1]")


def detection_to_annotation(det: Detection, ann_id: int, *, ignore: bool = False) -> Annotation:
    return Annotation(
        id=ann_id,
        image_id=det.image_id,
        box=det.box,
        category=det.category,
        is_pseudo=not ignore,
        is_ignore=ignore,
        source="ignore" if ignore else "pseudo",
    )


def pseudo_annotations(dets: Iterable[Detection], start_id: int = 1) -> list[Annotation]:
    return [detection_to_annotation(d, start_id + i) for i, d in enumerate(dets)]


def emit_ignore_regions(all_novel_dets: Iterable[Detection], verified: VerificationOutcome
                        | Iterable[Detection], novel: Iterable[int] | None = None,
                        start_id: int = 1) -> list[Annotation]:
    """Every novel-class detection that did not survive verification.

    Sub-threshold detections that never became candidates are included.
    ``verified`` may be an outcome or a plain list of accepted detections.
    """
    accepted = verified.verified if isinstance(verified, VerificationOutcome) else verified
    accepted_ids = {d.id for d in accepted}
    novel_set = None if novel is None else set(novel)
    out = []
    for det in all_novel_dets:
        if novel_set is not None and det.category not in novel_set:
            continue
        if det.id in accepted_ids:
            continue
        out.append(detection_to_annotation(det, start_id + len(out), ignore=True))
    return out


def _best(box: Box, anns: Sequence[Annotation]) -> tuple[float, int | None]:
    best_iou, best_idx = 0.0, None
    for i, a in enumerate(anns):
        v = iou(box, a.box)
        if best_idx is None or v > best_iou:
            best_iou, best_idx = v, i
    return best_iou, best_idx


def _check_thresholds(fg_iou: float, bg_iou: float) -> None:
    if fg_iou < bg_iou:
        raise ValidationError(f"fg_iou {fg_iou} < bg_iou {bg_iou}")


def assign_roi(proposal: Box, gts: Sequence[Annotation], ignores: Sequence[Annotation],
               fg_iou: float = 0.5, bg_iou: float = 0.5) -> RoiAssignment:
    """Second-stage label for one proposal.

    Overlap above 0.5 with any ignore region screens the proposal out before
    ground truth is considered. Otherwise best ground-truth IoU >= ``fg_iou``
    is positive, below ``bg_iou`` negative, and the band in between ignored.
    """
    _check_thresholds(fg_iou, bg_iou)
    ign_iou, ign_idx = _best(proposal, ignores)
    if ign_idx is not None and ign_iou > IGNORE_IOU:
        return RoiAssignment(IGNORED, ign_iou, None, ign_idx)
    gt_iou, gt_idx = _best(proposal, gts)
    if gt_idx is not None and gt_iou >= fg_iou:
        return RoiAssignment(POSITIVE, gt_iou, gts[gt_idx].category, gt_idx)
    if gt_iou < bg_iou:
        return RoiAssignment(NEGATIVE, gt_iou, None, gt_idx)
    return RoiAssignment(IGNORED, gt_iou, None, gt_idx)


def assign_rpn(proposal: Box, gts: Sequence[Annotation], ignores: Sequence[Annotation],
               fg_iou: float = 0.5, bg_iou: float = 0.5) -> RoiAssignment:
    """RPN label: as :func:`assign_roi` but ignore regions count as objects."""
    _check_thresholds(fg_iou, bg_iou)
    ign_iou, ign_idx = _best(proposal, ignores)
    if ign_idx is not None and ign_iou > IGNORE_IOU:
        return RoiAssignment(POSITIVE, ign_iou, None, ign_idx)
    return assign_roi(proposal, gts, (), fg_iou, bg_iou)


def assemble_retrain_set(base_gt: Dataset, split: FewShotSplit, pseudo: Sequence[Annotation],
                         ignores: Sequence[Annotation]) -> Dataset:
    """Base ground truth + few-shot annotations + pseudo-annotations + ignore regions.

    Base ground truth is every non-pseudo, non-ignore annotation of a base
    category in ``base_gt``. Pseudo and ignore annotations are renumbered
    after the largest kept id.
    """
    base = [a for a in base_gt.annotations
            if a.category in split.base_categories and not a.is_pseudo and not a.is_ignore]
    shots = list(split.novel_annotations)
    merged = base + shots
    ids = [a.id for a in merged]
    if len(set(ids)) != len(ids):
        raise IntegrityError("few-shot annotation ids collide with base annotation ids")
    next_id = max(ids, default=0) + 1
    for a in pseudo:
        merged.append(replace(a, id=next_id, is_pseudo=True, is_ignore=False, source="pseudo"))
        next_id += 1
    for a in ignores:
        merged.append(replace(a, id=next_id, is_pseudo=False, is_ignore=True, source="ignore"))
        next_id += 1
    for a in merged:
        if a.image_id not in base_gt.images:
            raise IntegrityError(f"annotation {a.id} references image {a.image_id} "
                                 "outside the base image table")
    return Dataset(dict(base_gt.images), dict(base_gt.categories), merged)
