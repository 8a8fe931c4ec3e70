"""Candidate sourcing: keep confident novel-class detections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .datamodel import Detection, FewShotSplit
from .errors import ValidationError


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Detection, ...]
    threshold_q: float
    per_class_cap: int | None = None

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


def source_candidates(dets: Iterable[Detection] | CandidateSet, split: FewShotSplit,
                      q: float = 0.8, cap: int | None = None) -> CandidateSet:
    """Novel-class detections scoring strictly above ``q``.

    With ``cap`` set, each class keeps its ``cap`` best detections. Ranking and
    output order within a class is score descending, then image id, then input
    position; classes appear in ascending id order.
    """
    if not 0.0 <= q <= 1.0:
        raise ValidationError(f"threshold q={q} outside [0, 1]")
    if cap is not None and cap < 1:
        raise ValidationError(f"per-class cap must be positive, got {cap}")
    per_class: dict[int, list[tuple[int, Detection]]] = {}
    for pos, det in enumerate(dets):
        if det.category in split.novel_categories and det.score > q:
            per_class.setdefault(det.category, []).append((pos, det))
    kept: list[Detection] = []
    for c in sorted(per_class):
        ranked = sorted(per_class[c], key=lambda pd: (-pd[1].score, pd[1].image_id, pd[0]))
        if cap is not None:
            ranked = ranked[:cap]
        kept.extend(d for _, d in ranked)
    return CandidateSet(tuple(kept), float(q), cap)
