"""COCO-style detection metrics.

Matching is greedy in descending score order; each detection takes the
unmatched ground truth with the highest IoU at or above the threshold.
Ignore-flagged annotations behave like COCO crowd regions: they never count
as ground truth, and a detection that can only be matched to one is dropped
from the precision/recall accumulation. AP is the 101-point interpolated area
under the precision envelope.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datamodel import Annotation, Dataset, Detection, FewShotSplit
from .errors import NoGroundTruth
from .geometry import boxes_to_array, iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # exact i/100, so a recall of 7/20 reaches 0.35
SMALL_AREA = (0.0, 32.0 ** 2)


@dataclass
class MatchResult:
    order: list[int]  # detection indices in processing order
    is_tp: list[bool]
    is_ignored: list[bool]
    matched_gt: list[int | None]  # annotation id per detection
    gt_matched: list[bool]
    iou_threshold: float
    n_gt: int = 0  # non-ignored ground truth in the slice


def _in_area(area: float, area_range: tuple[float, float] | None) -> bool:
    return area_range is None or area_range[0] <= area < area_range[1]


def _match_slice(dets: Sequence[Detection], gts: Sequence[Annotation], ious: np.ndarray,
                 iou_t: float, area_range: tuple[float, float] | None) -> MatchResult:
    n, m = len(dets), len(gts)
    order = sorted(range(n), key=lambda i: -dets[i].score)
    real = [not g.is_ignore and _in_area(g.box.area, area_range) for g in gts]
    gt_matched = [False] * m
    is_tp = [False] * n
    is_ignored = [False] * n
    matched: list[int | None] = [None] * n
    for i in order:
        best, best_iou = -1, -1.0
        for j in range(m):
            if real[j] and not gt_matched[j] and ious[i, j] >= iou_t and ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best >= 0:
            gt_matched[best] = True
            is_tp[i] = True
            matched[i] = gts[best].id
            continue
        for j in range(m):
            if not real[j] and ious[i, j] >= iou_t:
                is_ignored[i] = True
                matched[i] = gts[j].id
                break
        if not is_ignored[i] and not _in_area(dets[i].box.area, area_range):
            is_ignored[i] = True
    return MatchResult(order, is_tp, is_ignored, matched, gt_matched, iou_t, sum(real))


def match(dets: Sequence[Detection], gts: Sequence[Annotation], iou_t: float,
          area_range: tuple[float, float] | None = None) -> MatchResult:
    """Greedy matching within one (image, class) slice."""
    ious = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array([g.box for g in gts]))
    return _match_slice(dets, gts, ious, iou_t, area_range)


# --- accumulation -----------------------------------------------------------


def _group(items: Iterable, category: int | None) -> dict[int, list]:
    out: dict[int, list] = {}
    for it in items:
        if category is None or it.category == category:
            out.setdefault(it.image_id, []).append(it)
    return out


def _top(dets: list[Detection], max_dets: int | None) -> list[Detection]:
    ranked = sorted(dets, key=lambda d: -d.score)
    return ranked if max_dets is None else ranked[:max_dets]


@dataclass
class _Accumulated:
    scores: np.ndarray
    tp: np.ndarray
    n_gt: int


def _accumulate(dets: Sequence[Detection], gts: Sequence[Annotation], thresholds: Sequence[float],
                category: int | None, max_dets: int | None,
                area_range: tuple[float, float] | None) -> list[_Accumulated]:
    det_by_img = _group(dets, category)
    gt_by_img = _group(gts, category)
    per_t_scores: list[list[float]] = [[] for _ in thresholds]
    per_t_tp: list[list[bool]] = [[] for _ in thresholds]
    n_gt = [0] * len(thresholds)
    for img in sorted(set(det_by_img) | set(gt_by_img)):
        d_img = _top(det_by_img.get(img, []), max_dets)
        g_img = gt_by_img.get(img, [])
        ious = iou_matrix(boxes_to_array([d.box for d in d_img]),
                          boxes_to_array([g.box for g in g_img]))
        for ti, t in enumerate(thresholds):
            res = _match_slice(d_img, g_img, ious, t, area_range)
            n_gt[ti] += res.n_gt
            for i in res.order:
                if not res.is_ignored[i]:
                    per_t_scores[ti].append(d_img[i].score)
                    per_t_tp[ti].append(res.is_tp[i])
    out = []
    for ti in range(len(thresholds)):
        scores = np.asarray(per_t_scores[ti], dtype=np.float64)
        tp = np.asarray(per_t_tp[ti], dtype=bool)
        order = np.argsort(-scores, kind="mergesort")
        out.append(_Accumulated(scores[order], tp[order], n_gt[ti]))
    return out


def _pr_arrays(acc: _Accumulated) -> tuple[np.ndarray, np.ndarray]:
    tps = np.cumsum(acc.tp, dtype=np.float64)
    fps = np.cumsum(~acc.tp, dtype=np.float64)
    recall = tps / acc.n_gt
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tps + fps > 0, tps / (tps + fps), 0.0)
    return recall, precision


def interpolated_ap(recall: Sequence[float], precision: Sequence[float]) -> float:
    """101-point interpolated AP of a cumulative PR sequence."""
    r = np.asarray(recall, dtype=np.float64)
    p = np.asarray(precision, dtype=np.float64)
    if r.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    idx = np.searchsorted(r, RECALL_POINTS, side="left")
    sampled = np.where(idx < r.size, envelope[np.minimum(idx, r.size - 1)], 0.0)
    return float(sampled.mean())


def _ap(acc: _Accumulated) -> float | None:
    if acc.n_gt == 0:
        return None
    return interpolated_ap(*_pr_arrays(acc))


def average_precision(dets: Sequence[Detection], gts: Sequence[Annotation], iou_t: float,
                      category: int | None = None, max_dets: int | None = 100,
                      area_range: tuple[float, float] | None = None) -> float | None:
    """AP of one class (or of the given slice when ``category`` is None).

    Returns None when there is no ground truth to recall.
    """
    return _ap(_accumulate(dets, gts, [iou_t], category, max_dets, area_range)[0])


def pr_curve(dets: Sequence[Detection], gts: Sequence[Annotation], iou_t: float,
             category: int | None, max_dets: int | None = 100) -> list[tuple[float, float]]:
    """Cumulative ``(recall, precision)`` after each counted detection."""
    acc = _accumulate(dets, gts, [iou_t], category, max_dets, None)[0]
    if acc.n_gt == 0:
        raise NoGroundTruth(f"category {category} has no ground truth")
    recall, precision = _pr_arrays(acc)
    return list(zip(recall.tolist(), precision.tolist()))


def write_pr_csv(points: Sequence[tuple[float, float]], path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision"])
        for r, p in points:
            w.writerow([f"{r:.6f}", f"{p:.6f}"])


# --- recall -----------------------------------------------------------------


@dataclass
class RecallResult:
    ar: float
    per_class: dict[int, float]
    min_recall: float


def average_recall(proposals: Sequence[Detection], gts: Sequence[Annotation], iou_t: float = 0.5,
                   top_n: int = 100, categories: Iterable[int] | None = None,
                   class_agnostic: bool = True) -> RecallResult:
    """Per-class recall using at most ``top_n`` proposals per image.

    Class-agnostic proposals may cover ground truth of any class; otherwise a
    proposal only recalls ground truth of its own category.
    """
    cats = None if categories is None else set(categories)
    gt_by_img = _group([g for g in gts if cats is None or g.category in cats], None)
    prop_by_img = _group(proposals, None)
    hit: dict[int, int] = {}
    total: dict[int, int] = {}
    for img, g_img in gt_by_img.items():
        props = _top(prop_by_img.get(img, []), max(top_n, 0))
        for c in sorted({g.category for g in g_img}):
            g_c = [g for g in g_img if g.category == c]
            p_c = props if class_agnostic else [p for p in props if p.category == c]
            res = match(p_c, g_c, iou_t)
            total[c] = total.get(c, 0) + res.n_gt
            hit[c] = hit.get(c, 0) + sum(res.gt_matched)
    per_class = {c: hit[c] / total[c] for c in sorted(total) if total[c] > 0}
    if not per_class:
        return RecallResult(0.0, {}, 0.0)
    vals = list(per_class.values())
    return RecallResult(float(np.mean(vals)), per_class, float(min(vals)))


# --- full report ------------------------------------------------------------


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float | None]] = field(default_factory=dict)
    summary: dict[str, float | None] = field(default_factory=dict)
    per_class_recall: dict[int, float] = field(default_factory=dict)
    ar: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float | None:
        return self.summary[key]

    def to_flat(self) -> dict[str, float | None]:
        flat: dict[str, float | None] = dict(self.summary)
        flat.update(self.ar)
        for c, vals in sorted(self.per_class.items()):
            for k, v in vals.items():
                flat[f"class{c}/{k}"] = v
        for c, v in sorted(self.per_class_recall.items()):
            flat[f"class{c}/R50"] = v
        return flat


def _gt_list(gts: Dataset | Sequence[Annotation]) -> list[Annotation]:
    return list(gts.annotations) if isinstance(gts, Dataset) else list(gts)


def coco_map(dets: Sequence[Detection], gts: Dataset | Sequence[Annotation], split: FewShotSplit,
             max_dets: int = 100, with_small: bool = True) -> MetricsReport:
    """AP@[.5:.95], AP50 and AP75 per class, aggregated over novel and base classes."""
    gt = _gt_list(gts)
    report = MetricsReport()
    for c in sorted(split.base_categories | split.novel_categories):
        accs = _accumulate(dets, gt, IOU_THRESHOLDS, c, max_dets, None)
        aps = [_ap(a) for a in accs]
        if aps[0] is None:
            continue
        entry: dict[str, float | None] = {"AP": float(np.mean(aps)), "AP50": aps[0], "AP75": aps[5]}
        if with_small:
            small = _accumulate(dets, gt, IOU_THRESHOLDS, c, max_dets, SMALL_AREA)
            entry["APs"] = _mean(_ap(a) for a in small)
        report.per_class[c] = entry
        r50 = accs[0]
        report.per_class_recall[c] = float(r50.tp.sum() / r50.n_gt)
    for prefix, group in (("n", split.novel_categories), ("b", split.base_categories)):
        rows = [report.per_class[c] for c in sorted(group) if c in report.per_class]
        for key in ("AP", "AP50", "AP75") + (("APs",) if with_small else ()):
            report.summary[f"{prefix}{key}"] = _mean(r.get(key) for r in rows)
        recalls = [report.per_class_recall[c] for c in sorted(group) if c in report.per_class_recall]
        report.summary[f"{prefix}R50"] = _mean(recalls)
        report.summary[f"min_{prefix}R50"] = float(min(recalls)) if recalls else None
    return report


def add_proposal_recall(report: MetricsReport, proposals: Sequence[Detection],
                        gts: Dataset | Sequence[Annotation], split: FewShotSplit,
                        top_ns: Sequence[int] = (100, 1000), iou_t: float = 0.5) -> MetricsReport:
    """Attach nAR/bAR@N from class-agnostic proposals to ``report``."""
    gt = _gt_list(gts)
    for n in top_ns:
        for prefix, group in (("n", split.novel_categories), ("b", split.base_categories)):
            res = average_recall(proposals, gt, iou_t, n, group)
            report.ar[f"{prefix}AR{int(iou_t * 100)}@{n}"] = res.ar
            report.ar[f"min_{prefix}R{int(iou_t * 100)}@{n}"] = res.min_recall
    return report


def is_finite_report(flat: Mapping[str, float | None]) -> bool:
    return all(v is None or math.isfinite(v) for v in flat.values())
