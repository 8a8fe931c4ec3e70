"""Independent brute-force reference implementations used by the test suite.

They are written from the operation contracts, favour clarity over speed and
share no code with the package beyond the data classes and scalar IoU.
"""

from __future__ import annotations

import math
from fractions import Fraction

from pseudolabel.geometry import iou


# --- kNN --------------------------------------------------------------------


def cosine(a, b) -> float:
    dot = math.fsum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))


def knn_label(rows, labels, k, query) -> int:
    """Scan every row; rank by (-similarity, row index); majority vote, earliest neighbour wins ties."""
    scored = [(-cosine(r, query), i) for i, r in enumerate(rows)]
    scored.sort()
    top = [labels[i] for _, i in scored[:k]]
    best_label, best_count = None, -1
    for lab in top:  # first occurrence order = best-ranked neighbour order
        count = top.count(lab)
        if count > best_count:
            best_label, best_count = lab, count
    return best_label


# --- ignore-aware assignment ------------------------------------------------


def assign_roi(proposal, gts, ignores, fg=0.5, bg=0.5):
    """Returns (outcome, category) following the written rules."""
    if any(iou(proposal, g.box) > 0.5 for g in ignores):
        return ("ignored", None)
    best, best_cat = None, None
    for g in gts:
        v = iou(proposal, g.box)
        if best is None or v > best:
            best, best_cat = v, g.category
    if best is not None and best >= fg:
        return ("positive", best_cat)
    if best is None or best < bg:
        return ("negative", None)
    return ("ignored", None)


def assign_rpn(proposal, gts, ignores, fg=0.5, bg=0.5):
    if any(iou(proposal, g.box) > 0.5 for g in ignores):
        return ("positive", None)
    return assign_roi(proposal, gts, [], fg, bg)


# --- evaluation -------------------------------------------------------------


def _greedy(dets, gts, t):
    """Greedy matching in one (image, class) slice: list of (score, is_tp) for counted detections."""
    dets = sorted(dets, key=lambda d: -d.score)
    taken = [False] * len(gts)
    out = []
    for d in dets:
        best_j, best_v = None, None
        for j, g in enumerate(gts):
            if g.is_ignore or taken[j]:
                continue
            v = iou(d.box, g.box)
            if v >= t and (best_v is None or v > best_v):
                best_j, best_v = j, v
        if best_j is not None:
            taken[best_j] = True
            out.append((d.score, True))
        elif any(g.is_ignore and iou(d.box, g.box) >= t for g in gts):
            continue
        else:
            out.append((d.score, False))
    return out, sum(taken)


def pr_points(dets, gts, t, category, max_dets=100):
    """Cumulative (recall as Fraction, precision) points and the ground-truth count."""
    images = sorted({d.image_id for d in dets} | {g.image_id for g in gts})
    counted, n_gt = [], 0
    for img in images:
        d_img = sorted((d for d in dets if d.image_id == img and d.category == category),
                       key=lambda d: -d.score)[:max_dets]
        g_img = [g for g in gts if g.image_id == img and g.category == category]
        n_gt += sum(1 for g in g_img if not g.is_ignore)
        counted.extend(_greedy(d_img, g_img, t)[0])
    counted.sort(key=lambda st: -st[0])
    points, tp = [], 0
    for n, (_, hit) in enumerate(counted, start=1):
        tp += hit
        points.append((Fraction(tp, n_gt) if n_gt else None, tp / n))
    return points, n_gt


def ap(dets, gts, t, category, max_dets=100):
    points, n_gt = pr_points(dets, gts, t, category, max_dets)
    if n_gt == 0:
        return None
    total = 0.0
    for i in range(101):
        reach = [p for r, p in points if r >= Fraction(i, 100)]
        total += max(reach) if reach else 0.0
    return total / 101


def coco(dets, gts, novel, base, max_dets=100):
    """Dict with nAP/nAP50/nAP75 and the base equivalents."""
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    per = {}
    for c in sorted(novel | base):
        aps = [ap(dets, gts, round(t, 2), c, max_dets) for t in thresholds]
        if aps[0] is not None:
            per[c] = (sum(aps) / 10, aps[0], aps[5])
    out = {}
    for prefix, group in (("n", novel), ("b", base)):
        rows = [per[c] for c in sorted(group) if c in per]
        for i, key in enumerate(("AP", "AP50", "AP75")):
            out[prefix + key] = sum(r[i] for r in rows) / len(rows) if rows else None
    return out


def recall(proposals, gts, t, top_n):
    """Per-class recall with class-agnostic proposals, at most top_n per image."""
    hit, total = {}, {}
    for img in sorted({g.image_id for g in gts}):
        props = sorted((p for p in proposals if p.image_id == img), key=lambda p: -p.score)[:top_n]
        g_img = [g for g in gts if g.image_id == img]
        for c in sorted({g.category for g in g_img}):
            g_c = [g for g in g_img if g.category == c]
            _, matched = _greedy(props, g_c, t)
            hit[c] = hit.get(c, 0) + matched
            total[c] = total.get(c, 0) + sum(1 for g in g_c if not g.is_ignore)
    return {c: hit[c] / total[c] for c in total if total[c]}
