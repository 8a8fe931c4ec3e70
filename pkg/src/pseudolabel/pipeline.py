"""Source -> verify -> correct -> emit -> assemble, as one in-process run."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

from .corrector import CascadeRegressor, FeatureProvider, correct
from .datamodel import Annotation, Dataset, Detection, EmbeddingMatrix, FewShotSplit
from .errors import CollapsedBoxWarning, MissingFeature
from .retrain_prep import assemble_retrain_set, emit_ignore_regions, pseudo_annotations
from .sourcing import CandidateSet, source_candidates
from .verifier import VerificationOutcome, build_knn, k_for_shots, verify

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageOptions:
    q: float = 0.8
    cap: int | None = None
    k: int | None = None  # None applies k_for_shots

    def resolve_k(self, shots: int) -> int:
        return self.k if self.k is not None else k_for_shots(shots)


@dataclass
class StageArtifacts:
    candidates: CandidateSet
    outcome: VerificationOutcome
    corrected: list[Detection]
    ignores: list[Annotation]
    pseudo: list[Annotation]
    retrain_set: Dataset
    collapsed: list[int] = field(default_factory=list)  # candidate ids kept uncorrected


def correct_all(model: CascadeRegressor, dets: Sequence[Detection], fp: FeatureProvider,
                images: dict) -> tuple[list[Detection], list[int]]:
    """Correct every detection; those without a feature keep their box."""
    out, skipped = [], []
    for det in dets:
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", CollapsedBoxWarning)
                box = correct(model, det, fp, images[det.image_id])
            if caught:
                skipped.append(det.id)
        except MissingFeature:
            box = det.box
            skipped.append(det.id)
        out.append(Detection(det.id, det.image_id, box, det.category, det.score))
    if skipped:
        log.warning("%d candidates kept their original or last valid box", len(skipped))
    return out, skipped


def run_stages(dataset: Dataset, split: FewShotSplit, detections: Sequence[Detection],
               shot_emb: EmbeddingMatrix, det_emb: EmbeddingMatrix, opts: StageOptions,
               model: CascadeRegressor | None, fp: FeatureProvider | None,
               use_ignores: bool = True) -> StageArtifacts:
    cands = source_candidates(detections, split, opts.q, opts.cap)
    clf = build_knn(split, shot_emb, opts.resolve_k(split.shots))
    outcome = verify(cands.candidates, clf, det_emb)
    if model is not None and fp is not None:
        corrected, collapsed = correct_all(model, outcome.verified, fp, dataset.images)
    else:
        corrected, collapsed = list(outcome.verified), []
    novel = [d for d in detections if d.category in split.novel_categories]
    ignores = emit_ignore_regions(novel, outcome) if use_ignores else []
    pseudo = pseudo_annotations(corrected)
    retrain = assemble_retrain_set(dataset, split, pseudo, ignores)
    return StageArtifacts(cands, outcome, corrected, ignores, pseudo, retrain, collapsed)
