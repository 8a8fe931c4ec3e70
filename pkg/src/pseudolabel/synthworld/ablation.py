"""Cumulative ablation of the pseudo-labelling steps on a synthetic world."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from ..corrector import CascadeRegressor, FeatureProvider, HyperParams, build_training_set, train_cascade
from ..datamodel import Annotation, Dataset, Detection
from ..errors import MissingFeature
from ..evaluator import MetricsReport, coco_map
from ..pipeline import StageOptions, correct_all
from ..retrain_prep import assemble_retrain_set, emit_ignore_regions, pseudo_annotations
from ..sourcing import source_candidates
from ..verifier import build_knn, verify
from .surrogate import SurrogateParams, predict_surrogate, train_surrogate
from .world import (
    DetectorNoise,
    Simulation,
    WorldConfig,
    WorldTruth,
    generate_world,
    jitter_box,
    oracle_feature,
    simulate_detector,
)

ROWS = ("baseline", "sourcing", "verification", "correction")
_CORRECTOR_PROPOSALS, _BALANCED = 30, 40


@dataclass(frozen=True)
class PipelineParams:
    q: float = 0.8
    cap: int | None = None
    k: int | None = None
    corrector: HyperParams = HyperParams()
    corrector_proposals_per_object: int = 8
    corrector_jitter: float = 0.25
    surrogate: SurrogateParams = SurrogateParams()
    max_dets: int = 100

    @property
    def stage_options(self) -> StageOptions:
        return StageOptions(self.q, self.cap, self.k)

    def to_dict(self) -> dict[str, Any]:
        return {
            "q": self.q, "cap": self.cap, "k": self.k,
            "corrector": asdict(self.corrector),
            "corrector_proposals_per_object": self.corrector_proposals_per_object,
            "corrector_jitter": self.corrector_jitter,
            "surrogate": self.surrogate.to_dict(),
            "max_dets": self.max_dets,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "PipelineParams":
        kw = {k: raw[k] for k in ("q", "cap", "k", "corrector_proposals_per_object",
                                  "corrector_jitter", "max_dets") if k in raw}
        if "corrector" in raw:
            kw["corrector"] = HyperParams.from_dict(raw["corrector"])
        if "surrogate" in raw:
            kw["surrogate"] = SurrogateParams.from_dict(raw["surrogate"])
        return cls(**kw)


def balanced_fewshot_set(world: WorldTruth, seed: int) -> Dataset:
    """K annotations per base class plus the novel shots, on their images only.

    This is the balanced fine-tuning set a few-shot detector starts from; every
    other object in those images is background.
    """
    split = world.split
    rng = np.random.default_rng([seed, _BALANCED])
    chosen: list[Annotation] = []
    for c in sorted(split.base_categories):
        pool = sorted((a for a in world.dataset.annotations if a.category == c), key=lambda a: a.id)
        k = min(split.shots, len(pool))
        chosen.extend(pool[int(i)] for i in np.sort(rng.choice(len(pool), size=k, replace=False)))
    chosen.extend(split.novel_annotations)
    image_ids = {a.image_id for a in chosen}
    images = {i: e for i, e in world.dataset.images.items() if i in image_ids}
    return Dataset(images, dict(world.dataset.categories), sorted(chosen, key=lambda a: a.id))


def corrector_training_proposals(world: WorldTruth, known: Sequence[Annotation],
                                 params: PipelineParams, seed: int):
    """Jittered proposals with oracle features around every annotated object."""
    rng = np.random.default_rng([seed, _CORRECTOR_PROPOSALS])
    proposals: dict[int, list] = {}
    for ann in sorted(known, key=lambda a: a.id):
        obj = world.objects[ann.id]
        for _ in range(params.corrector_proposals_per_object):
            box = jitter_box(obj.box, params.corrector_jitter, rng, world.extent)
            proposals.setdefault(obj.image_id, []).append((box, oracle_feature(box, obj, world)))
    return proposals


def train_world_corrector(world: WorldTruth, params: PipelineParams, seed: int
                          ) -> CascadeRegressor:
    """Fit the cascade on what is labelled before pseudo-labelling: base GT and the shots."""
    split = world.split
    known = [a for a in world.dataset.annotations if a.category in split.base_categories]
    known += list(split.novel_annotations)
    proposals = corrector_training_proposals(world, known, params, seed)
    return train_cascade(build_training_set(proposals, known), params.corrector)


def oracle_provider(world: WorldTruth, origin: Mapping[int, int | None]) -> FeatureProvider:
    def feature(box, det: Detection) -> np.ndarray:
        obj_id = origin.get(det.id)
        if obj_id is None:
            raise MissingFeature(f"detection {det.id} has no hidden object")
        return oracle_feature(box, world.objects[obj_id], world)

    return FeatureProvider.oracle(feature)


@dataclass
class AblationResult:
    seed: int
    rows: dict[str, MetricsReport] = field(default_factory=dict)
    no_ignore: MetricsReport | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def nap(self, row: str) -> float:
        v = self.rows[row]["nAP"]
        return 0.0 if v is None else v

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "rows": {name: rep.to_flat() for name, rep in self.rows.items()},
            "no_ignore": None if self.no_ignore is None else self.no_ignore.to_flat(),
            "counts": dict(self.counts),
        }


def baseline_report(world: WorldTruth, params: PipelineParams, seed: int) -> MetricsReport:
    """Surrogate trained on the balanced few-shot set alone."""
    model = train_surrogate(world, balanced_fewshot_set(world, seed), params.surrogate, seed)
    return coco_map(predict_surrogate(model, world, seed), world.test_dataset, world.split,
                    params.max_dets)


def retrained_report(world: WorldTruth, novel: Sequence[Detection], accepted: Sequence[Detection],
                     params: PipelineParams, seed: int, use_ignores: bool = True) -> MetricsReport:
    """Retrain the surrogate on base GT, shots and ``accepted`` pseudo-labels, then score it.

    Novel detections outside ``accepted`` become ignore regions unless ``use_ignores`` is off.
    """
    ignores = emit_ignore_regions(novel, accepted) if use_ignores else []
    assembled = assemble_retrain_set(world.dataset, world.split, pseudo_annotations(accepted), ignores)
    model = train_surrogate(world, assembled, params.surrogate, seed)
    return coco_map(predict_surrogate(model, world, seed), world.test_dataset, world.split,
                    params.max_dets)


def evaluate_stages(world: WorldTruth, train_sim: Simulation, params: PipelineParams, seed: int,
                    with_ignore_ablation: bool = True) -> AblationResult:
    split = world.split
    opts = params.stage_options
    dets = train_sim.detections
    novel = [d for d in dets if d.category in split.novel_categories]
    cands = source_candidates(dets, split, opts.q, opts.cap)
    clf = build_knn(split, world.true_embeddings, opts.resolve_k(split.shots))
    outcome = verify(cands.candidates, clf, train_sim.embeddings)
    model = train_world_corrector(world, params, seed)
    corrected, _ = correct_all(model, outcome.verified, oracle_provider(world, train_sim.origin),
                               world.dataset.images)

    result = AblationResult(seed)
    result.counts = {"novel_detections": len(novel), "candidates": len(cands),
                     "verified": len(outcome.verified), "rejected": len(outcome.rejected)}
    result.rows["baseline"] = baseline_report(world, params, seed)
    for name, accepted in (("sourcing", cands.candidates), ("verification", outcome.verified),
                           ("correction", corrected)):
        result.rows[name] = retrained_report(world, novel, accepted, params, seed)
    if with_ignore_ablation:
        result.no_ignore = retrained_report(world, novel, corrected, params, seed, use_ignores=False)
    return result


def run_ablation(cfg: WorldConfig, noise: DetectorNoise, params: PipelineParams, seed: int,
                 with_ignore_ablation: bool = True) -> AblationResult:
    """Few-shot baseline, then retraining after each cumulative step, scored on held-out images."""
    world = generate_world(cfg, seed)
    train_sim = simulate_detector(world, noise, seed)
    return evaluate_stages(world, train_sim, params, seed, with_ignore_ablation)


def ablation_table(results: Sequence[AblationResult]) -> dict[str, Any]:
    """Machine-readable table: one row per step with per-seed and mean nAP/nAP50/nAP75."""
    table: dict[str, Any] = {"seeds": [r.seed for r in results], "rows": []}
    names = list(ROWS) + (["correction_without_ignore"] if all(r.no_ignore for r in results) else [])
    for name in names:
        reps = [r.no_ignore if name == "correction_without_ignore" else r.rows[name] for r in results]
        row: dict[str, Any] = {"method": name}
        for key in ("nAP", "nAP50", "nAP75", "bAP", "bAP50", "bAP75"):
            vals = [rep[key] for rep in reps]
            row[key] = vals
            row[f"mean_{key}"] = float(np.mean([v for v in vals if v is not None])) \
                if any(v is not None for v in vals) else None
        table["rows"].append(row)
    table["per_seed"] = [r.to_dict() for r in results]
    return table
