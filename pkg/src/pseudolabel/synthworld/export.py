"""Write a simulated world to disk in the formats the pipeline stages read."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from ..corrector import FeatureProvider, build_training_set, save_pairs
from ..datamodel import (
    Dataset,
    EmbeddingMatrix,
    read_json,
    save_annotations,
    save_detections,
    save_embeddings,
    save_split,
    write_json,
)
from ..errors import ParseError
from .ablation import PipelineParams, corrector_training_proposals, oracle_provider
from .world import DetectorNoise, WorldConfig, WorldTruth, generate_world, simulate_detector

WORLD_FILE = "world.json"
TRUTH_LOG = "truth.jsonl"


def fewshot_view(world: WorldTruth) -> Dataset:
    """What a few-shot learner is given: every base annotation plus the K novel shots."""
    split = world.split
    anns = [a for a in world.dataset.annotations if a.category in split.base_categories]
    anns += list(split.novel_annotations)
    return world.dataset.with_annotations(sorted(anns, key=lambda a: a.id))


def export_simulation(out_dir: str | Path, cfg: WorldConfig, noise: DetectorNoise,
                      params: PipelineParams, seed: int) -> list[Path]:
    """Generate, simulate and write every artifact; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = generate_world(cfg, seed)
    sim = simulate_detector(world, noise, seed)
    view = fewshot_view(world)
    written: list[Path] = []

    def put(name: str) -> Path:
        written.append(out / name)
        return out / name

    write_json({"seed": seed, "world": cfg.to_dict(), "noise": noise.to_dict(),
                "pipeline": params.to_dict()}, put(WORLD_FILE))
    save_annotations(view, put("dataset.json"))
    save_annotations(world.dataset, put("groundtruth.json"))
    save_annotations(world.test_dataset, put("test_groundtruth.json"))
    save_split(world.split, put("split.json"))
    save_detections(sim.detections, put("detections.json"))
    known = [str(a.id) for a in view.annotations]
    shot_emb = EmbeddingMatrix(known, np.stack([world.true_embeddings.row(k) for k in known]))
    written.extend(save_embeddings(shot_emb, out / "shot_embeddings"))
    written.extend(save_embeddings(sim.embeddings, out / "det_embeddings"))
    proposals = corrector_training_proposals(world, view.annotations, params, seed)
    save_pairs(build_training_set(proposals, view.annotations)[0], put("corrector_pairs.json"))
    with open(put(TRUTH_LOG), "w", encoding="utf-8") as fh:
        for event in world.events + sim.events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")
    return written


def load_world(world_dir: str | Path) -> tuple[WorldTruth, dict[str, Any]]:
    """Regenerate the hidden world recorded in ``world.json`` (generation is deterministic)."""
    raw = read_json(Path(world_dir) / WORLD_FILE)
    try:
        cfg, seed = WorldConfig.from_dict(raw["world"]), int(raw["seed"])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{world_dir}: bad {WORLD_FILE} ({exc})") from exc
    return generate_world(cfg, seed), raw


def detection_origins(world_dir: str | Path) -> dict[int, int | None]:
    """Detection id -> hidden object id, read back from the truth log."""
    origin: dict[int, int | None] = {}
    with open(Path(world_dir) / TRUTH_LOG, encoding="utf-8") as fh:
        for line in fh:
            ev = json.loads(line)
            if ev.get("event") == "detect":
                origin[int(ev["det_id"])] = int(ev["object_id"])
            elif ev.get("event") == "spurious":
                origin[int(ev["det_id"])] = None
    return origin


def oracle_from_dir(world_dir: str | Path) -> FeatureProvider:
    world, _ = load_world(world_dir)
    return oracle_provider(world, detection_origins(world_dir))
