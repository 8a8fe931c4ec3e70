"""Command line entry point: ``pseudolabel <subcommand> ...``.

Every subcommand accepts ``--config <json>``; values resolve as
flags > config file > built-in defaults, and relative paths in a config file
are taken relative to that file. Each run writes a manifest with the resolved
config, its hash, the seed and sha256 checksums of inputs and artifacts.

Exit status: 0 success, 1 validation or usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from . import __version__
from .corrector import (
    FeatureProvider,
    HyperParams,
    TrainingReport,
    load_model,
    load_pairs,
    save_model,
    stage_sets,
    train_cascade,
)
from .datamodel import (
    Annotation,
    Dataset,
    Detection,
    annotation_from_record,
    annotation_to_record,
    embedding_paths,
    load_dataset,
    load_detections,
    load_embeddings,
    load_split,
    read_json,
    save_annotations,
    save_detections,
    write_json,
)
from .errors import PseudoLabelError, ValidationError
from .evaluator import IOU_THRESHOLDS, add_proposal_recall, coco_map, pr_curve, write_pr_csv
from .pipeline import correct_all
from .retrain_prep import assemble_retrain_set, emit_ignore_regions, pseudo_annotations
from .sourcing import source_candidates
from .verifier import build_knn, k_for_shots, verify

log = logging.getLogger("pseudolabel")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
ROWS = ("baseline", "sourcing", "verification", "correction")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- config resolution and manifests ---------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# where results go is not part of what was computed
OUTPUT_KEYS = frozenset({"out", "out_dir", "out_verified", "out_rejected", "out_ignore",
                         "report", "pr_dir"})


def config_hash(config: dict[str, Any], path_keys: Iterable[str] = (),
                inputs: Mapping[str, str] | None = None) -> str:
    """Digest of the settings; paths count by content (input checksum) or name, not location."""
    inputs = inputs or {}

    def content(v: Any) -> Any:
        if isinstance(v, list):
            return [content(x) for x in v]
        if not isinstance(v, str):
            return v
        return f"sha256:{inputs[v]}" if v in inputs else Path(v).name

    path_keys = set(path_keys)
    config = {k: (content(v) if k in path_keys and v is not None else v)
              for k, v in config.items() if k not in OUTPUT_KEYS}
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class Settings:
    """Resolves each option as flag > config file > default and records the result."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config: dict[str, Any] = {}
        self.config_dir = Path(".")
        if getattr(args, "config", None):
            raw = read_json(args.config)
            if not isinstance(raw, dict):
                raise ValidationError(f"{args.config}: config must be a JSON object")
            self.config = raw
            self.config_dir = Path(args.config).parent
        self.resolved: dict[str, Any] = {}
        self.path_keys: set[str] = set()

    def get(self, key: str, default: Any = None, path: bool = False) -> Any:
        value = getattr(self.args, key, None)
        if value is None and key in self.config:
            value = self.config[key]
            if path and value is not None:
                value = self._rel(value)
        if value is None:
            value = default
        if path:
            self.path_keys.add(key)
        self.resolved[key] = [str(v) for v in value] if path and isinstance(value, list) \
            else (str(value) if path and value is not None else value)
        return value

    def require(self, key: str, path: bool = False) -> Any:
        value = self.get(key, path=path)
        if value is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
        return value

    def _rel(self, value: Any) -> Any:
        if isinstance(value, list):
            return [self._rel(v) for v in value]
        p = Path(value)
        return str(p if p.is_absolute() else self.config_dir / p)


class Manifest:
    def __init__(self, command: str):
        self.command = command
        self.inputs: dict[str, str] = {}
        self.artifacts: list[Path] = []

    def read(self, path: str | Path) -> Path:
        p = Path(path)
        if p.is_file():
            self.inputs[str(path)] = sha256_file(p)
        return p

    def wrote(self, *paths: str | Path) -> None:
        self.artifacts.extend(Path(p) for p in paths)

    def write(self, path: Path, settings: Settings, seed: int | None) -> Path:
        root = path.parent
        artifacts = {}
        for p in sorted(set(self.artifacts)):
            try:
                name = str(p.resolve().relative_to(root.resolve()))
            except ValueError:
                name = str(p)
            artifacts[name] = sha256_file(p)
        config = dict(settings.resolved)
        write_json({
            "command": self.command,
            "version": __version__,
            "config": config,
            "config_hash": config_hash(config, settings.path_keys, self.inputs),
            "seed": seed,
            "inputs": self.inputs,
            "artifacts": artifacts,
        }, path)
        return path


def _manifest_for(out: str | Path) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".run.json")


def _parse_seeds(spec: Any) -> list[int]:
    """``"1..5"``, ``"1,3,7"`` or a JSON list."""
    if isinstance(spec, list):
        return [int(s) for s in spec]
    text = str(spec).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {spec!r}") from None
    if not seeds:
        raise UsageError(f"empty seed list {spec!r}")
    return seeds


def _int_list(text: Any) -> list[int]:
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad integer list {text!r}") from None


def _load_annotations(path: str | Path) -> list[Annotation]:
    """Annotation list file (``{"annotations": [...]}``) or a full dataset file."""
    raw = read_json(path)
    recs = raw.get("annotations") if isinstance(raw, dict) else raw
    if not isinstance(recs, list):
        raise ValidationError(f"{path}: expected an annotation list")
    return [annotation_from_record(r) for r in recs]


def _save_annotation_list(anns: Sequence[Annotation], path: str | Path) -> None:
    write_json({"annotations": [annotation_to_record(a) for a in anns]}, path)


def _load_pseudo(path: str | Path) -> list[Annotation]:
    """Pseudo-labels given as detections (results format) or as annotations."""
    raw = read_json(path)
    if isinstance(raw, list):
        return pseudo_annotations(load_detections(path))
    return _load_annotations(path)


def _knn_extra(outcome) -> dict[int, dict[str, int]]:
    return {det_id: {"knn_label": label} for det_id, label in outcome.knn_label.items()}


# --- stage commands ---------------------------------------------------------


def cmd_source(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    dets = load_detections(m.read(s.require("detections", path=True)))
    split = load_split(m.read(s.require("split", path=True)))
    out = Path(s.require("out", path=True))
    cands = source_candidates(dets, split, float(s.get("q", 0.8)), s.get("cap"))
    save_detections(cands.candidates, out)
    m.wrote(out)
    log.info("sourced %d of %d detections", len(cands), len(dets))
    return _manifest_for(out), None


def _resolve_k(s: Settings, shots: int) -> int:
    k = s.get("k")
    if s.get("k_auto", False) or k is None:
        k = k_for_shots(shots)
        s.resolved["k"] = k
    return int(k)


def cmd_verify(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    cands = load_detections(m.read(s.require("candidates", path=True)))
    split = load_split(m.read(s.require("split", path=True)))
    train_emb = _read_embeddings(s.require("train_emb", path=True), m)
    cand_emb = _read_embeddings(s.require("cand_emb", path=True), m)
    out_v = Path(s.require("out_verified", path=True))
    out_r = Path(s.require("out_rejected", path=True))
    clf = build_knn(split, train_emb, _resolve_k(s, split.shots))
    outcome = verify(cands, clf, cand_emb)
    extra = _knn_extra(outcome)
    save_detections(outcome.verified, out_v, extra)
    save_detections(outcome.rejected, out_r, extra)
    m.wrote(out_v, out_r)
    log.info("verified %d, rejected %d", len(outcome.verified), len(outcome.rejected))
    return _manifest_for(out_v), None


def _read_embeddings(stem: str, m: Manifest):
    data, manifest = embedding_paths(stem)
    m.read(data)
    m.read(manifest)
    return load_embeddings(data, manifest)


def _hyper_params(s: Settings, m: Manifest) -> HyperParams:
    hp_path = s.get("hp", path=True)
    raw = dict(read_json(m.read(hp_path))) if hp_path else {}
    if isinstance(s.config.get("corrector"), dict):
        raw = {**s.config["corrector"], **raw}
    for key in ("learning_rate", "epochs", "batch_size", "seed"):
        value = getattr(s.args, key, None)
        if value is not None:
            raw[key] = value
    hp = HyperParams.from_dict(raw)
    s.resolved["hyperparams"] = {"learning_rate": hp.learning_rate, "epochs": hp.epochs,
                                 "batch_size": hp.batch_size, "beta": hp.beta, "seed": hp.seed}
    return hp


def _train_model(pair_files: Sequence[str], hp: HyperParams, m: Manifest):
    pairs = []
    for f in pair_files:
        pairs.extend(load_pairs(m.read(f)))
    report = TrainingReport()
    model = train_cascade(stage_sets(pairs), hp, report)
    log.info("trained cascade on %s pairs; final losses %s", report.pair_counts,
             [round(v, 6) for v in report.final_loss])
    return model


def cmd_train_corrector(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    files = s.require("pairs", path=True)
    files = [files] if isinstance(files, str) else files
    out = Path(s.require("out", path=True))
    hp = _hyper_params(s, m)
    save_model(_train_model(files, hp, m), out)
    m.wrote(out)
    return _manifest_for(out), hp.seed


def _feature_provider(s: Settings, m: Manifest) -> FeatureProvider:
    features, oracle = s.get("features", path=True), s.get("oracle", path=True)
    if (features is None) == (oracle is None):
        raise UsageError("give exactly one of --features or --oracle")
    if features is not None:
        return FeatureProvider.static(_read_embeddings(features, m))
    from .synthworld.export import TRUTH_LOG, WORLD_FILE, oracle_from_dir

    m.read(Path(oracle) / WORLD_FILE)
    m.read(Path(oracle) / TRUTH_LOG)
    return oracle_from_dir(oracle)


def _correct(model_path: str, cands: list[Detection], s: Settings, m: Manifest,
             images: dict | None) -> list[Detection]:
    model = load_model(m.read(model_path))
    fp = _feature_provider(s, m)
    if images is None:
        extent_src = s.get("dataset", path=True)
        if extent_src is None and s.get("oracle") is not None:
            from .synthworld.export import load_world

            images = load_world(s.get("oracle", path=True))[0].dataset.images
        elif extent_src is not None:
            images = load_dataset(m.read(extent_src)).images
        else:
            raise UsageError("image sizes needed for clipping: give --dataset")
    corrected, kept = correct_all(model, cands, fp, images)
    if kept:
        log.warning("%d candidates kept their box (no feature or collapsed cascade)", len(kept))
    return corrected


def cmd_correct(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    cands = load_detections(m.read(s.require("candidates", path=True)))
    out = Path(s.require("out", path=True))
    save_detections(_correct(s.require("model", path=True), cands, s, m, None), out)
    m.wrote(out)
    return _manifest_for(out), None


def cmd_emit(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    dets = load_detections(m.read(s.require("detections", path=True)))
    verified = load_detections(m.read(s.require("verified", path=True)))
    split_path = s.get("split", path=True)
    novel = load_split(m.read(split_path)).novel_categories if split_path else None
    out = Path(s.require("out_ignore", path=True))
    _save_annotation_list(emit_ignore_regions(dets, verified, novel), out)
    m.wrote(out)
    return _manifest_for(out), None


def cmd_assemble(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    base = load_dataset(m.read(s.require("base", path=True)))
    split = load_split(m.read(s.require("split", path=True)))
    pseudo = _load_pseudo(m.read(s.require("pseudo", path=True)))
    ignore_path = s.get("ignore", path=True)
    ignores = _load_annotations(m.read(ignore_path)) if ignore_path else []
    out = Path(s.require("out", path=True))
    save_annotations(assemble_retrain_set(base, split, pseudo, ignores), out)
    m.wrote(out)
    return _manifest_for(out), None


def _write_pr_dir(dets, dataset: Dataset, pr_dir: Path, max_dets: int, m: Manifest) -> None:
    pr_dir.mkdir(parents=True, exist_ok=True)
    present = {a.category for a in dataset.annotations if not a.is_ignore}
    for c in sorted(present):
        for t in IOU_THRESHOLDS:
            path = pr_dir / f"pr_cat{c}_iou{t:.2f}.csv"
            write_pr_csv(pr_curve(dets, dataset.annotations, t, c, max_dets), path)
            m.wrote(path)


def cmd_eval(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    dataset = load_dataset(m.read(s.require("dataset", path=True)))
    dets = load_detections(m.read(s.require("detections", path=True)))
    split = load_split(m.read(s.require("split", path=True)))
    report_path = Path(s.require("report", path=True))
    max_dets = int(s.get("max_dets", 100))
    report = coco_map(dets, dataset, split, max_dets)
    proposals_path = s.get("proposals", path=True)
    if proposals_path:
        proposals = load_detections(m.read(proposals_path))
        report = add_proposal_recall(report, proposals, dataset, split,
                                     _int_list(s.get("top_n", "100,1000")))
    write_json(report.to_flat(), report_path)
    m.wrote(report_path)
    pr_dir = s.get("pr_dir", path=True)
    if pr_dir:
        _write_pr_dir(dets, dataset, Path(pr_dir), max_dets, m)
    return _manifest_for(report_path), None


# --- synthetic world commands -----------------------------------------------


def _synth_config(s: Settings, m: Manifest, world_key: str = "config"):
    from .synthworld.defaults import SECTIONS, SynthConfig

    raw: dict[str, Any] = {}
    if s.config:
        raw = {k: v for k, v in s.config.items() if k in SECTIONS}
        if not raw:  # a bare world config
            raw = {"world": {k: v for k, v in s.config.items() if k not in ("seed", "seeds")}}
        m.read(s.args.config)
    inline_noise = isinstance(s.config.get("noise"), dict) and s.args.noise is None
    noise_path = None if inline_noise else s.get("noise", path=True)
    if noise_path:
        raw["noise"] = read_json(m.read(noise_path))
    cfg = SynthConfig.from_dict(raw)
    s.resolved.update({k: cfg.raw[k] for k in SECTIONS})
    return cfg


def _seed(s: Settings) -> int:
    seed = s.get("seed")
    if seed is None:
        raise UsageError("a seed is required for this stochastic stage (--seed)")
    return int(seed)


def cmd_simulate(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    from .synthworld.export import export_simulation

    cfg = _synth_config(s, m)
    seed = _seed(s)
    out_dir = Path(s.require("out_dir", path=True))
    m.wrote(*export_simulation(out_dir, cfg.world, cfg.noise, cfg.pipeline, seed))
    pipeline_cfg = out_dir / "pipeline.json"
    write_json({
        "dataset": "dataset.json", "split": "split.json", "detections": "detections.json",
        "train_emb": "shot_embeddings", "det_emb": "det_embeddings",
        "pairs": ["corrector_pairs.json"], "oracle": ".", "world": ".",
        "eval_dataset": "groundtruth.json", "seed": seed,
        "q": cfg.pipeline.q, "cap": cfg.pipeline.cap, "k": cfg.pipeline.k,
        "corrector": cfg.raw["pipeline"]["corrector"],
    }, pipeline_cfg)
    m.wrote(pipeline_cfg)
    return out_dir / "manifest.json", seed


def cmd_ablate(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    from .synthworld.ablation import ablation_table, run_ablation

    cfg = _synth_config(s, m)
    seeds = _parse_seeds(s.get("seeds", "1..5"))
    out = Path(s.require("out", path=True))
    results = []
    for seed in seeds:
        r = run_ablation(cfg.world, cfg.noise, cfg.pipeline, seed,
                         with_ignore_ablation=not s.get("skip_ignore_ablation", False))
        log.info("seed %d: %s", seed, " ".join(f"{row}={r.nap(row):.4f}" for row in ROWS))
        results.append(r)
    write_json(ablation_table(results), out)
    m.wrote(out)
    return _manifest_for(out), seeds[0] if len(seeds) == 1 else None


def cmd_pipeline(s: Settings, m: Manifest) -> tuple[Path, int | None]:
    """source -> verify -> correct -> emit -> assemble -> eval, keeping every artifact."""
    out_dir = Path(s.require("out_dir", path=True))
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _seed(s)
    dataset = load_dataset(m.read(s.require("dataset", path=True)))
    split = load_split(m.read(s.require("split", path=True)))
    dets = load_detections(m.read(s.require("detections", path=True)))
    train_emb = _read_embeddings(s.require("train_emb", path=True), m)
    det_emb = _read_embeddings(s.require("det_emb", path=True), m)

    def put(name: str) -> Path:
        m.wrote(out_dir / name)
        return out_dir / name

    cands = source_candidates(dets, split, float(s.get("q", 0.8)), s.get("cap"))
    save_detections(cands.candidates, put("candidates.json"))

    outcome = verify(cands, build_knn(split, train_emb, _resolve_k(s, split.shots)), det_emb)
    extra = _knn_extra(outcome)
    save_detections(outcome.verified, put("verified.json"), extra)
    save_detections(outcome.rejected, put("rejected.json"), extra)

    model_path = s.get("model", path=True)
    if model_path is None:
        pairs = s.require("pairs", path=True)
        hp = _hyper_params(s, m)
        model_path = str(out_dir / "corrector_model.json")
        save_model(_train_model([pairs] if isinstance(pairs, str) else pairs, hp, m), model_path)
        m.wrote(model_path)
    corrected = _correct(model_path, list(outcome.verified), s, m, dataset.images)
    save_detections(corrected, put("corrected.json"))

    novel = [d for d in dets if d.category in split.novel_categories]
    use_ignores = bool(s.get("use_ignores", True))
    ignores = emit_ignore_regions(novel, outcome) if use_ignores else []
    _save_annotation_list(ignores, put("ignore.json"))
    pseudo = pseudo_annotations(corrected)
    _save_annotation_list(pseudo, put("pseudo.json"))
    save_annotations(assemble_retrain_set(dataset, split, pseudo, ignores), put("retrain_set.json"))

    accepted = {"sourcing": cands.candidates, "verification": list(outcome.verified),
                "correction": corrected}
    report: dict[str, Any] = {"counts": {"detections": len(dets), "novel_detections": len(novel),
                                         "candidates": len(cands),
                                         "verified": len(outcome.verified),
                                         "rejected": len(outcome.rejected),
                                         "ignore_regions": len(ignores)}}
    world_dir = s.get("world", path=True)
    max_dets = int(s.get("max_dets", 100))
    if world_dir is not None:
        from .synthworld.ablation import PipelineParams, baseline_report, retrained_report
        from .synthworld.export import load_world

        world, raw = load_world(world_dir)
        params = PipelineParams.from_dict({**raw.get("pipeline", {}), "max_dets": max_dets})
        report["mode"] = "retrained"
        blocks = {"baseline": baseline_report(world, params, seed)}
        for row, acc in accepted.items():
            blocks[row] = retrained_report(world, novel, acc, params, seed, use_ignores)
    else:
        eval_path = s.require("eval_dataset", path=True)
        truth = load_dataset(m.read(eval_path))
        report["mode"] = "pseudo_label_quality"
        blocks = {"baseline": coco_map(dets, truth, split, max_dets)}
        for row, acc in accepted.items():
            blocks[row] = coco_map(acc, truth, split, max_dets)
    report["blocks"] = {row: blocks[row].to_flat() for row in ROWS}
    write_json(report, put("report.json"))
    return out_dir / "manifest.json", seed


# --- argument parsing -------------------------------------------------------


def _add(p: argparse.ArgumentParser, *flags: str, **kw) -> None:
    kw.setdefault("default", None)
    p.add_argument(*flags, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudolabel", description="Few-shot pseudo-labelling pipeline stages.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    parser.commands = sub.choices

    def command(name: str, fn: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help)
        p.set_defaults(handler=fn)
        _add(p, "--config", help="JSON config; flags override its fields")
        return p

    p = command("source", cmd_source, "Keep novel-class detections with score > q.")
    _add(p, "--detections")
    _add(p, "--split")
    _add(p, "--q", type=float, help="score threshold (strict), default 0.8")
    _add(p, "--cap", type=int, help="optional per-class candidate cap")
    _add(p, "--out")

    p = command("verify", cmd_verify, "Accept candidates whose kNN label agrees with the detector.")
    _add(p, "--candidates")
    _add(p, "--split")
    _add(p, "--train-emb", dest="train_emb", help="shot embedding container (stem or .f32)")
    _add(p, "--cand-emb", dest="cand_emb", help="candidate embedding container")
    g = p.add_mutually_exclusive_group()
    _add(g, "--k", type=int)
    g.add_argument("--k-auto", dest="k_auto", action="store_true", default=None,
                   help="k from the shot count (default)")
    _add(p, "--out-verified", dest="out_verified")
    _add(p, "--out-rejected", dest="out_rejected")

    p = command("train-corrector", cmd_train_corrector, "Fit the three-stage box regressor.")
    _add(p, "--pairs", nargs="+", help="training pair files")
    _add(p, "--hp", help="hyperparameter JSON")
    _add(p, "--seed", type=int)
    _add(p, "--epochs", type=int)
    _add(p, "--learning-rate", dest="learning_rate", type=float)
    _add(p, "--batch-size", dest="batch_size", type=int)
    _add(p, "--out")

    p = command("correct", cmd_correct, "Refine candidate boxes with a trained cascade.")
    _add(p, "--model")
    _add(p, "--candidates")
    _add(p, "--features", help="per-candidate feature container")
    _add(p, "--oracle", help="simulated world directory (oracle features)")
    _add(p, "--dataset", help="dataset giving image sizes for clipping")
    _add(p, "--out")

    p = command("emit", cmd_emit, "Turn unverified novel detections into ignore regions.")
    _add(p, "--detections")
    _add(p, "--verified")
    _add(p, "--split", help="restrict to novel categories of this split")
    _add(p, "--out-ignore", dest="out_ignore")

    p = command("assemble", cmd_assemble, "Build the retraining annotation set.")
    _add(p, "--base")
    _add(p, "--split")
    _add(p, "--pseudo")
    _add(p, "--ignore")
    _add(p, "--out")

    p = command("eval", cmd_eval, "COCO-style AP/AR report and PR curves.")
    _add(p, "--dataset")
    _add(p, "--detections")
    _add(p, "--split")
    _add(p, "--proposals")
    _add(p, "--top-n", dest="top_n", help="comma-separated proposal budgets, e.g. 100,1000")
    _add(p, "--max-dets", dest="max_dets", type=int)
    _add(p, "--report")
    _add(p, "--pr-dir", dest="pr_dir")

    p = command("simulate", cmd_simulate, "Generate a seeded synthetic world and noisy detections.")
    _add(p, "--noise", help="detector noise JSON")
    _add(p, "--seed", type=int)
    _add(p, "--out-dir", dest="out_dir")

    p = command("ablate", cmd_ablate, "Cumulative pseudo-labelling ablation over seeds.")
    _add(p, "--noise")
    _add(p, "--seeds", help="e.g. 1..5 or 1,2,3")
    p.add_argument("--skip-ignore-ablation", dest="skip_ignore_ablation", action="store_true",
                   default=None)
    _add(p, "--out")

    p = command("pipeline", cmd_pipeline, "Run every stage in order and write all artifacts.")
    _add(p, "--out-dir", dest="out_dir")
    _add(p, "--seed", type=int)
    _add(p, "--q", type=float)
    _add(p, "--k", type=int)
    _add(p, "--cap", type=int)
    _add(p, "--max-dets", dest="max_dets", type=int)
    p.add_argument("--no-ignore", dest="use_ignores", action="store_false", default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = Settings(args)
        manifest = Manifest(args.command)
        manifest_path, seed = args.handler(settings, manifest)
        manifest.write(manifest_path, settings, seed)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.commands[args.command].print_help(sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, PseudoLabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
