"""Box correction with a cascade of three IoU-gated, class-agnostic regressors.

Each stage is a linear map from a feature vector to a box delta. Stages are
trained independently on proposals whose IoU with their matched ground truth
exceeds the stage gate, and applied in succession at correction time.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .datamodel import Annotation, Detection, EmbeddingMatrix, read_json, write_json
from .errors import (
    CollapsedBoxWarning,
    DimensionMismatch,
    DivergedLoss,
    EmptyStage,
    MissingFeature,
    ParseError,
    ValidationError,
    ZeroSizeAnchor,
)
from .geometry import Box, BoxDelta, ImageExtent, clip, decode_deltas, encode_deltas, iou

GATES = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class StageRegressor:
    weights: np.ndarray  # (4, feature_dim)
    bias: np.ndarray  # (4,)
    iou_gate: float

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or self.weights.shape[0] != 4 or self.weights.shape[1] < 1:
            raise ValidationError(f"stage weights must be 4 x d, got {self.weights.shape}")
        if self.bias.shape != (4,):
            raise ValidationError(f"stage bias must have 4 entries, got {self.bias.shape}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValidationError("non-finite stage parameters")

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights.T + self.bias


@dataclass(frozen=True)
class CascadeRegressor:
    stages: tuple[StageRegressor, StageRegressor, StageRegressor]
    feature_dim: int

    def __post_init__(self) -> None:
        if len(self.stages) != 3:
            raise ValidationError("cascade needs exactly three stages")
        gates = tuple(s.iou_gate for s in self.stages)
        if gates != GATES:
            raise ValidationError(f"stage gates must be {GATES}, got {gates}")
        for s in self.stages:
            if s.weights.shape[1] != self.feature_dim:
                raise ValidationError("stage weights disagree with feature_dim")

    @classmethod
    def zeros(cls, feature_dim: int) -> "CascadeRegressor":
        return cls(tuple(StageRegressor(np.zeros((4, feature_dim)), np.zeros(4), g)
                         for g in GATES), feature_dim)

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "gates": list(GATES),
            "stages": [
                {"iou_gate": s.iou_gate,
                 "weights": s.weights.ravel().tolist(),
                 "bias": s.bias.tolist()}
                for s in self.stages
            ],
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "CascadeRegressor":
        try:
            dim = int(raw["feature_dim"])
            stages = tuple(
                StageRegressor(np.asarray(s["weights"], dtype=np.float64).reshape(4, dim),
                               np.asarray(s["bias"], dtype=np.float64),
                               float(s["iou_gate"]))
                for s in raw["stages"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad cascade model ({exc})") from exc
        return cls(stages, dim)


def save_model(model: CascadeRegressor, path) -> None:
    write_json(model.to_dict(), path)


def load_model(path) -> CascadeRegressor:
    return CascadeRegressor.from_dict(read_json(path))


@dataclass(frozen=True)
class TrainPair:
    feature: np.ndarray
    anchor: Box
    target: Box
    anchor_iou: float


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-2
    epochs: int = 200
    batch_size: int = 64
    beta: float = 1.0
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: Mapping) -> "HyperParams":
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


# --- training data ----------------------------------------------------------


def build_training_set(proposals: Mapping[int, Sequence[tuple[Box, np.ndarray]]],
                       gts: Sequence[Annotation]) -> tuple[list[TrainPair], ...]:
    """Split proposals into the three gated stage training sets.

    ``proposals`` maps image id to ``(box, feature)`` pairs. Each proposal is
    matched to its highest-IoU ground truth in the same image (earliest
    annotation on ties) and joins every stage whose gate its IoU exceeds.
    Images without ground truth contribute nothing.
    """
    by_image: dict[int, list[Annotation]] = {}
    for g in gts:
        if not g.is_ignore and g.box.w > 0 and g.box.h > 0:
            by_image.setdefault(g.image_id, []).append(g)
    stages: tuple[list[TrainPair], ...] = ([], [], [])
    dim = None
    for image_id, props in proposals.items():
        image_gts = by_image.get(image_id)
        if not image_gts:
            continue
        for box, feat in props:
            feat = np.asarray(feat, dtype=np.float64).ravel()
            if dim is None:
                dim = feat.shape[0]
            elif feat.shape[0] != dim:
                raise DimensionMismatch(f"feature dim {feat.shape[0]} != {dim}")
            if box.w <= 0 or box.h <= 0:
                continue
            ious = [iou(box, g.box) for g in image_gts]
            best = max(range(len(ious)), key=lambda i: (ious[i], -i))
            pair = TrainPair(feat, box, image_gts[best].box, ious[best])
            for s, gate in enumerate(GATES):
                if pair.anchor_iou > gate:
                    stages[s].append(pair)
    return stages


def stage_sets(pairs: Sequence[TrainPair]) -> tuple[list[TrainPair], ...]:
    """Distribute pairs over the stages whose gate their anchor IoU exceeds."""
    return tuple([p for p in pairs if p.anchor_iou > gate] for gate in GATES)


def save_pairs(pairs: Sequence[TrainPair], path) -> None:
    """Pairs file: ``{"feature_dim": d, "pairs": [{anchor, target, feature}, ...]}``."""
    dims = {np.asarray(p.feature).size for p in pairs}
    write_json({
        "feature_dim": dims.pop() if len(dims) == 1 else None,
        "pairs": [{"anchor": p.anchor.to_list(), "target": p.target.to_list(),
                   "feature": np.asarray(p.feature, dtype=np.float64).tolist()} for p in pairs],
    }, path)


def load_pairs(path) -> list[TrainPair]:
    raw = read_json(path)
    try:
        out = []
        for rec in raw["pairs"]:
            anchor, target = Box.from_list(rec["anchor"]), Box.from_list(rec["target"])
            feat = np.asarray(rec["feature"], dtype=np.float64)
            out.append(TrainPair(feat, anchor, target, iou(anchor, target)))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: bad pairs file ({exc})") from exc
    return out


# --- loss and training ------------------------------------------------------


def smooth_l1(residual: float, beta: float = 1.0) -> tuple[float, float]:
    """Smooth-L1 loss and its derivative with respect to the residual."""
    if beta <= 0:
        raise ValidationError("beta must be positive")
    r = float(residual)
    if abs(r) < beta:
        return r * r / (2.0 * beta), r / beta
    return abs(r) - 0.5 * beta, math.copysign(1.0, r) if r != 0 else 0.0


def _smooth_l1_array(r: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    a = np.abs(r)
    small = a < beta
    loss = np.where(small, r * r / (2.0 * beta), a - 0.5 * beta)
    grad = np.where(small, r / beta, np.sign(r))
    return loss, grad


def _pair_arrays(pairs: Sequence[TrainPair]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([np.asarray(p.feature, dtype=np.float64) for p in pairs])
    Y = np.stack([encode_deltas(p.anchor, p.target).as_array() for p in pairs])
    return X, Y


def _train_stage(X: np.ndarray, Y: np.ndarray, gate: float, hp: HyperParams,
                 stage_index: int) -> tuple[StageRegressor, float]:
    # Features are standardized for conditioning; the affine map is folded
    # back into raw-feature weights afterwards.
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Z = (X - mean) / scale
    n, d = Z.shape
    W = np.zeros((4, d))
    b = np.zeros(4)
    rng = np.random.default_rng([hp.seed, stage_index])
    bs = max(1, min(hp.batch_size, n))
    for _ in range(hp.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            zb = Z[idx]
            r = zb @ W.T + b - Y[idx]
            loss, g = _smooth_l1_array(r, hp.beta)
            if not np.all(np.isfinite(loss)):
                raise DivergedLoss(f"non-finite loss in stage {stage_index + 1}")
            g = g / g.size
            W -= hp.learning_rate * (g.T @ zb)
            b -= hp.learning_rate * g.sum(axis=0)
    W_raw = W / scale
    b_raw = b - W_raw @ mean
    final_loss = float(_smooth_l1_array(X @ W_raw.T + b_raw - Y, hp.beta)[0].mean())
    if not math.isfinite(final_loss) or not np.all(np.isfinite(W_raw)):
        raise DivergedLoss(f"non-finite parameters in stage {stage_index + 1}")
    return StageRegressor(W_raw, b_raw, gate), final_loss


@dataclass
class TrainingReport:
    final_loss: list[float] = field(default_factory=list)
    pair_counts: list[int] = field(default_factory=list)


def train_cascade(pairs: Sequence[Sequence[TrainPair]], hp: HyperParams = HyperParams(),
                  report: TrainingReport | None = None) -> CascadeRegressor:
    """Fit each stage by seeded mini-batch gradient descent on mean smooth-L1."""
    if len(pairs) != 3:
        raise ValidationError("need training pairs for exactly three stages")
    dims = set()
    for s, stage_pairs in enumerate(pairs):
        if not stage_pairs:
            raise EmptyStage(f"stage {s + 1} (IoU > {GATES[s]}) has no training pairs")
        dims.update(np.asarray(p.feature).size for p in stage_pairs)
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent feature dims {sorted(dims)}")
    stages = []
    for s, stage_pairs in enumerate(pairs):
        X, Y = _pair_arrays(stage_pairs)
        stage, loss = _train_stage(X, Y, GATES[s], hp, s)
        stages.append(stage)
        if report is not None:
            report.final_loss.append(loss)
            report.pair_counts.append(len(stage_pairs))
    return CascadeRegressor(tuple(stages), dims.pop())


# --- correction -------------------------------------------------------------


class FeatureProvider:
    """Supplies the feature a stage sees for a candidate's current box.

    ``static`` returns one stored vector per candidate whatever the box;
    ``oracle`` recomputes it from the current box with a registered function.
    """

    def __init__(self, mode: str, table: EmbeddingMatrix | None = None,
                 fn: Callable[[Box, Detection], np.ndarray] | None = None):
        if mode not in ("static", "oracle"):
            raise ValidationError(f"unknown feature mode {mode!r}")
        if mode == "static" and table is None:
            raise ValidationError("static mode needs a feature table")
        if mode == "oracle" and fn is None:
            raise ValidationError("oracle mode needs a box -> feature function")
        self.mode = mode
        self.table = table
        self.fn = fn

    @classmethod
    def static(cls, table: EmbeddingMatrix) -> "FeatureProvider":
        return cls("static", table=table)

    @classmethod
    def oracle(cls, fn: Callable[[Box, Detection], np.ndarray]) -> "FeatureProvider":
        return cls("oracle", fn=fn)

    def has(self, candidate: Detection) -> bool:
        if self.mode == "static":
            return str(candidate.id) in self.table
        return True

    def feature(self, box: Box, candidate: Detection) -> np.ndarray:
        if self.mode == "static":
            key = str(candidate.id)
            if key not in self.table:
                raise MissingFeature(f"no feature for candidate {candidate.id}")
            return np.asarray(self.table.row(key), dtype=np.float64)
        return np.asarray(self.fn(box, candidate), dtype=np.float64)


def correct(model: CascadeRegressor, candidate: Detection, fp: FeatureProvider,
            extent: ImageExtent) -> Box:
    box = clip(candidate.box, extent)
    for stage in model.stages:
        try:
            feat = fp.feature(box, candidate)
        except ZeroSizeAnchor:
            warnings.warn(f"candidate {candidate.id}: feature undefined for collapsed box",
                          CollapsedBoxWarning, stacklevel=2)
            return box
        if feat.shape[0] != model.feature_dim:
            raise DimensionMismatch(f"feature dim {feat.shape[0]} != model {model.feature_dim}")
        delta = BoxDelta(*stage.predict(feat))
        try:
            nxt = clip(decode_deltas(box, delta), extent)
        except (ZeroSizeAnchor, ValidationError):
            warnings.warn(f"candidate {candidate.id}: cascade box collapsed; keeping last valid box",
                          CollapsedBoxWarning, stacklevel=2)
            return box
        if nxt.w <= 0 or nxt.h <= 0:
            warnings.warn(f"candidate {candidate.id}: cascade box collapsed; keeping last valid box",
                          CollapsedBoxWarning, stacklevel=2)
            return box
        box = nxt
    return box
