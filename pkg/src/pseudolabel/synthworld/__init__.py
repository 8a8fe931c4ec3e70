"""Seeded synthetic world, detector simulator and retraining surrogate."""

from .ablation import ROWS, AblationResult, PipelineParams, ablation_table, run_ablation
from .defaults import SynthConfig, load_default_config
from .surrogate import SurrogateParams
from .world import (
    DetectorNoise,
    HiddenObject,
    ScoreModel,
    Simulation,
    WorldConfig,
    WorldTruth,
    generate_world,
    oracle_feature,
    simulate_detector,
)

__all__ = [
    "ROWS", "AblationResult", "PipelineParams", "ablation_table", "run_ablation",
    "SynthConfig", "load_default_config", "SurrogateParams", "DetectorNoise", "HiddenObject", "ScoreModel", "Simulation",
    "WorldConfig", "WorldTruth", "generate_world", "oracle_feature", "simulate_detector",
]
