"""The versioned default synthetic configuration shipped with the package."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from typing import Any, Mapping

from ..errors import ValidationError
from .ablation import PipelineParams
from .world import DetectorNoise, WorldConfig

SECTIONS = ("world", "noise", "pipeline")


def load_default_config() -> dict[str, Any]:
    text = resources.files("pseudolabel").joinpath("data", "default_config.json").read_text("utf-8")
    return json.loads(text)


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    """Recursive dict merge; ``override`` wins, nested objects merge key by key."""
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), Mapping):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class SynthConfig:
    world: WorldConfig
    noise: DetectorNoise
    pipeline: PipelineParams
    raw: dict[str, Any]

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any] | None = None) -> "SynthConfig":
        """Overlay ``raw`` (sections ``world``, ``noise``, ``pipeline``) on the defaults."""
        raw = dict(raw or {})
        unknown = set(raw) - set(SECTIONS) - {"version", "seed", "seeds"}
        if unknown:
            raise ValidationError(f"unknown config sections {sorted(unknown)}")
        merged = merge(load_default_config(), raw)
        noise_raw = merged["noise"]
        if "confusion" in raw.get("noise", {}):
            # an explicit matrix replaces the generated one entirely
            noise_raw = {k: v for k, v in noise_raw.items()
                         if k not in ("confusion_offdiag", "confusion_structure")}
        world = WorldConfig.from_dict(merged["world"])
        return cls(world, world.noise(noise_raw), PipelineParams.from_dict(merged["pipeline"]),
                   merged)
