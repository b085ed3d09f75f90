"""Pipeline configuration: one flat key-value file, CLI flags override.

The file format is `key = value` lines with `#` comments.  Keys are
namespaced (`ransac.inlier_threshold`, `objective.lambda_match`, ...).
Defaults follow the published hyper-parameters where they exist; stopping
constants and thresholds the method leaves open are explicit here so every
run records them in its manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .features import DEFAULT_SCALES, MatchConfig
from .fineflow import ObjectiveConfig, OptimizeSchedule
from .robust import RansacConfig


@dataclass(frozen=True)
class PipelineConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    schedule: OptimizeSchedule = field(default_factory=OptimizeSchedule)
    min_side: int = 480
    max_homographies: int = 8
    smoothness_weight: float = 0.05
    aggregate_rule: str = "first"      # first | best
    aggregate_threshold: float = 0.5
    seed: int = 0


_BOOL = {"true": True, "yes": True, "false": False, "no": False}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("match.scales", "schedule.stage_lengths"):
        parts = [p for p in raw.replace(",", " ").split() if p]
        vals = tuple(float(p) for p in parts)
        if key == "schedule.stage_lengths":
            return tuple(int(v) for v in vals)
        return vals
    if raw.lower() in _BOOL:
        return _BOOL[raw.lower()]
    try:
        if "." in raw or "e" in raw.lower():
            return float(raw)
        return int(raw)
    except ValueError:
        return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected `key = value`")
        key, raw = line.split("=", 1)
        key = key.strip()
        out[key] = _parse_value(key, raw)
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Build a PipelineConfig from an optional file plus override entries."""
    kv: dict = {}
    if path is not None:
        kv.update(parse_config_text(Path(path).read_text()))
    if overrides:
        kv.update({k: v for k, v in overrides.items() if v is not None})
    cfg = PipelineConfig()

    def scoped(prefix, cls, current):
        changes = {}
        for key, val in kv.items():
            if key.startswith(prefix + "."):
                name = key.split(".", 1)[1]
                if name not in cls.__dataclass_fields__:
                    raise ValueError(f"unknown config key: {key}")
                fval = val
                ftype = cls.__dataclass_fields__[name].type
                if ftype == "float" and isinstance(val, int):
                    fval = float(val)
                elif ftype == "bool" and isinstance(val, int):
                    fval = bool(val)
                changes[name] = fval
        return replace(current, **changes) if changes else current

    match = scoped("match", MatchConfig, cfg.match)
    if isinstance(match.scales, tuple) and match.scales != tuple(DEFAULT_SCALES):
        match = replace(match, scales=tuple(float(s) for s in match.scales))
    ransac = scoped("ransac", RansacConfig, cfg.ransac)
    objective = scoped("objective", ObjectiveConfig, cfg.objective)
    schedule = scoped("schedule", OptimizeSchedule, cfg.schedule)

    top = {}
    for key, val in kv.items():
        if "." not in key:
            if key not in PipelineConfig.__dataclass_fields__ or key in (
                    "match", "ransac", "objective", "schedule"):
                raise ValueError(f"unknown config key: {key}")
            if key in ("smoothness_weight", "aggregate_threshold") and isinstance(val, int):
                val = float(val)
            top[key] = val
    return replace(cfg, match=match, ransac=ransac, objective=objective,
                   schedule=schedule, **top)


def config_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    return d


def config_hash(cfg: PipelineConfig) -> str:
    payload = json.dumps(config_dict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def dump_config(cfg: PipelineConfig) -> str:
    """Render a config back to the flat key-value format."""
    lines = []
    groups = [("match", cfg.match), ("ransac", cfg.ransac),
              ("objective", cfg.objective), ("schedule", cfg.schedule)]
    for prefix, obj in groups:
        for name, val in asdict(obj).items():
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            lines.append(f"{prefix}.{name} = {val}")
    for name in ("min_side", "max_homographies", "smoothness_weight",
                 "aggregate_rule", "aggregate_threshold", "seed"):
        lines.append(f"{name} = {getattr(cfg, name)}")
    return "\n".join(lines) + "\n"
