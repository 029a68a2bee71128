"""Run configuration: profiles, JSON loading, and cross-checks between the
model and scene configs.

Config files are JSON with up to four sections; every field is optional and
falls back to the chosen profile ("tiny" by default, or "paper" / "micro"):

    {
      "profile": "tiny",
      "model":  { ...ModelConfig fields, incl. ablation flags... },
      "scene":  { ...SceneConfig fields (geometry: "tetrahedron" | "pair")... },
      "train":  { "lr": 4e-4, "batch_size": 2, "epochs": 10, "steps": null,
                  "lr_patience": 5, "grad_clip": 5.0, "seed": 0,
                  "n_scenes": 16, "val_mod": 5, "workers": 1 }
    }

val_mod K puts every scene whose seed is divisible by K into the validation
split (0 disables the split and the schedule then follows training loss).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .scenes import ANNOTATION_HOP_S, ArrayGeometry, SceneConfig

GEOMETRIES = {
    "tetrahedron": ArrayGeometry.tetrahedron,
    "pair": ArrayGeometry.pair,
}


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 4e-4
    batch_size: int = 2
    epochs: int = 10
    steps: int | None = None        # optional hard cap across epochs
    lr_patience: int = 5
    grad_clip: float = 5.0
    seed: int = 0
    n_scenes: int = 16
    val_mod: int = 5
    workers: int = 1
    blas_threads: int = 1   # small per-op arrays: BLAS threading only hurts

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size and epochs must be positive")
        if self.workers < 1 or self.blas_threads < 1:
            raise ConfigError("workers and blas_threads must be >= 1")
        if self.val_mod < 0:
            raise ConfigError("val_mod must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    scene: SceneConfig
    train: TrainSettings

    def __post_init__(self):
        m, s = self.model, self.scene
        if s.sample_rate != m.sample_rate:
            raise ConfigError(f"scene sample rate {s.sample_rate} != model {m.sample_rate}")
        if abs(s.duration_s - m.duration_s) > 1e-9:
            raise ConfigError(f"scene duration {s.duration_s} != model {m.duration_s}")
        if s.geometry.n_mics != m.n_mics:
            raise ConfigError(f"geometry has {s.geometry.n_mics} mics, model expects {m.n_mics}")
        if s.max_objects > m.n_slots:
            raise ConfigError(f"scene max_objects {s.max_objects} exceeds model slots {m.n_slots}")
        if s.n_classes != m.n_classes:
            raise ConfigError(f"scene classes {s.n_classes} != model classes {m.n_classes}")
        if s.n_annotation_frames != m.t_out:
            raise ConfigError(
                f"annotation frames {s.n_annotation_frames} != model t_out {m.t_out}")

    @property
    def frames_per_segment(self) -> int:
        return int(round(1.0 / ANNOTATION_HOP_S))


def _scene_profile(name: str) -> SceneConfig:
    if name == "paper":
        return SceneConfig()
    if name == "tiny":
        return SceneConfig.tiny()
    if name == "micro":
        return SceneConfig(duration_s=0.5, sample_rate=4000, max_objects=2,
                           n_classes=5, snr_range_db=(10.0, 20.0),
                           rt60_range_s=(0.15, 0.3), geometry=ArrayGeometry.pair())
    raise ConfigError(f"unknown profile {name!r}")


def _model_profile(name: str, overrides: dict) -> ModelConfig:
    factory = {"paper": ModelConfig.paper, "tiny": ModelConfig.tiny,
               "micro": ModelConfig.micro}.get(name)
    if factory is None:
        raise ConfigError(f"unknown profile {name!r}")
    try:
        return factory(**overrides)
    except TypeError as exc:
        raise ConfigError(f"bad model config field: {exc}")


def build_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - {"profile", "model", "scene", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    profile = raw.get("profile", "tiny")
    model = _model_profile(profile, dict(raw.get("model", {})))

    scene_over = dict(raw.get("scene", {}))
    geom_name = scene_over.pop("geometry", None)
    base_scene = _scene_profile(profile)
    scene_fields = dataclasses.asdict(base_scene)
    scene_fields.pop("geometry")
    for key, val in scene_over.items():
        if key not in scene_fields:
            raise ConfigError(f"unknown scene config field {key!r}")
        scene_fields[key] = tuple(val) if isinstance(val, list) else val
    if geom_name is not None:
        if geom_name not in GEOMETRIES:
            raise ConfigError(f"unknown geometry {geom_name!r}; pick from {sorted(GEOMETRIES)}")
        geometry = GEOMETRIES[geom_name]()
    else:
        geometry = base_scene.geometry
    scene = SceneConfig(geometry=geometry, **scene_fields)

    try:
        train = TrainSettings(**dict(raw.get("train", {})))
    except TypeError as exc:
        raise ConfigError(f"bad train config field: {exc}")
    return RunConfig(model=model, scene=scene, train=train)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    for key, val in (overrides or {}).items():
        section, _, name = key.partition(".")
        if name:
            raw.setdefault(section, {})[name] = val
        else:
            raw[key] = val
    return build_config(raw)


def config_echo(run: RunConfig) -> dict:
    """JSON-able snapshot sufficient to rebuild the run."""
    return {
        "model": dataclasses.asdict(run.model),
        "scene": {**{k: v for k, v in dataclasses.asdict(run.scene).items()
                     if k != "geometry"},
                  "geometry_positions": [list(p) for p in run.scene.geometry.positions]},
        "train": dataclasses.asdict(run.train),
    }


def model_from_echo(echo: dict) -> ModelConfig:
    try:
        return ModelConfig(**echo["model"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint config echo is unusable: {exc}")
