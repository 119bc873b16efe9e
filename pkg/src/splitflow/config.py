"""Experiment configuration: one YAML file with nested sections.

Relative paths inside a config (``scene`` given as a file, ``output_dir``) are
resolved against the directory holding the config file.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .editing import AGGREGATIONS, EditConfig, EditSchedule
from .errors import ConfigError
from .fields import ACTIVATIONS
from .prompts import LlmEndpointConfig
from .scenes import Attribute, Scene
from .training import TrainConfig

METHODS = ("baseline", *AGGREGATIONS)
SECTIONS = ("scene", "model", "train", "schedule", "edit", "bench", "seeds", "llm", "output_dir")


@dataclass
class ModelSpec:
    hidden: tuple = (256, 256)
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("model.hidden needs at least one positive width")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"model.activation must be one of {ACTIVATIONS}")


@dataclass
class EditTask:
    source: tuple
    target: tuple


@dataclass
class BenchSpec:
    methods: tuple = METHODS
    eta_dec_sweep: Optional[tuple] = None  # None -> just schedule.eta_dec
    target_samples: int = 500
    target_seed: int = 123
    source_seed_offset: int = 1000
    workers: int = 1

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if not self.methods:
            raise ConfigError("bench.methods: at least one method must be toggled on")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"bench.methods: unknown {bad}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("bench.methods lists a method twice")
        if self.eta_dec_sweep is not None:
            self.eta_dec_sweep = tuple(int(v) for v in self.eta_dec_sweep)
            if not self.eta_dec_sweep:
                raise ConfigError("bench.eta_dec_sweep is empty")
        if self.target_samples < 1 or self.workers < 1:
            raise ConfigError("bench.target_samples and bench.workers must be >= 1")


@dataclass
class ExperimentConfig:
    scene: Scene
    model: ModelSpec
    train: TrainConfig
    schedule: EditSchedule
    edit: EditConfig
    task: EditTask
    bench: BenchSpec
    seeds: tuple
    output_dir: Path
    llm: Optional[LlmEndpointConfig] = None
    source_path: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        for name, vals in (("source", self.task.source), ("target", self.task.target)):
            try:
                self.scene.embed(vals)
            except ConfigError as exc:
                raise ConfigError(f"edit.{name}: {exc}") from exc
        for eta in self.sweep_points:
            EditSchedule(self.schedule.T, self.schedule.eta_max, eta)

    @property
    def sweep_points(self) -> tuple:
        return self.bench.eta_dec_sweep or (self.schedule.eta_dec,)

    # output layout
    @property
    def models_dir(self) -> Path:
        return self.output_dir / "models"

    @property
    def latents_dir(self) -> Path:
        return self.output_dir / "latents"

    @property
    def reports_dir(self) -> Path:
        return self.output_dir / "reports"

    @property
    def plots_dir(self) -> Path:
        return self.output_dir / "plots"

    @property
    def model_path(self) -> Path:
        return self.models_dir / "field.sff"


def _section(raw: dict, name: str) -> dict:
    val = raw.get(name) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return val


def _build(cls, data: dict, where: str):
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _read_yaml(path: Path) -> dict:
    if not path.is_file():
        raise ConfigError(f"file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def scene_from_dict(data: dict) -> Scene:
    try:
        attrs = [Attribute(a["name"], a["locations"], a["means"], a.get("values")) for a in data.get("attributes", [])]
        return Scene(data["shape"], attrs, float(data.get("spread", 0.1)), data.get("background"),
                     data.get("subject", "a figure"))
    except KeyError as exc:
        raise ConfigError(f"scene: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"scene: {exc}") from exc


def _seeds(raw) -> tuple:
    if raw is None:
        return tuple(range(50))
    if isinstance(raw, int):
        return tuple(range(raw))
    if isinstance(raw, dict):
        return tuple(range(int(raw.get("start", 0)), int(raw.get("start", 0)) + int(raw["count"])))
    return tuple(raw)


def config_from_dict(raw: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}")
    scene_raw = raw.get("scene")
    if isinstance(scene_raw, str):
        scene_raw = _read_yaml(base_dir / scene_raw)
        scene_raw = scene_raw.get("scene", scene_raw)
    if not isinstance(scene_raw, dict):
        raise ConfigError("scene: give a mapping or the path of a scene file")
    scene = scene_from_dict(scene_raw)

    train_raw = dict(_section(raw, "train"))
    if "betas" in train_raw:
        train_raw["betas"] = tuple(train_raw["betas"])
    edit_raw = dict(_section(raw, "edit"))
    source = edit_raw.pop("source", [0] * len(scene.attributes))
    target = edit_raw.pop("target", [min(1, a.n_values - 1) for a in scene.attributes])
    llm_raw = raw.get("llm")
    out = Path(raw.get("output_dir", "runs"))
    return ExperimentConfig(
        scene=scene,
        model=_build(ModelSpec, _section(raw, "model"), "model"),
        train=_build(TrainConfig, train_raw, "train"),
        schedule=_build(EditSchedule, _section(raw, "schedule"), "schedule"),
        edit=_build(EditConfig, edit_raw, "edit"),
        task=EditTask(tuple(int(v) for v in source), tuple(int(v) for v in target)),
        bench=_build(BenchSpec, _section(raw, "bench"), "bench"),
        seeds=_seeds(raw.get("seeds")),
        output_dir=out if out.is_absolute() else base_dir / out,
        llm=_build(LlmEndpointConfig, llm_raw, "llm") if llm_raw else None,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    cfg = config_from_dict(_read_yaml(path), path.parent)
    cfg.source_path = path
    return cfg


def _circle(k: int, n: int = 3, radius: float = 2.0) -> list:
    return [[round(radius * float(np.cos(2 * np.pi * v / n + k)), 6), round(radius * float(np.sin(2 * np.pi * v / n + k)), 6)]
            for v in range(n)]


def reference_config() -> str:
    """The documented default configuration: a three-attribute editing scene."""
    colours = ["red", "green", "blue"]
    attrs = "\n".join(
        f"    - name: {name}\n      locations: [[0, {k}]]\n      values: {colours}\n      means: {_circle(k)}"
        for k, name in enumerate(["hat", "scarf", "glasses"])
    )
    return f"""\
# splitflow experiment configuration (reference, all defaults spelled out)
# Paths are relative to this file.

scene:                      # or: scene: path/to/scene.yaml
  shape: [2, 2, 3]          # (channels, height, width) of every latent
  subject: a figure         # caption head used by text decomposers
  spread: 0.2               # per-coordinate std of the data around its mean
  # background: mean latent (nested C x H x W list); locations no attribute owns
  background: [[[0, 0, 0], [1.0, 0.5, -1.0]], [[0, 0, 0], [1.0, -0.5, 0.5]]]
  attributes:               # one one-hot block per attribute in the condition
{attrs}

model:
  hidden: [256, 256]
  activation: tanh          # tanh | relu
  init_seed: 0

train:
  batch_size: 256
  steps: 8000
  lr: 0.001
  betas: [0.9, 0.999]
  adam_eps: 1.0e-08
  cond_dropout: 0.1         # probability of training on the null condition
  seed: 1
  lr_schedule: cosine       # constant | cosine

schedule:
  T: 50                     # noise grid sigma_i = i / T
  eta_max: 33               # first editing step
  eta_dec: 28               # step at which the sub-flows are merged

edit:
  cfg_src: 3.5
  cfg_tgt: 13.5
  cfg_sub: null             # null -> cfg_tgt
  fidelity_enhanced: false  # use the clean source latent during the split phase
  share_eps_across_flows: true
  max_sub_prompts: 3
  ltp_reference: pre        # pre | post: target latent before/after its own step at eta_dec
  source: [0, 0, 0]         # attribute values of the source
  target: [1, 1, 1]         # attribute values of the edit target

bench:
  methods: [baseline, avg, ltp, ltp+vfa]   # any of baseline, avg, ltp, vfa, ltp+vfa
  eta_dec_sweep: null       # e.g. [30, 29, 28, 27, 26]; null -> schedule.eta_dec only
  target_samples: 500       # reference cloud for energy_distance_to_target
  target_seed: 123
  source_seed_offset: 1000  # source latent of seed s is drawn with rng(offset + s)
  workers: 1                # process pool size

seeds: {{start: 0, count: 50}}   # or an explicit list, or an integer count

# llm:                      # OpenAI-compatible endpoint for --decomposer llm
#   base_url: http://127.0.0.1:8000/v1
#   model: mistral-7b-instruct
#   api_key_env: SPLITFLOW_LLM_API_KEY
#   timeout: 30
#   temperature: 0

output_dir: runs
"""
