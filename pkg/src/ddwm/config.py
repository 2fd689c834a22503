"""Experiment configuration: a JSON document validated against a published schema."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .ablate import AblationSpec, arm_train_config
from .denoiser.env import ToyDynamicsConfig
from .denoiser.model import ModelConfig
from .denoiser.training import TrainConfig
from .sampler import SamplerConfig

# Per-wrong-code smoothing mass of eps = 0.1 over a 1024-code vocabulary,
# re-expressed for the 8-code benchmark: 0.1 * 7 / 1023.
BENCHMARK_LABEL_SMOOTHING = 0.1 * 7 / 1023


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvSection(_Strict):
    rows: int = Field(8, ge=2)
    cols: int = Field(8, ge=2)
    m: int = Field(8, ge=2)
    T: int = Field(6, ge=1)
    min_size: int = Field(2, ge=1)
    max_size: int = Field(3, ge=1)
    max_speed: int = Field(1, ge=0)
    action_change: float = Field(0.3, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _fits(self):
        ToyDynamicsConfig(**self.model_dump()).validate()
        return self


class ScheduleSection(_Strict):
    K: int = Field(10, ge=1)
    eta: float = Field(0.2, ge=0.0, le=1.0)
    mask_schedule: Literal["cosine"] = "cosine"


class SamplerSection(_Strict):
    guidance_w: float = Field(2.0, ge=0.0)
    top_k: int = Field(3, ge=1)
    seed: int = 0
    confidence: Literal["full", "topk"] = "full"


class ModelSection(_Strict):
    d: int = Field(32, ge=1)
    hidden: int = Field(64, ge=1)
    max_frames: int = Field(8, ge=1)
    layers: list[Literal["spatial", "conv", "temporal"]] = ["conv", "temporal", "conv", "temporal", "conv"]
    dtype: Literal["float32", "float64"] = "float32"


class TrainingSection(_Strict):
    iterations: int = Field(3000, ge=0)
    batch_size: int = Field(16, ge=1)
    optimizer: Literal["sgd", "adamw"] = "adamw"
    lr: float = Field(0.006, gt=0)
    warmup: int = Field(20, ge=0)
    final_lr_fraction: float = Field(0.1, ge=0.0, le=1.0)
    clip_norm: float = Field(1.0, ge=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    label_smoothing: float = Field(BENCHMARK_LABEL_SMOOTHING, ge=0.0, lt=1.0)
    objective_weights: tuple[float, float, float] = (0.5, 0.4, 0.1)
    seed: int = 0


class AblationSection(_Strict):
    algorithm: Literal["ours", "maskgit_baseline"] = "ours"
    algorithms: list[Literal["ours", "maskgit_baseline"]] = ["ours", "maskgit_baseline"]
    guidance: list[float] = [0.0, 1.0, 2.0]
    seeds: list[int] = [0, 1, 2]
    n_eval: int = Field(96, ge=1)
    n_context: int = Field(2, ge=1)
    horizon: int = Field(4, ge=1)


class DataSection(_Strict):
    episodes: int = Field(100, ge=1)
    seed: int = 0


class ExperimentConfig(_Strict):
    env: EnvSection = EnvSection()
    schedule: ScheduleSection = ScheduleSection()
    sampler: SamplerSection = SamplerSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    ablation: AblationSection = AblationSection()
    data: DataSection = DataSection()

    @model_validator(mode="after")
    def _consistent(self):
        a = self.ablation
        if a.n_context + a.horizon > self.env.T:
            raise ValueError(f"n_context + horizon = {a.n_context + a.horizon} exceeds episode length T={self.env.T}")
        if self.env.T > self.model.max_frames:
            raise ValueError(f"episodes of {self.env.T} frames exceed model max_frames={self.model.max_frames}")
        return self

    # -- conversions -----------------------------------------------------------

    def to_env(self) -> ToyDynamicsConfig:
        return ToyDynamicsConfig(**self.env.model_dump())

    def to_model(self) -> ModelConfig:
        mdl = self.model
        return ModelConfig(m=self.env.m, rows=self.env.rows, cols=self.env.cols, d=mdl.d, hidden=mdl.hidden,
                           max_frames=mdl.max_frames, layers=tuple(mdl.layers), dtype=mdl.dtype)

    def to_train(self, algorithm: str | None = None, seed: int | None = None) -> TrainConfig:
        algorithm = algorithm or self.ablation.algorithm
        t = self.training.model_dump()
        t["seed"] = self.training.seed if seed is None else seed
        base = TrainConfig(eta=self.schedule.eta, **t)
        return arm_train_config(base, algorithm, base.seed)

    def to_sampler(self, algorithm: str | None = None, **overrides) -> SamplerConfig:
        s = self.sampler
        kw = dict(K=self.schedule.K, guidance_w=s.guidance_w, top_k_logits=s.top_k, seed=s.seed,
                  confidence=s.confidence, denoise=(algorithm or self.ablation.algorithm) == "ours")
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return SamplerConfig(**kw)

    def to_ablation(self) -> AblationSpec:
        a = self.ablation
        t = self.training.model_dump()
        return AblationSpec(env=self.to_env(), model=self.to_model(),
                            train=TrainConfig(eta=self.schedule.eta, **t), seeds=tuple(a.seeds),
                            algorithms=tuple(a.algorithms), guidance=tuple(a.guidance), K=self.schedule.K,
                            top_k=self.sampler.top_k, n_eval=a.n_eval, n_context=a.n_context, horizon=a.horizon)

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(path=None) -> ExperimentConfig:
    """Parse and validate; a missing path gives the defaults."""
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.model_validate_json(Path(path).read_text())


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
