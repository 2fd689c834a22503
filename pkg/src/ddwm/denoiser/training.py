"""Training loop for the toy denoiser over the objective mixture.

Every iteration draws its randomness from ``default_rng([seed, iteration])``,
so a run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import archive
from ..corruption import (OBJECTIVE_WEIGHTS, ObjectiveKind, apply_objective, build_temporal_mask,
                          sample_objective)
from ..errors import PreconditionError, TrainingDiverged
from .env import ToyDynamicsConfig, generate_batch
from .model import LABEL_SMOOTHING, DenoiserInput, ModelConfig, ToyDenoiser


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 600
    batch_size: int = 16
    optimizer: str = "sgd"  # or "adamw" (see adamw_preset)
    lr: float = 0.5
    warmup: int = 20
    final_lr_fraction: float = 0.1
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.95)
    eta: float = 0.2
    loss_on: str = "all"
    label_smoothing: float = LABEL_SMOOTHING
    objective_weights: tuple = tuple(OBJECTIVE_WEIGHTS.values())
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "objective_weights", tuple(self.objective_weights))
        if self.optimizer not in ("sgd", "adamw"):
            raise PreconditionError(f"unknown optimizer {self.optimizer!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise PreconditionError("iterations >= 0, batch_size >= 1 and lr > 0 are required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["objective_weights"] = list(self.objective_weights)
        return d


def adamw_preset(**overrides) -> TrainConfig:
    """AdamW with beta2 = 0.95 and weight decay, as used for large-scale training."""
    base = dict(optimizer="adamw", lr=1e-3, betas=(0.9, 0.95), weight_decay=1e-4, warmup=50)
    base.update(overrides)
    return TrainConfig(**base)


def learning_rate(cfg: TrainConfig, i: int) -> float:
    """Linear warmup, then cosine decay from ``lr`` to ``final_lr_fraction * lr``."""
    if cfg.warmup and i < cfg.warmup:
        return cfg.lr * (i + 1) / cfg.warmup
    span = max(1, cfg.iterations - cfg.warmup)
    frac = min(1.0, (i - cfg.warmup) / span)
    lo = cfg.final_lr_fraction
    return cfg.lr * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * frac)))


def clip_gradients(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainState:
    model: ToyDenoiser
    iteration: int = 0
    opt: dict = field(default_factory=dict)  # AdamW moments, keyed "m.<name>" / "v.<name>"
    log: list = field(default_factory=list)  # (iteration, loss, mode)


# embeddings and positional tables are not decayed, nor are gains and biases
_NO_DECAY = ("emb", "pos_s", "pos_t", "rel")


def decays(name: str, value: np.ndarray) -> bool:
    return value.ndim > 1 and name.split(".")[-1] not in _NO_DECAY


def _apply_update(state: TrainState, grads: dict, cfg: TrainConfig, lr: float):
    p = state.model.params
    if cfg.optimizer == "sgd":
        for name, g in grads.items():
            if cfg.weight_decay and decays(name, p[name]):
                p[name] *= 1 - lr * cfg.weight_decay
            p[name] -= lr * g
        return
    b1, b2 = cfg.betas
    t = state.iteration + 1
    for name, g in grads.items():
        m = state.opt.setdefault("m." + name, np.zeros_like(g))
        v = state.opt.setdefault("v." + name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        if cfg.weight_decay and decays(name, p[name]):
            p[name] *= 1 - lr * cfg.weight_decay
        p[name] -= lr * mhat / (np.sqrt(vhat) + 1e-8)


def make_batch(env: ToyDynamicsConfig, cfg: TrainConfig, rng: np.random.Generator, dataset=None):
    """Draw trajectories, one objective for the whole batch, and corrupt each trajectory."""
    if dataset is None:
        frames, actions = generate_batch(env, rng, cfg.batch_size)
    else:
        idx = rng.integers(0, dataset[0].shape[0], size=cfg.batch_size)
        frames, actions = dataset[0][idx], dataset[1][idx]
    mode = sample_objective(rng, cfg.objective_weights)
    samples = [apply_objective(f, env.m, mode, rng, eta=cfg.eta, loss_on=cfg.loss_on) for f in frames]
    inp = DenoiserInput(np.stack([s.corrupted for s in samples]), actions, samples[0].temporal_mask)
    loss_mask = np.stack([s.loss_mask for s in samples])
    return inp, frames, loss_mask, mode.kind


def train_step(state: TrainState, env: ToyDynamicsConfig, cfg: TrainConfig, dataset=None):
    i = state.iteration
    rng = np.random.default_rng([cfg.seed, i])
    inp, targets, loss_mask, kind = make_batch(env, cfg, rng, dataset)
    if not loss_mask.any():
        # every sample drew zero masked positions under masked-only scoring
        state.log.append((i, float("nan"), "skipped"))
        state.iteration += 1
        return
    loss, grads = state.model.loss_and_gradients(inp, targets, loss_mask, cfg.label_smoothing)
    if not math.isfinite(loss):
        raise TrainingDiverged(i, loss)
    clip_gradients(grads, cfg.clip_norm)
    _apply_update(state, grads, cfg, learning_rate(cfg, i))
    state.log.append((i, loss, kind.value))
    state.iteration += 1


def train(model: ToyDenoiser, env: ToyDynamicsConfig, cfg: TrainConfig, *, state: TrainState | None = None,
          dataset=None, until: int | None = None, checkpoint_every: int = 0,
          checkpoint_stem=None) -> TrainState:
    """Run iterations ``state.iteration .. until`` (default ``cfg.iterations``) in place on ``model``."""
    if state is None:
        state = TrainState(model)
    stop = cfg.iterations if until is None else min(until, cfg.iterations)
    while state.iteration < stop:
        train_step(state, env, cfg, dataset)
        if checkpoint_every and checkpoint_stem and state.iteration % checkpoint_every == 0:
            save_checkpoint(checkpoint_stem, state, env, cfg)
    return state


def save_checkpoint(stem, state: TrainState, env: ToyDynamicsConfig, cfg: TrainConfig, meta: dict | None = None):
    tensors = dict(state.model.params)
    tensors.update({"opt." + k: v for k, v in state.opt.items()})
    info = {"kind": "toy_denoiser", "model_config": state.model.config.to_dict(),
            "iteration": state.iteration, "env": env.to_dict(), "train": cfg.to_dict()}
    info.update(meta or {})
    return archive.save(stem, tensors, info)


def load_checkpoint(stem) -> tuple[TrainState, dict]:
    tensors, meta = archive.load(stem)
    cfg = dict(meta["model_config"])
    cfg["layers"] = tuple(cfg["layers"])
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt = {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}
    model = ToyDenoiser(ModelConfig(**cfg), params)
    return TrainState(model, int(meta.get("iteration", 0)), opt), meta


def write_metrics(path, log) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "mode"])
        for i, loss, mode in log:
            w.writerow([i, repr(float(loss)), mode])
    return path


def next_frame_masked_ce(model: ToyDenoiser, env: ToyDynamicsConfig, rng: np.random.Generator,
                         n: int = 32) -> float:
    """Plain cross-entropy on masked tokens of the last frame given clean history."""
    frames, actions = generate_batch(env, rng, n)
    inp_frames = frames.copy()
    loss_mask = np.zeros(frames.shape, dtype=bool)
    for b in range(n):
        s = apply_objective(frames[b, -1:], env.m, ObjectiveKind.PER_FRAME, rng, eta=0.0, loss_on="masked")
        inp_frames[b, -1] = s.corrupted[0]
        loss_mask[b, -1] = s.loss_mask[0]
    inp = DenoiserInput(inp_frames, actions, build_temporal_mask(env.T, "causal"))
    loss, _ = model.loss_and_gradients(inp, frames, loss_mask, smoothing=0.0, need_grad=False)
    return loss
