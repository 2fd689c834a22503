"""Algorithm and guidance ablations on the synthetic token dynamics.

An *arm* is a training recipe plus a sampling rule:

* ``ours``: uniform noise on unmasked tokens (eta > 0), loss on every
  position, and committed tokens may be re-sampled while decoding;
* ``maskgit_baseline``: eta = 0, loss on masked positions only, and committed
  tokens are frozen.

Each trained arm is rolled out on held-out episodes for every guidance weight.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np

from .denoiser.env import ToyDynamicsConfig, generate_batch
from .denoiser.model import ModelConfig, ToyDenoiser
from .denoiser.training import TrainConfig, train
from .metrics import chamfer, grid_points
from .sampler import SamplerConfig, rollout

ALGORITHMS = ("ours", "maskgit_baseline")
COLUMNS = ["seed", "algorithm", "w", "token_error", "chamfer", "final_loss", "status", "error"]
# held-out episodes come from a stream training never touches
EVAL_STREAM = 7919


@dataclass(frozen=True)
class AblationSpec:
    env: ToyDynamicsConfig = ToyDynamicsConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    seeds: tuple = (0, 1, 2)
    algorithms: tuple = ALGORITHMS
    guidance: tuple = (0.0, 1.0, 2.0)
    K: int = 10
    top_k: int = 3
    n_eval: int = 48
    n_context: int = 2
    horizon: int = 4
    with_chamfer: bool = True


def arm_train_config(base: TrainConfig, algorithm: str, seed: int) -> TrainConfig:
    if algorithm == "ours":
        return replace(base, loss_on="all", seed=seed)
    if algorithm == "maskgit_baseline":
        return replace(base, eta=0.0, loss_on="masked", seed=seed)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def arm_sampler_config(algorithm: str, w: float, K: int, top_k: int, seed: int) -> SamplerConfig:
    return SamplerConfig(K=K, guidance_w=w, top_k_logits=top_k, seed=seed,
                         denoise=(algorithm == "ours"))


def held_out(spec: AblationSpec, seed: int):
    rng = np.random.default_rng([EVAL_STREAM, seed])
    return generate_batch(spec.env, rng, spec.n_eval)


def train_arm(spec: AblationSpec, algorithm: str, seed: int):
    cfg = arm_train_config(spec.train, algorithm, seed)
    model = ToyDenoiser.init(spec.model, np.random.default_rng([seed, 0xD1FF]))
    state = train(model, spec.env, cfg)
    return model, state


def evaluate(model, spec: AblationSpec, frames, actions, algorithm: str, w: float, seed: int) -> dict:
    t0, h = spec.n_context, spec.horizon
    scfg = arm_sampler_config(algorithm, w, spec.K, spec.top_k, seed)
    rng = np.random.default_rng([seed, 0x5A, int(round(w * 1000))])
    out = rollout(model, frames[:, :t0], actions[:, :t0], actions[:, t0 : t0 + h], h, scfg, rng)
    pred = out.frames[:, t0:]
    truth = frames[:, t0 : t0 + h]
    row = {"token_error": float(np.mean(pred != truth))}
    if spec.with_chamfer:
        shape = (spec.env.rows, spec.env.cols)
        vals = []
        for p, g in zip(pred.reshape(-1, pred.shape[-1]), truth.reshape(-1, truth.shape[-1])):
            pp, gp = grid_points(p, shape), grid_points(g, shape)
            if len(pp) and len(gp):
                vals.append(chamfer(pp, gp))
            elif len(pp) or len(gp):
                # one side empty: charge the squared grid diagonal
                vals.append(float(shape[0] ** 2 + shape[1] ** 2))
            else:
                vals.append(0.0)
        row["chamfer"] = float(np.mean(vals))
    return row


def run_ablation(spec: AblationSpec, log=None) -> list[dict]:
    rows = []
    for seed in spec.seeds:
        frames, actions = held_out(spec, seed)
        for algorithm in spec.algorithms:
            try:
                model, state = train_arm(spec, algorithm, seed)
                losses = [x[1] for x in state.log if x[2] != "skipped"]
                final = float(np.mean(losses[-20:])) if losses else float("nan")
            except Exception as exc:  # noqa: BLE001 - recorded per row, the run continues
                for w in spec.guidance:
                    rows.append(_row(seed, algorithm, w, status="failed", error=repr(exc)))
                continue
            for w in spec.guidance:
                try:
                    r = evaluate(model, spec, frames, actions, algorithm, w, seed)
                    rows.append(_row(seed, algorithm, w, final_loss=final, **r))
                except Exception as exc:  # noqa: BLE001
                    rows.append(_row(seed, algorithm, w, final_loss=final, status="failed", error=repr(exc)))
                if log:
                    log(rows[-1])
    return rows


def _row(seed, algorithm, w, *, token_error=float("nan"), chamfer=float("nan"), final_loss=float("nan"),
         status="ok", error=""):
    return {"seed": seed, "algorithm": algorithm, "w": float(w), "token_error": token_error,
            "chamfer": chamfer, "final_loss": final_loss, "status": status, "error": error}


def to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def lookup(rows, **key) -> list[dict]:
    return [r for r in rows if all(r[k] == v for k, v in key.items())]


def seed_mean(rows, algorithm: str, w: float, metric: str = "token_error") -> float:
    return float(np.mean([r[metric] for r in lookup(rows, algorithm=algorithm, w=float(w))]))
