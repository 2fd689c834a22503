"""Command-line harness: ``ddwm <command> [--config experiment.json] ...``.

Every artifact written carries the config hash and the seed that produced
it, either in its own JSON sidecar or in the ``manifest.json`` beside it.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .ablate import EVAL_STREAM, run_ablation, seed_mean, to_csv
from .archive import canonical_json
from .archive import load as load_archive
from .archive import save as save_archive
from .config import ExperimentConfig, json_schema, load_config
from .denoiser.env import generate_episode
from .denoiser.model import ToyDenoiser
from .denoiser.training import TrainState, load_checkpoint, save_checkpoint, train, write_metrics
from .metrics import Roi, grid_points, metrics_report
from .pointio import read_cloud, read_rays, write_cloud
from .sampler import Context, rollout, sample_frame
from .verify import MUTATIONS, run_checks


def _threads():
    """Honour ``DDWM_THREADS`` by capping the BLAS/OpenMP pools."""
    n = os.environ.get("DDWM_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _provenance(cfg: ExperimentConfig, seed: int, command: str, **extra) -> dict:
    out = {"ddwm_version": __version__, "command": command, "config_hash": cfg.config_hash(), "seed": int(seed)}
    out.update(extra)
    return out


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj))
    return path


def _episodes(cfg: ExperimentConfig, seed: int, n: int, stream: int | None = None):
    """Episode ``i`` comes from its own substream, so any subset can be regenerated."""
    env = cfg.to_env()
    eps = []
    for i in range(n):
        key = [seed, i] if stream is None else [stream, seed, i]
        eps.append(generate_episode(env, np.random.default_rng(key)))
    return np.stack([e.frames for e in eps]), np.stack([e.actions for e in eps])


def _load_dataset(path: Path):
    manifest = json.loads((path / "manifest.json").read_text())
    frames, actions = [], []
    for name in manifest["files"]:
        t, _ = load_archive(path / name)
        frames.append(t["frames"])
        actions.append(t["actions"])
    return (np.stack(frames), np.stack(actions)), manifest


def _load_model(path) -> tuple[ToyDenoiser, dict]:
    state, meta = load_checkpoint(path)
    return state.model, meta


def _sampler(cfg, args, algorithm=None):
    return cfg.to_sampler(algorithm, K=args.steps, guidance_w=args.guidance, top_k_logits=args.topk,
                          seed=args.seed)


# -- commands -----------------------------------------------------------------


def cmd_verify(cfg, args) -> int:
    report = run_checks(args.mutate)
    for c in report["checks"]:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status} {c['name']}: deviation {c['deviation']:.3g} (tolerance {c['tolerance']:.3g})")
    if args.report:
        _write_json(Path(args.report), report)
    return 0 if report["passed"] else 1


def cmd_gen_data(cfg, args) -> int:
    out = Path(args.out)
    seed = cfg.data.seed if args.seed is None else args.seed
    n = cfg.data.episodes if args.episodes is None else args.episodes
    frames, actions = _episodes(cfg, seed, n)
    files = []
    for i in range(n):
        name = f"episode_{i:05d}"
        save_archive(out / name, {"frames": frames[i], "actions": actions[i]},
                     _provenance(cfg, seed, "gen-data", episode=i))
        files.append(name)
    _write_json(out / "manifest.json", _provenance(cfg, seed, "gen-data", episodes=n, files=files,
                                                   env=cfg.env.model_dump(), T=cfg.env.T))
    print(f"wrote {n} episodes to {out}")
    return 0


def cmd_train(cfg, args) -> int:
    out = Path(args.out)
    tcfg = cfg.to_train(args.algorithm, args.seed)
    env = cfg.to_env()
    stem = out / "checkpoint"
    dataset = None
    if args.data:
        dataset, _ = _load_dataset(Path(args.data))
    if args.resume and stem.with_suffix(".json").exists():
        state, meta = load_checkpoint(stem)
        if meta.get("config_hash") != cfg.config_hash():
            print(f"checkpoint {stem} was written under config {meta.get('config_hash')}, "
                  f"not {cfg.config_hash()}", file=sys.stderr)
            return 2
        log_path = out / "metrics.csv"
        if log_path.exists():
            with open(log_path) as fh:
                rows = list(csv.DictReader(fh))
            state.log = [(int(r["iteration"]), float(r["loss"]), r["mode"]) for r in rows
                         if int(r["iteration"]) < state.iteration]
    else:
        model = ToyDenoiser.init(cfg.to_model(), np.random.default_rng([tcfg.seed, 0xD1FF]))
        state = TrainState(model)
    prov = _provenance(cfg, tcfg.seed, "train", algorithm=args.algorithm or cfg.ablation.algorithm)
    t = time.perf_counter()
    every = args.checkpoint_every
    stop = tcfg.iterations if args.until is None else min(args.until, tcfg.iterations)
    while state.iteration < stop:
        nxt = min(stop, state.iteration + every) if every else stop
        train(state.model, env, tcfg, state=state, dataset=dataset, until=nxt)
        save_checkpoint(stem, state, env, tcfg, prov)
        write_metrics(out / "metrics.csv", state.log)
    if not stem.with_suffix(".json").exists():
        save_checkpoint(stem, state, env, tcfg, prov)
        write_metrics(out / "metrics.csv", state.log)
    _write_json(out / "manifest.json", dict(prov, iteration=state.iteration, checkpoint="checkpoint",
                                            metrics="metrics.csv", config=cfg.model_dump(mode="json")))
    losses = [x[1] for x in state.log[-20:] if x[2] != "skipped"]
    tail = float(np.mean(losses)) if losses else float("nan")
    print(f"trained to iteration {state.iteration} in {time.perf_counter() - t:.1f}s, recent loss {tail:.4f}")
    return 0


def cmd_sample(cfg, args) -> int:
    model, meta = _load_model(args.checkpoint)
    scfg = _sampler(cfg, args)
    t0 = cfg.ablation.n_context
    frames, actions = _episodes(cfg, scfg.seed, 1, stream=EVAL_STREAM)
    ctx = Context(frames[:, :t0], actions[:, : t0 + 1])
    x = sample_frame(model, ctx, scfg, np.random.default_rng([scfg.seed, 0x5A]))
    truth = frames[0, t0]
    report = _provenance(cfg, scfg.seed, "sample", sampler=scfg.__dict__, tokens=x[0].tolist(),
                         truth=truth.tolist(), token_error=float(np.mean(x[0] != truth)))
    shape = (cfg.env.rows, cfg.env.cols)
    print(x[0].reshape(shape))
    if args.out:
        _write_json(Path(args.out), report)
    return 0


def cmd_rollout(cfg, args) -> int:
    model, _ = _load_model(args.checkpoint)
    scfg = _sampler(cfg, args)
    t0, h = cfg.ablation.n_context, args.horizon
    n = args.episodes
    if args.data:
        (frames, actions), _ = _load_dataset(Path(args.data))
        frames, actions = frames[:n], actions[:n]
    else:
        frames, actions = _episodes(cfg, scfg.seed, n, stream=EVAL_STREAM)
    if t0 + h > frames.shape[1]:
        print(f"context {t0} + horizon {h} exceeds the {frames.shape[1]}-frame episodes", file=sys.stderr)
        return 2
    res = rollout(model, frames[:, :t0], actions[:, :t0], actions[:, t0 : t0 + h], h, scfg,
                  np.random.default_rng([scfg.seed, 0x5A, int(round(scfg.guidance_w * 1000))]))
    pred = res.frames[:, t0:]
    truth = frames[:, t0 : t0 + h]
    out = Path(args.out)
    prov = _provenance(cfg, scfg.seed, "rollout", sampler=scfg.__dict__, horizon=h, n_context=t0)
    save_archive(out / "rollout", {"predicted": pred, "truth": truth, "context": frames[:, :t0]}, prov)
    clouds = []
    if args.points:
        shape = (cfg.env.rows, cfg.env.cols)
        for e in range(pred.shape[0]):
            for f in range(h):
                for kind, tok in (("pred", pred[e, f]), ("gt", truth[e, f])):
                    name = f"points/ep{e:04d}_f{f}_{kind}"
                    write_cloud(out / name, grid_points(tok, shape), dict(prov, episode=e, frame=f))
                    clouds.append(name)
    err = float(np.mean(pred != truth))
    per_frame = [float(np.mean(pred[:, f] != truth[:, f])) for f in range(h)]
    _write_json(out / "manifest.json", dict(prov, episodes=int(pred.shape[0]), token_error=err,
                                            token_error_per_frame=per_frame, clouds=clouds))
    print(f"rollout token error {err:.4f} per frame {[round(x, 4) for x in per_frame]}")
    return 0


def cmd_ablate(cfg, args) -> int:
    spec = cfg.to_ablation()
    out = Path(args.out)
    t = time.perf_counter()
    rows = run_ablation(spec, log=lambda r: print(
        f"seed {r['seed']} {r['algorithm']:>16} w={r['w']:.1f} token_error={r['token_error']:.4f} "
        f"chamfer={r['chamfer']:.3f} {r['status']}", flush=True))
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(to_csv(rows))
    summary = {a: {str(w): seed_mean(rows, a, w) for w in spec.guidance} for a in spec.algorithms}
    _write_json(out / "manifest.json", _provenance(cfg, cfg.training.seed, "ablate", seeds=list(spec.seeds),
                                                   table="ablation.csv", seed_mean_token_error=summary,
                                                   seconds=round(time.perf_counter() - t, 1)))
    for a, row in summary.items():
        print(a, {w: round(v, 4) for w, v in row.items()})
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_eval(cfg, args) -> int:
    pred, _ = read_cloud(args.pred)
    gt, _ = read_cloud(args.gt)
    pd = gd = None
    if args.pred_rays and args.gt_rays:
        pd = read_rays(args.pred_rays)[2]
        gd = read_rays(args.gt_rays)[2]
    report = metrics_report(pred, gt, pd, gd, roi=Roi(), crop_gt=not args.no_crop_gt)
    print(json.dumps(report, sort_keys=True))
    if args.out:
        _write_json(Path(args.out), dict(report, config_hash=cfg.config_hash()))
    return 0


def cmd_schema(cfg, args) -> int:
    print(json.dumps(json_schema(), indent=2, sort_keys=True))
    return 0


# -- parser -----------------------------------------------------------------------


def _sampler_flags(p):
    p.add_argument("--steps", type=int, help="diffusion steps K")
    p.add_argument("--guidance", type=float, help="classifier-free guidance weight w")
    p.add_argument("--topk", type=int, help="sample from the top-k logits")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddwm", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--mutate", choices=MUTATIONS, help="inject a known bug first")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("gen-data", help="write synthetic episodes")
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one arm")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="gen-data directory; fresh episodes are drawn when omitted")
    p.add_argument("--algorithm", choices=["ours", "maskgit_baseline"])
    p.add_argument("--seed", type=int)
    p.add_argument("--until", type=int, help="stop after this iteration")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="decode one frame after held-out context")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    _sampler_flags(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("rollout", help="autoregressive multi-frame prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--episodes", type=int, default=8)
    p.add_argument("--data")
    p.add_argument("--points", action="store_true", help="also write per-frame point clouds")
    _sampler_flags(p)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("ablate", help="algorithm x guidance table")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("eval", help="forecasting metrics on point clouds")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-rays")
    p.add_argument("--gt-rays")
    p.add_argument("--no-crop-gt", action="store_true")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("schema", help="print the config JSON schema")
    p.set_defaults(fn=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except Exception as exc:  # noqa: BLE001 - schema errors end the run before any work
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    with _threads():
        return args.fn(cfg, args)


if __name__ == "__main__":
    sys.exit(main())
