"""Command-line entry point: ``latentdrive {train,eval,render,validate,inspect,config}``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime fault,
4 validation failure. Commands write only below ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import platform
import sys

import numpy as np
import torch

from . import __version__
from .config import RunConfig, describe_defaults, dump_config, load_config
from .errors import ConfigurationError, LatentDriveError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VALIDATION = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so ``main`` owns exit codes."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


# -- image output ---------------------------------------------------------------

def to_bytes(img):
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6 writer; ``img`` is ``H x W x 3`` in [0, 1]."""
    data = to_bytes(img)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8)[: w * h * 3].reshape(h, w, 3)


def write_png(path):
    """Return a PNG writer when Pillow is importable, else ``None``."""
    try:
        from PIL import Image
    except ImportError:
        return None
    return lambda img: Image.fromarray(to_bytes(img)).save(path)


def save_image(base, img, fmt="auto"):
    """Write ``base.ppm`` always and ``base.png`` if requested and possible."""
    written = [f"{base}.ppm"]
    write_ppm(written[0], img)
    if fmt in ("auto", "png"):
        writer = write_png(f"{base}.png")
        if writer is not None:
            writer(img)
            written.append(f"{base}.png")
        elif fmt == "png":
            raise UsageError("PNG output needs Pillow (pip install Pillow)")
    return written


def strip_image(top, bottom):
    """Two rows of equally sized tiles: inputs and truth above, reconstructions below."""
    return np.concatenate([np.concatenate(top, axis=1), np.concatenate(bottom, axis=1)], axis=0)


# -- commands -----------------------------------------------------------------

def _manifest(args, cfg):
    return {
        "version": __version__,
        "seed": cfg.train.seed,
        "config_path": os.path.abspath(args.config) if args.config else None,
        "config": cfg.to_dict(),
        "start_time": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "artifacts": {
            "log": "log.csv",
            "timing": "timing.csv",
            "checkpoints": "checkpoints/ckpt_<step:08d>.npz",
            "config": "config.ini",
        },
    }


def cmd_train(args):
    from .trainer import train

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.steps is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, total_env_steps=args.steps))
    out = args.out
    os.makedirs(out, exist_ok=True)
    manifest_path = os.path.join(out, "manifest.json")
    if os.path.exists(manifest_path):
        raise UsageError(f"{out} already holds a run (manifest.json exists); choose a fresh --out")
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(dump_config(cfg))
    with open(manifest_path, "w") as fh:
        json.dump(_manifest(args, cfg), fh, indent=2, sort_keys=True)

    def progress(row):
        if not args.quiet:
            print(f"step {row['env_step']:>7d}  return {row['avg_return']:9.3f}  "
                  f"collisions {row['collision_rate']:.2f}  e {row['pixel_error']:.4f}", flush=True)

    result = train(cfg, out, progress=progress)
    print(f"log: {result.log_path}")
    print(f"checkpoints: {len(result.checkpoints)} in {os.path.join(out, 'checkpoints')}")
    return EXIT_OK


def cmd_eval(args):
    from .trainer import evaluate_policy, load_run

    if args.episodes <= 0:
        raise UsageError("--episodes must be positive")
    cfg, model, agent, step = load_run(args.checkpoint)
    seed = cfg.train.eval_seed if args.seed is None else args.seed
    ev = evaluate_policy(model, agent, cfg.env, args.episodes, seed, cfg.policy.gamma, mode=args.mode)
    print(f"checkpoint: {args.checkpoint} (step {step})")
    print(f"episodes: {args.episodes}")
    print(f"mean_return: {ev.mean_return:.4f}")
    print(f"return_std: {ev.return_std:.4f}")
    print(f"undiscounted_return: {ev.undiscounted_mean:.4f}")
    print(f"collision_rate: {ev.collision_rate:.4f}")
    print(f"pixel_error: {ev.pixel_error:.6f}")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "eval.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("episode", "discounted_return", "done_reason"))
        for i, (r, reason) in enumerate(zip(ev.returns, ev.reasons)):
            w.writerow((i, repr(float(r)), reason))
        w.writerow(("mean", repr(ev.mean_return), ""))
        w.writerow(("std", repr(ev.return_std), ""))
    print(f"csv: {path}")
    return EXIT_OK


def collect_frames(model, agent, env_config, frames, seed, horizon=0, stride=1):
    """Roll episodes with online filtering and return per-frame records.

    Each record holds the true camera, lidar and mask, their reconstructions
    from the filtered latent, and (when ``horizon`` > 0) predicted future masks
    alongside the true ones under the actions actually taken.
    """
    from .trainer import episode_seed, obs_tensors
    from .policy import act
    from .worldsim import DrivingEnv

    env = DrivingEnv(env_config)
    gen = torch.Generator().manual_seed(int(seed))
    dim = model.config.latent_dim
    records = []
    ep = 0
    with torch.no_grad():
        while len(records) < frames:
            result = env.reset(episode_seed(seed, ep))
            ep += 1
            z, prev_a, t = None, None, 0
            trace = []
            while True:
                obs = obs_tensors(result)
                z = model.infer_online(z, obs, prev_a, torch.randn(1, dim, generator=gen))
                a = act(agent.actor, z, "stochastic", noise=torch.randn(1, 2, generator=gen))
                trace.append({"obs": obs, "z": z, "a": a})
                result = env.step(a[0].double().numpy())
                prev_a, t = a, t + 1
                if result.done:
                    trace.append({"obs": obs_tensors(result), "z": None, "a": None})
                    break
            for i in range(0, len(trace) - 1, stride):
                if len(records) >= frames:
                    break
                rec = trace[i]
                rec_out = {k: rec["obs"][k][0].numpy() for k in ("camera", "lidar", "mask")}
                recon = model.decode_obs(rec["z"])
                for k in ("camera", "lidar"):
                    rec_out[f"{k}_hat"] = recon[k][0].clamp(0, 1).numpy() if k in recon else None
                rec_out["mask_hat"] = (model.decode_mask(rec["z"])[0].clamp(0, 1).numpy()
                                       if "mask" in model.decoders else None)
                h = min(horizon, len(trace) - 1 - i)
                if h > 0 and "mask" in model.decoders:
                    acts = torch.cat([trace[i + j]["a"] for j in range(h)])[None]
                    _, masks = model.predict_rollout(rec["z"], acts, torch.randn(1, h, dim, generator=gen))
                    rec_out["future_hat"] = [m.clamp(0, 1).numpy() for m in masks[0]]
                    rec_out["future"] = [trace[i + j + 1]["obs"]["mask"][0].numpy() for j in range(h)]
                records.append(rec_out)
    return records


def cmd_render(args):
    from .trainer import load_run

    if args.frames <= 0:
        raise UsageError("--frames must be a positive integer")
    if args.horizon < 0 or args.stride <= 0:
        raise UsageError("--horizon must be >= 0 and --stride positive")
    cfg, model, agent, step = load_run(args.checkpoint)
    seed = cfg.train.eval_seed if args.seed is None else args.seed
    records = collect_frames(model, agent, cfg.env, args.frames, seed, args.horizon, args.stride)
    os.makedirs(args.out, exist_ok=True)
    blank = np.full((cfg.env.image_size, cfg.env.image_size, 3), 0.5, dtype=np.float32)
    n = 0
    for k, rec in enumerate(records):
        top = [rec["camera"], rec["lidar"], rec["mask"]]
        bottom = [rec[f"{name}_hat"] if rec[f"{name}_hat"] is not None else blank
                  for name in ("camera", "lidar", "mask")]
        save_image(os.path.join(args.out, f"strip_{k:04d}"), strip_image(top, bottom), args.format)
        n += 1
        if "future" in rec:
            save_image(os.path.join(args.out, f"rollout_{k:04d}"),
                       strip_image(rec["future"], rec["future_hat"]), args.format)
    print(f"wrote {n} strips to {args.out} (checkpoint step {step})")
    return EXIT_OK


def cmd_validate(args):
    from .validate import run_checks

    results = run_checks(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "validate.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("check", "passed", "measured", "tolerance", "seconds"))
            for r in results:
                w.writerow((r.name, int(r.passed), repr(r.measured), repr(r.tolerance), f"{r.seconds:.3f}"))
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VALIDATION
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_inspect(args):
    from .checkpoint import read_checkpoint

    meta, arrays = read_checkpoint(args.checkpoint)
    print(f"checkpoint: {args.checkpoint}")
    print(f"step: {meta.get('step')}")
    for group, params in arrays.items():
        count = sum(int(a.size) for a in params.values())
        print(f"group {group}: {len(params)} tensors, {count} parameters")
    if args.config:
        print(json.dumps(meta.get("config"), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


def build_parser():
    epilog = "config keys and defaults:\n" + describe_defaults().replace(", ", "\n    ")
    p = _Parser(prog="latentdrive", description="Interpretable latent-model driving agent toolkit.",
                epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train the model and agent jointly",
                       epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", help="INI file; omitted keys take their defaults")
    t.add_argument("--seed", type=int, help="overrides [train] seed")
    t.add_argument("--steps", type=int, help="overrides [train] total_env_steps")
    t.add_argument("--out", required=True, help="run directory (must not hold a previous run)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--seed", type=int, help="evaluation seed (default: the run's eval_seed)")
    e.add_argument("--mode", choices=("stochastic", "deterministic"), default="stochastic")
    e.add_argument("--out", default=".", help="directory for eval.csv")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="write input/reconstruction strips")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--frames", type=int, default=4)
    r.add_argument("--out", required=True)
    r.add_argument("--horizon", type=int, default=0, help="also write predicted future-mask strips")
    r.add_argument("--stride", type=int, default=5, help="ticks between rendered frames")
    r.add_argument("--seed", type=int)
    r.add_argument("--format", choices=("auto", "ppm", "png"), default="auto",
                   help="PPM is always written; PNG too when Pillow is available")
    r.set_defaults(func=cmd_render)

    v = sub.add_parser("validate", help="run the oracle check suites")
    v.add_argument("--quick", action="store_true", help="smaller sample sizes")
    v.add_argument("--out", help="also write validate.csv here")
    v.set_defaults(func=cmd_validate)

    i = sub.add_parser("inspect", help="summarize a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--config", action="store_true", help="print the stored configuration")
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("config", help="print a complete config (defaults or a resolved file)")
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return EXIT_CONFIG
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        _err(exc)
        return EXIT_CONFIG
    except LatentDriveError as exc:
        _err(exc)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
