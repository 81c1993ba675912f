"""Train the toy configuration on several seeds and record a summary.

    python3 scripts/run_toy_e2e.py --out runs/toy_e2e --seeds 0 1 2

Writes one run directory per seed plus ``summary.json`` holding the random
and standing-still baselines measured on the same evaluation seeds.
"""

import argparse
import json
import os
import time

from latentdrive.config import load_config
from latentdrive.trainer import evaluate_baseline, train

HERE = os.path.dirname(os.path.abspath(__file__))
DEFAULT_CONFIG = os.path.join(HERE, "..", "src", "latentdrive", "configs", "toy.ini")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=DEFAULT_CONFIG)
    ap.add_argument("--out", default="runs/toy_e2e")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    t = cfg.train
    summary = {"config": os.path.abspath(args.config), "seeds": args.seeds}
    for kind in ("random", "standstill"):
        r = evaluate_baseline(cfg.env, t.eval_episodes, t.eval_seed, cfg.policy.gamma, kind)
        summary[f"{kind}_return"] = r.mean_return
        summary[f"{kind}_collision_rate"] = r.collision_rate
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)

    for seed in args.seeds:
        run_dir = os.path.join(args.out, f"seed{seed}")
        start = time.time()
        train(cfg.with_seed(seed), run_dir,
              progress=lambda r, s=seed: print(f"seed {s} step {r['env_step']} "
                                               f"return {r['avg_return']:.2f} "
                                               f"e {r['pixel_error']:.4f} "
                                               f"collisions {r['collision_rate']:.2f}", flush=True))
        summary.setdefault("wall_seconds", {})[str(seed)] = time.time() - start
        with open(os.path.join(args.out, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
