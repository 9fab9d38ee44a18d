"""Known-object recognition on the desk set: class accuracy, final pose error, speed."""

import argparse
import json
import time

import numpy as np

from activetouch.harness import run_experiment
from activetouch.objects import DESK_SET


def report(results, eps=0.6):
    ok = [r for r in results if not r.failed]
    acc = np.mean([r.final_class == r.truth_name for r in results])
    good = np.mean([r.map_shape_twd is not None and r.map_shape_twd <= eps for r in results])
    steps = [r.terminated_at for r in results]
    return {"trials": len(results), "failed": len(results) - len(ok), "class_accuracy": float(acc),
            "pose_ok_fraction": float(good), "mean_steps": float(np.mean(steps)),
            "max_particles": max(r.max_particles for r in results)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--procedure", default="gpis_dhd", choices=["gpis_dhd", "rrt"])
    ap.add_argument("--objects", nargs="+", default=list(DESK_SET))
    ap.add_argument("--out", default="runs/known")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    manifest = {"objects": args.objects, "trials": args.trials, "seed": args.seed, "procedures": [args.procedure]}
    t0 = time.perf_counter()
    results, rows = run_experiment(manifest, args.out, args.jobs)
    stats = report(results)
    stats["wall_clock_s"] = round(time.perf_counter() - t0, 1)
    below = next((r["step"] for r in rows if r["pose_twd_mean"] < 0.6), None)
    stats["mean_pose_below_eps_at"] = below
    print(json.dumps(stats, indent=2))


if __name__ == "__main__":
    main()
