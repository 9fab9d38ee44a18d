"""GPIS-DHD vs RRT exploration on identical objects and seeds: termination steps."""

import argparse
import json

import numpy as np

from activetouch.harness import run_experiment
from activetouch.objects import DESK_SET


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--objects", nargs="+", default=list(DESK_SET))
    ap.add_argument("--out", default="runs/rrt_comparison")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    manifest = {"objects": args.objects, "trials": args.trials, "seed": args.seed,
                "procedures": ["gpis_dhd", "rrt"]}
    results, _ = run_experiment(manifest, args.out, args.jobs)
    steps = {p: [r.terminated_at for r in results if r.config["exploration"] == p] for p in ("gpis_dhd", "rrt")}
    means = {p: float(np.mean(v)) for p, v in steps.items()}
    print(json.dumps({"steps": steps, "mean": means, "ratio": means["gpis_dhd"] / means["rrt"],
                      "converged": {p: sum(r.converged for r in results if r.config["exploration"] == p)
                                    for p in steps}}, indent=2))


if __name__ == "__main__":
    main()
