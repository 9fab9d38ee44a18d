"""Novel variants: novelty flag rate, reconstruction error, and reconstruction vs MAP shape."""

import argparse
import json

from activetouch.harness import run_experiment
from activetouch.objects import NOVEL_SET


def flagged_novel(result, after: int = 20) -> bool:
    """Novel for a strict majority of the recorded steps after ``after``."""
    late = [r for r in result.records if r.step > after]
    return bool(late) and sum(not r.known for r in late) > len(late) / 2


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--objects", nargs="+", default=list(NOVEL_SET))
    ap.add_argument("--out", default="runs/novel")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    manifest = {"objects": args.objects, "trials": args.trials, "seed": args.seed}
    results, _ = run_experiment(manifest, args.out, args.jobs)
    rows = [{"trial": f"{r.truth_name}-s{r.config['seed']}", "steps": r.terminated_at, "flagged": flagged_novel(r),
             "recon_twd": r.reconstruction_twd, "map_twd": r.map_shape_twd, "failure": r.failure}
            for r in results]
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
