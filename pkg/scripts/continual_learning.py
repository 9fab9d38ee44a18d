"""Promote a novel reconstruction into the library and re-explore the same hidden object."""

import argparse
import json
from pathlib import Path

import numpy as np

from activetouch.harness import TrialConfig, promote_learned_prior, run_trial
from activetouch.objects import write_desk_manifest


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--object", default="mug_tall")
    ap.add_argument("--pre-trials", type=int, default=3)
    ap.add_argument("--post-trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/continual")
    args = ap.parse_args()
    out = Path(args.out)
    manifest = write_desk_manifest(out / "library.json")

    pre = [run_trial(TrialConfig(seed=args.seed + i, object_id=args.object, library=str(manifest),
                                 out_dir=str(out / "pre"))) for i in range(args.pre_trials)]
    donor = min((r for r in pre if r.mesh_path), key=lambda r: r.reconstruction_twd)
    name = f"learned_{args.object}"
    library = promote_learned_prior(donor, manifest, name)

    post_seeds = [args.seed + 100 + i for i in range(args.post_trials)]
    post = [run_trial(TrialConfig(seed=s, object_id=args.object, library=str(manifest), out_dir=str(out / "post")))
            for s in post_seeds]
    pre_mean = float(np.mean([r.terminated_at for r in pre]))
    post_mean = float(np.mean([r.terminated_at for r in post]))
    print(json.dumps({"classes": len(library), "donor_recon_twd": donor.reconstruction_twd,
                      "pre_steps": [r.terminated_at for r in pre], "post_steps": [r.terminated_at for r in post],
                      "ratio": post_mean / pre_mean,
                      "learned_fraction": float(np.mean([r.final_class == name for r in post])),
                      "post_pose_twd": [r.map_shape_twd for r in post]}, indent=2))


if __name__ == "__main__":
    main()
