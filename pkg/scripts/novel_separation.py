"""Estimate the smallest two-way Hausdorff distance between each novel variant and each
library shape over rigid poses (global rotation search + local refinement)."""

import argparse
import itertools
import json

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from activetouch.objects import DESK_SET, NOVEL_SET, build_model


def twd(A, B, ta=None, tb=None):
    ta = ta or cKDTree(A)
    tb = tb or cKDTree(B)
    return max(tb.query(A)[0].max(), ta.query(B)[0].max())


def pca_frames(X):
    _, V = np.linalg.eigh(np.cov((X - X.mean(0)).T))
    frames = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            R = V[:, perm] * np.array(signs)
            if np.linalg.det(R) > 0:
                frames.append(R)
    return frames


def min_twd(A, B, n_random=400, refine=8, seed=0):
    """Approximate min over rigid T of TWD(T(A), B)."""
    rng = np.random.default_rng(seed)
    ca, cb = A.mean(0), B.mean(0)
    tb = cKDTree(B)
    Fa, Fb = pca_frames(A), pca_frames(B)
    rots = [fb @ Fa[0].T for fb in Fb] + list(Rotation.random(n_random, random_state=rng.integers(1 << 31)).as_matrix())

    def cost(params):
        R = Rotation.from_rotvec(params[:3]).as_matrix()
        X = (A - ca) @ R.T + cb + params[3:]
        return twd(X, B, None, tb)

    starts = sorted(((cost(np.r_[Rotation.from_matrix(R).as_rotvec(), 0, 0, 0]),
                      np.r_[Rotation.from_matrix(R).as_rotvec(), 0, 0, 0]) for R in rots), key=lambda s: s[0])
    best = starts[0][0]
    for _, x0 in starts[:refine]:
        res = minimize(cost, x0, method="Nelder-Mead", options={"xatol": 1e-3, "fatol": 1e-4, "maxiter": 1500})
        best = min(best, res.fun)
    return float(best)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--samples", type=int, default=1500)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    lib = {n: build_model(n, resolution=64).surface_samples(args.samples) for n in DESK_SET}
    table = {}
    for nov in NOVEL_SET:
        A = build_model(nov, resolution=64).surface_samples(args.samples)
        table[nov] = {n: round(min_twd(A, B), 3) for n, B in lib.items()}
        print(nov, table[nov], "min", min(table[nov].values()), flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(table, fh, indent=2)


if __name__ == "__main__":
    main()
