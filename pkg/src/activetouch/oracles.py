"""Brute-force reference checks, runnable from the command line.

Each suite returns ``(name, max_error, tolerance)`` rows; a row passes when
``max_error <= tolerance``.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate

from .geometry import directed_hausdorff, two_way_hausdorff
from .gpis import thin_plate_blocks
from .measurement import NoiseParams, noncontact_log_likelihood
from .particle_filter import resample_sus

Row = tuple[str, float, float]


def hausdorff_suite(rng: np.random.Generator, trials: int = 20) -> list[Row]:
    worst = 0.0
    for _ in range(trials):
        A = rng.normal(size=(rng.integers(1, 300), 3))
        B = rng.normal(size=(rng.integers(1, 300), 3))
        D = np.sqrt(((A[:, None] - B[None]) ** 2).sum(-1))
        worst = max(worst, abs(directed_hausdorff(A, B) - D.min(1).max()),
                    abs(two_way_hausdorff(A, B) - max(D.min(1).max(), D.min(0).max())))
    return [("hausdorff vs brute force", worst, 0.0)]


def kernel_suite(rng: np.random.Generator, pairs: int = 200, a: float = 1.0, R: float = 12.0,
                 h: float = 1e-5) -> list[Row]:
    """Kernel derivative blocks against central differences of the scalar kernel."""
    def k(x, y):
        d = np.linalg.norm(x - y)
        return a * (2 * d**3 - 3 * R * d**2 + R**3) if d < R else 0.0

    worst = 0.0
    E = np.eye(3)
    for _ in range(pairs):
        x, y = rng.uniform(-4, 4, 3), rng.uniform(-4, 4, 3)
        B = thin_plate_blocks(x[None], y[None], a, R)[0, 0]
        gx = np.array([(k(x + h * e, y) - k(x - h * e, y)) / (2 * h) for e in E])
        gy = np.array([(k(x, y + h * e) - k(x, y - h * e)) / (2 * h) for e in E])
        H = np.array([[(k(x + h * ei, y + h * ej) - k(x + h * ei, y - h * ej)
                        - k(x - h * ei, y + h * ej) + k(x - h * ei, y - h * ej)) / (4 * h * h) for ej in E]
                      for ei in E])
        scale = max(1.0, np.abs(B).max())
        worst = max(worst, np.abs(B[1:, 0] - gx).max() / scale, np.abs(B[0, 1:] - gy).max() / scale,
                    np.abs(B[1:, 1:] - H).max() / scale)
    return [("thin-plate blocks vs central differences", worst, 1e-3)]


def noncontact_suite(rng: np.random.Generator, count: int = 50) -> list[Row]:
    noise = NoiseParams()
    worst = 0.0
    for f in rng.uniform(-2, 3, count):
        p, _ = integrate.quad(lambda s: np.exp(-0.5 * ((s - f) / noise.sigma_d) ** 2), 0, np.inf,
                              epsabs=1e-14, epsrel=1e-13)
        p /= noise.sigma_d * np.sqrt(2 * np.pi)
        worst = max(worst, abs(np.exp(noncontact_log_likelihood(f, noise)) - p))
    return [("non-contact likelihood vs tail integral", worst, 1e-9)]


def sus_suite(rng: np.random.Generator, seeds: int = 1000) -> list[Row]:
    missed = 0
    for s in range(seeds):
        r = np.random.default_rng(s)
        w = r.dirichlet(np.full(int(r.integers(2, 40)), 0.5))
        N = int(r.integers(1, 60))
        idx = resample_sus(w, N, r)
        counts = np.bincount(idx, minlength=len(w))
        missed += int(np.sum((counts < np.floor(w * N - 1e-12)) | ((w > 1 / N) & (counts == 0))))
    return [("SUS survival of heavy particles", float(missed), 0.0)]


SUITES = {"hausdorff": hausdorff_suite, "kernel": kernel_suite, "noncontact": noncontact_suite,
          "sus": sus_suite}


def run_suite(name: str, seed: int = 0) -> list[Row]:
    names = sorted(SUITES) if name == "all" else [name]
    rows: list[Row] = []
    for n in names:
        if n not in SUITES:
            raise KeyError(f"unknown oracle suite {n!r}; choose from {sorted(SUITES)} or 'all'")
        rows += SUITES[n](np.random.default_rng(seed))
    return rows
