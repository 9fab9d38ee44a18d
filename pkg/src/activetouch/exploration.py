"""Target selection, contact enforcement, RRT fallback and the coverage stop rule."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .geometry import directed_hausdorff
from .gpis import SurfaceEstimate
from .measurement import Observation
from .simulator import WORKSPACE, Probe


class TargetOrigin(str, enum.Enum):
    GPIS_VARIANCE = "gpis_variance"
    MAP_DHD = "map_dhd"
    RRT_RANDOM = "rrt_random"


@dataclass(frozen=True)
class TargetPoint:
    x: np.ndarray
    origin: TargetOrigin
    index: int = -1
    score: float = 0.0


@dataclass
class StepOutcome:
    contact: Observation | None = None
    non_contact: Observation | None = None
    probe_path_length: float = 0.0
    phase: int = 0  # 1-3 contact enforcement phase, 4 = RRT

    def observations(self) -> list[Observation]:
        return [o for o in (self.contact, self.non_contact) if o is not None]


@dataclass(frozen=True)
class ExplorationLimits:
    max_penetration: float = 1.0
    march_step: float = 0.05
    tangent_step: float = 0.15
    walk_budget: float = 3.0
    rrt_step: float = 0.3
    rrt_attempts: int = 10
    min_new: float = 0.05  # a contact closer than this to an old one carries no new information
    approach_clearance: float = 1.0


class ExplorationStuck(RuntimeError):
    pass


def _as_points(P) -> np.ndarray:
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty point set")
    return P


def select_target_gpis(surface: SurfaceEstimate) -> TargetPoint:
    if surface.mesh.is_empty:
        raise ValueError("empty surface")
    i = int(np.argmax(surface.vertex_variance))  # first maximum = lowest index
    return TargetPoint(surface.vertices[i].copy(), TargetOrigin.GPIS_VARIANCE, i, float(surface.vertex_variance[i]))


def select_target_dhd(map_vertices, contacts) -> TargetPoint:
    V, C = _as_points(map_vertices), _as_points(contacts)
    d, _ = cKDTree(C).query(V)
    i = int(np.argmax(d))
    return TargetPoint(V[i].copy(), TargetOrigin.MAP_DHD, i, float(d[i]))


def should_terminate(est_vertices, contacts, eps: float) -> bool:
    return directed_hausdorff(_as_points(est_vertices), _as_points(contacts)) <= eps


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else None


def _is_new(x, contacts: np.ndarray, min_new: float) -> bool:
    return len(contacts) == 0 or float(np.min(np.linalg.norm(contacts - x, axis=1))) >= min_new


EstimatedShape = Callable[[np.ndarray], tuple[float, np.ndarray]]


def enforce_contact(target: TargetPoint, est_shape: EstimatedShape, probe: Probe, contacts,
                    limits: ExplorationLimits = ExplorationLimits(), t: int = 0,
                    rng: np.random.Generator | None = None) -> StepOutcome:
    """Turn a target on the estimated surface into exactly one contact (and at most one non-contact).

    1. Approach the target from outside along the estimated normal and keep
       marching inward along the estimated shape's negative gradient for up to
       ``max_penetration``.
    2. Otherwise register one non-contact at the target and head straight for
       the nearest known contact.
    3. Otherwise re-touch that contact and walk along the surface toward the
       target.  If the walk cannot advance, fall back to RRT.
    """
    C = _as_points(contacts)
    start_len = probe.path_length
    x = np.asarray(target.x, dtype=float)
    _, g = est_shape(x)
    n_out = _unit(g)
    if n_out is None:
        n_out = _unit(x - C.mean(axis=0))
    # phase 1
    hit = probe.approach(x, n_out, limits.approach_clearance) if n_out is not None else None
    p = x.copy()
    travelled = 0.0
    while hit is None and travelled < limits.max_penetration - 1e-12:
        _, g = est_shape(p)
        u = _unit(-np.asarray(g)) if g is not None else None
        if u is None:
            break
        h = min(limits.march_step, limits.max_penetration - travelled)
        hit = probe.ray(p, u, h)
        p = p + h * u
        travelled += h
    if hit is not None:
        return StepOutcome(Observation.contact(hit.x, hit.n, t), None, probe.path_length - start_len, 1)

    # phase 2
    miss = Observation.non_contact(x, t)
    nearest = C[int(np.argmin(np.linalg.norm(C - p, axis=1)))]
    u = _unit(nearest - p)
    if u is not None:
        hit = probe.ray(p, u, float(np.linalg.norm(nearest - p)) + 10 * probe.contact_tol)
        if hit is not None and _is_new(hit.x, C, limits.min_new):
            return StepOutcome(Observation.contact(hit.x, hit.n, t), miss, probe.path_length - start_len, 2)

    # phase 3: re-touch the contact nearest the target and walk toward the target
    c0 = C[int(np.argmin(np.linalg.norm(C - x, axis=1)))]
    hit, _ = probe.walk(c0, x, limits.tangent_step, limits.walk_budget)
    if _is_new(hit.x, C, limits.min_new):
        return StepOutcome(Observation.contact(hit.x, hit.n, t), miss, probe.path_length - start_len, 3)
    out = rrt_explore(C, probe, rng or np.random.default_rng(t), limits, t)
    out.non_contact = miss
    out.probe_path_length = probe.path_length - start_len
    return out


def rrt_explore(contacts, probe: Probe, rng: np.random.Generator, limits: ExplorationLimits = ExplorationLimits(),
                t: int = 0) -> StepOutcome:
    """Extend from the contact nearest a uniform workspace sample, heading toward it along the surface.

    One extension slides a fixed ``rrt_step`` from that contact; an extension
    that cannot move or lands on known data is redrawn.
    """
    C = _as_points(contacts)
    start_len = probe.path_length
    tree = cKDTree(C)
    for _ in range(limits.rrt_attempts):
        goal = rng.uniform(-WORKSPACE, WORKSPACE, 3)
        _, i = tree.query(goal)
        hit, walked = probe.slide(C[i], goal - C[i], limits.rrt_step, limits.tangent_step)
        if walked > 1e-3 and _is_new(hit.x, C, limits.min_new):
            return StepOutcome(Observation.contact(hit.x, hit.n, t), None, probe.path_length - start_len, 4)
    raise ExplorationStuck(f"no new contact after {limits.rrt_attempts} RRT attempts")
