"""Particle filter over (class, pose) with point-pair-feature proposals.

Particles are stored struct-of-arrays.  Copies produced by resampling share a
``hyp_id``; the MAP hypothesis is the one with the largest summed weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .geometry import OrientedPoint, Pose
from .measurement import NoiseParams, Observation, ObservationBatch, score_poses
from .ppf import axis_angle, align_pairs, discretize, neighbor_keys, pack_bins, ppf_arrays, rotation_between
from .sdf import ObjectModel

LOG_KNOWN_CONTACT = np.log(0.90)
LOG_KNOWN_FREE = np.log(0.50)


@dataclass
class Particle:
    class_id: int
    pose: Pose
    log_w: float
    log_evidence: float


@dataclass
class ParticleSet:
    class_id: np.ndarray  # (P,)
    R: np.ndarray  # (P, 3, 3)
    t: np.ndarray  # (P, 3)
    log_w: np.ndarray
    log_evidence: np.ndarray
    hyp_id: np.ndarray
    exact: np.ndarray  # log_evidence is a full rescore (not a proposal estimate)

    def __len__(self):
        return len(self.class_id)

    @classmethod
    def empty(cls) -> "ParticleSet":
        return cls(np.zeros(0, np.int64), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros(0), np.zeros(0, np.int64), np.zeros(0, bool))

    def take(self, idx) -> "ParticleSet":
        idx = np.asarray(idx, dtype=np.int64)
        return ParticleSet(self.class_id[idx], self.R[idx], self.t[idx], self.log_w[idx],
                           self.log_evidence[idx], self.hyp_id[idx], self.exact[idx])

    def concat(self, other: "ParticleSet") -> "ParticleSet":
        return ParticleSet(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in
                             ("class_id", "R", "t", "log_w", "log_evidence", "hyp_id", "exact")))

    def normalized_log_weights(self) -> np.ndarray:
        return self.log_w - logsumexp(self.log_w)

    def particle(self, i: int) -> Particle:
        return Particle(int(self.class_id[i]), Pose.from_matrix(self.R[i], self.t[i]),
                        float(self.log_w[i]), float(self.log_evidence[i]))

    def particles(self) -> list[Particle]:
        return [self.particle(i) for i in range(len(self))]


# ---------------------------------------------------------------------------
# scoring


def score_set(ps: ParticleSet, library: dict[int, ObjectModel], batch: ObservationBatch,
              noise: NoiseParams) -> np.ndarray:
    out = np.zeros(len(ps))
    for c in np.unique(ps.class_id):
        sel = np.flatnonzero(ps.class_id == c)
        out[sel] = score_poses(library[int(c)], ps.R[sel], ps.t[sel], batch, noise)
    return out


def update_weights(ps: ParticleSet, new_obs: list[Observation], library: dict[int, ObjectModel],
                   noise: NoiseParams) -> bool:
    """Add the log-likelihood of ``new_obs`` to every particle, then normalize.

    Returns False when the filter is degenerate (no finite weight remains).
    """
    if len(ps) == 0:
        return False
    if new_obs:
        s = score_set(ps, library, ObservationBatch.from_observations(new_obs), noise)
        ps.log_w += s
        ps.log_evidence += s
    finite = np.isfinite(ps.log_w)
    if not finite.any():
        return False
    ps.log_w = np.where(finite, ps.log_w, -np.inf)
    ps.log_w -= logsumexp(ps.log_w[finite])
    return True


# ---------------------------------------------------------------------------
# initialization


def init_particles(first_contact: OrientedPoint, library: dict[int, ObjectModel], n_azimuth: int = 12,
                   noise: NoiseParams | None = None) -> ParticleSet:
    """One particle per (class, feature point, azimuth bin) mapping the feature onto the contact."""
    cls_, Rs, ts = [], [], []
    spins = axis_angle(np.tile(first_contact.n, (n_azimuth, 1)), 2 * np.pi * np.arange(n_azimuth) / n_azimuth)
    for cid in sorted(library):
        m = library[cid]
        Ra = rotation_between(m.feature_n, np.tile(first_contact.n, (len(m.feature_n), 1)))
        R = np.einsum("bij,fjk->fbik", spins, Ra).reshape(-1, 3, 3)
        x = np.repeat(m.feature_x, n_azimuth, axis=0)
        Rs.append(R)
        ts.append(first_contact.x - np.einsum("kij,kj->ki", R, x))
        cls_.append(np.full(len(R), cid, dtype=np.int64))
    P = sum(len(c) for c in cls_)
    ps = ParticleSet(np.concatenate(cls_), np.concatenate(Rs), np.concatenate(ts), np.full(P, -np.log(P)),
                     np.zeros(P), np.arange(P, dtype=np.int64), np.ones(P, bool))
    if noise is not None:
        ps.log_evidence = score_set(ps, library, ObservationBatch.from_observations(
            [Observation.contact(first_contact.x, first_contact.n)]), noise)
    return ps


# ---------------------------------------------------------------------------
# resampling, anchors, MAP, decisions


def resample_sus(weights, N: int, rng: np.random.Generator) -> np.ndarray:
    """Stochastic universal sampling: indices of N survivors from one uniform offset."""
    if N <= 0:
        raise ValueError("N must be positive")
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be normalized")
    c = np.cumsum(w)
    c[-1] = 1.0
    pointers = (rng.random() + np.arange(N)) / N
    return np.minimum(np.searchsorted(c, pointers, side="right"), len(w) - 1)


def select_anchor_subset(prev_contacts: list, new_contact, n_s: int) -> list:
    """Spread-out subset of previous contacts: heads of n_s equal distance-sorted segments."""
    if len(prev_contacts) <= n_s:
        return list(prev_contacts)
    d = np.array([np.linalg.norm(o.x - new_contact.x) for o in prev_contacts])
    order = np.argsort(d, kind="stable")
    return [prev_contacts[seg[0]] for seg in np.array_split(order, n_s)]


def _map_index(class_id, log_w, hyp_id) -> int:
    w = np.exp(log_w - logsumexp(log_w))
    uniq, first, inv = np.unique(hyp_id, return_index=True, return_inverse=True)
    total = np.bincount(inv.ravel(), weights=w)
    best = np.lexsort((first, class_id[first], -total))[0]
    return int(first[best])


def map_particle(particles) -> Particle:
    """Highest-weight particle; ties go to the lower class_id, then the earlier particle."""
    if isinstance(particles, ParticleSet):
        if len(particles) == 0:
            raise ValueError("empty particle set")
        return particles.particle(_map_index(particles.class_id, particles.log_w, particles.hyp_id))
    particles = list(particles)
    if not particles:
        raise ValueError("empty particle set")
    lw = np.array([p.log_w for p in particles])
    cid = np.array([p.class_id for p in particles])
    return particles[_map_index(cid, lw, np.arange(len(particles)))]


def known_threshold(n_pos: int, n_neg: int) -> float:
    return n_pos * LOG_KNOWN_CONTACT + n_neg * LOG_KNOWN_FREE


def is_known(map_log_evidence: float, n_pos: int, n_neg: int) -> bool:
    return bool(map_log_evidence >= known_threshold(n_pos, n_neg))


def proposal_trigger(map_log_evidence: float, n_pos: int, n_neg: int, lam: float) -> bool:
    n = n_pos + n_neg
    if n == 0:
        return False
    return bool(map_log_evidence / n < np.log(lam))


# ---------------------------------------------------------------------------
# proposals


@dataclass
class ProposalStats:
    keys_queried: int = 0
    candidates: int = 0
    full_evaluations: int = 0
    appended: int = 0


def observed_pair_keys(new_contact: Observation, anchors: list[Observation]):
    """Both orderings of (new, anchor) pairs: packed keys and endpoint arrays."""
    ax = np.array([a.x for a in anchors]).reshape(-1, 3)
    an = np.array([a.n for a in anchors]).reshape(-1, 3)
    nx = np.broadcast_to(new_contact.x, ax.shape)
    nn = np.broadcast_to(new_contact.n, an.shape)
    first_x, first_n = np.concatenate([nx, ax]), np.concatenate([nn, an])
    second_x, second_n = np.concatenate([ax, nx]), np.concatenate([an, nn])
    keep = np.linalg.norm(second_x - first_x, axis=1) > 1e-9
    first_x, first_n, second_x, second_n = first_x[keep], first_n[keep], second_x[keep], second_n[keep]
    keys = pack_bins(*discretize(*ppf_arrays(first_x, first_n, second_x, second_n)))
    return keys, first_x, first_n, second_x


def propose_particles(new_contact: Observation, anchors: list[Observation], new_obs: list[Observation],
                      all_obs: list[Observation], table, library: dict[int, ObjectModel], map_log_evidence: float,
                      log_w_map: float, noise: NoiseParams, rng: np.random.Generator | None = None,
                      max_candidates: int = 6000, max_append: int = 3000, neighbors: bool = True,
                      stats: ProposalStats | None = None) -> ParticleSet:
    """Candidate particles from PPF matches, weighted relative to the current MAP.

    log w' = [l_s(cand) - l_s(best_c)] + [l_all(best_c) - l_all(map)] + log w_map, where l_s
    is the log-likelihood on the anchor contacts plus this step's observations and
    best_c is the best candidate of the candidate's class.
    """
    stats = ProposalStats() if stats is None else stats
    if not anchors:
        return ParticleSet.empty()
    keys, o1x, o1n, o2x = observed_pair_keys(new_contact, anchors)
    stats.keys_queried = len(keys)
    query = neighbor_keys(keys) if neighbors else keys[:, None]
    hits = [table.lookup(row) for row in query]
    pair_idx = np.concatenate([np.full(len(h), k) for k, h in enumerate(hits)]).astype(np.int64)
    entry = np.concatenate(hits).astype(np.int64)
    if len(entry) == 0:
        return ParticleSet.empty()
    if len(entry) > max_candidates:
        rng = np.random.default_rng(0) if rng is None else rng
        pick = np.sort(rng.choice(len(entry), size=max_candidates, replace=False))
        entry, pair_idx = entry[pick], pair_idx[pick]

    cls_ = table.class_id[entry]
    Rs = np.zeros((len(entry), 3, 3))
    ts = np.zeros((len(entry), 3))
    valid = np.zeros(len(entry), bool)
    for c in np.unique(cls_):
        sel = np.flatnonzero(cls_ == c)
        m = library[int(c)]
        i, j = table.i[entry[sel]], table.j[entry[sel]]
        p = pair_idx[sel]
        R, t, ok = align_pairs(m.feature_x[i], m.feature_n[i], m.feature_x[j], o1x[p], o1n[p], o2x[p])
        Rs[sel], ts[sel], valid[sel] = R, t, ok
    cls_, Rs, ts = cls_[valid], Rs[valid], ts[valid]
    stats.candidates = len(cls_)
    if len(cls_) == 0:
        return ParticleSet.empty()

    anchor_batch = ObservationBatch.from_observations(list(anchors) + list(new_obs))
    all_batch = ObservationBatch.from_observations(all_obs)
    ls = np.zeros(len(cls_))
    log_w = np.full(len(cls_), -np.inf)
    log_ev = np.zeros(len(cls_))
    exact = np.zeros(len(cls_), bool)
    for c in np.unique(cls_):
        sel = np.flatnonzero(cls_ == c)
        m = library[int(c)]
        ls[sel] = score_poses(m, Rs[sel], ts[sel], anchor_batch, noise)
        b = sel[np.argmax(ls[sel])]
        l_all_best = float(score_poses(m, Rs[b:b + 1], ts[b:b + 1], all_batch, noise)[0])
        stats.full_evaluations += 1
        log_w[sel] = ls[sel] - ls[b] + l_all_best - map_log_evidence + log_w_map
        log_ev[sel] = ls[sel] - ls[b] + l_all_best
        log_ev[b] = l_all_best
        exact[b] = True

    keep = np.flatnonzero(np.isfinite(log_w))
    if len(keep) > max_append:
        keep = keep[np.argsort(-log_w[keep], kind="stable")[:max_append]]
        keep.sort()
    stats.appended = len(keep)
    return ParticleSet(cls_[keep], Rs[keep], ts[keep], log_w[keep], log_ev[keep],
                       np.zeros(len(keep), np.int64), exact[keep])


# ---------------------------------------------------------------------------
# the filter


@dataclass
class PfConfig:
    n_particles: int = 2000
    n_azimuth: int = 12
    n_s: int = 30
    lam: float = 0.97
    max_candidates: int = 6000
    max_append: int = 3000
    neighbor_bins: bool = True


@dataclass
class StepReport:
    map: Particle
    map_log_evidence: float
    n_pos: int
    n_neg: int
    known: bool
    triggered: bool
    degenerate: bool
    particle_count: int
    proposals: ProposalStats = field(default_factory=ProposalStats)

    @property
    def evidence_per_point(self) -> float:
        n = self.n_pos + self.n_neg
        return self.map_log_evidence / n if n else 0.0


class ParticleFilter:
    """Recursive (class, pose) estimator; owns its particle set and observation history."""

    def __init__(self, library: dict[int, ObjectModel], table, noise: NoiseParams | None = None,
                 config: PfConfig | None = None, rng: np.random.Generator | None = None):
        self.library = library
        self.table = table
        self.noise = noise or NoiseParams()
        self.config = config or PfConfig()
        self.rng = rng or np.random.default_rng(0)
        self.observations: list[Observation] = []
        self.particles = ParticleSet.empty()
        self._next_hyp = 0
        self._force_proposals = False
        self.init_particle_count = 0
        self.last_map: Particle | None = None

    @property
    def contacts(self) -> list[Observation]:
        return [o for o in self.observations if o.is_contact]

    @property
    def n_pos(self) -> int:
        return sum(o.is_contact for o in self.observations)

    @property
    def n_neg(self) -> int:
        return len(self.observations) - self.n_pos

    def _new_hyp_ids(self, n: int) -> np.ndarray:
        ids = np.arange(self._next_hyp, self._next_hyp + n, dtype=np.int64)
        self._next_hyp += n
        return ids

    def initialize(self, first: Observation) -> StepReport:
        if not first.is_contact:
            raise ValueError("initialization needs a contact")
        self.observations = [first]
        self.particles = init_particles(OrientedPoint(first.x, first.n), self.library,
                                        self.config.n_azimuth, self.noise)
        self.particles.hyp_id = self._new_hyp_ids(len(self.particles))
        self.init_particle_count = len(self.particles)
        return self._report(triggered=False, degenerate=False)

    def _exact_evidence(self, i: int) -> float:
        ps = self.particles
        if not ps.exact[i]:
            batch = ObservationBatch.from_observations(self.observations)
            ev = float(score_poses(self.library[int(ps.class_id[i])], ps.R[i:i + 1], ps.t[i:i + 1],
                                   batch, self.noise)[0])
            same = ps.hyp_id == ps.hyp_id[i]
            ps.log_evidence[same] = ev
            ps.exact[same] = True
        return float(ps.log_evidence[i])

    def _map(self) -> tuple[int, float, float]:
        ps = self.particles
        i = _map_index(ps.class_id, ps.log_w, ps.hyp_id)
        lw = ps.normalized_log_weights()
        group = logsumexp(lw[ps.hyp_id == ps.hyp_id[i]])
        return i, self._exact_evidence(i), float(group)

    def _report(self, triggered: bool, degenerate: bool, stats: ProposalStats | None = None) -> StepReport:
        i, ev, _ = self._map()
        self.last_map = self.particles.particle(i)
        n_pos, n_neg = self.n_pos, self.n_neg
        return StepReport(self.last_map, ev, n_pos, n_neg, is_known(ev, n_pos, n_neg), triggered,
                          degenerate, len(self.particles), stats or ProposalStats())

    def step(self, new_obs: list[Observation]) -> StepReport:
        cfg = self.config
        for o in new_obs:
            if o.is_contact and o.n is None:
                raise ValueError("contact without normal")
        self.observations.extend(new_obs)
        ok = update_weights(self.particles, new_obs, self.library, self.noise)
        degenerate = not ok
        if degenerate:
            # keep the previous MAP alive and force proposals
            self.particles.log_w = np.full(len(self.particles), -np.log(len(self.particles)))
            self._force_proposals = True

        idx = resample_sus(np.exp(self.particles.normalized_log_weights()), cfg.n_particles, self.rng)
        self.particles = self.particles.take(idx)
        self.particles.log_w = np.full(len(idx), -np.log(len(idx)))

        i, ev, log_w_map = self._map()
        n_pos, n_neg = self.n_pos, self.n_neg
        triggered = self._force_proposals or proposal_trigger(ev, n_pos, n_neg, cfg.lam)
        stats = ProposalStats()
        new_contacts = [o for o in new_obs if o.is_contact]
        if triggered and new_contacts:
            new_c = new_contacts[-1]
            prev = [o for o in self.contacts if o is not new_c]
            anchors = select_anchor_subset(prev, new_c, cfg.n_s)
            extra = propose_particles(new_c, anchors, new_obs, self.observations, self.table, self.library, ev,
                                      log_w_map, self.noise, self.rng, cfg.max_candidates, cfg.max_append,
                                      cfg.neighbor_bins, stats)
            if len(extra):
                extra.hyp_id = self._new_hyp_ids(len(extra))
                self.particles = self.particles.concat(extra)
            self._force_proposals = False
        return self._report(triggered, degenerate, stats)
