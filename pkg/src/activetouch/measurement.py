"""Tactile observation model, evaluated in log space.

Contact likelihoods are normalized so an exact prediction scores 0; the
normalization constant cancels in every weight ratio and is exactly the
reference the known/novel test compares against.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr

from .geometry import Pose, inverse_transform
from .sdf import ObjectModel, normalize_gradient


class Kind(str, enum.Enum):
    CONTACT = "contact"
    NON_CONTACT = "non_contact"


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    kind: Kind
    n: np.ndarray | None = None
    t: int = 0
    d_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(3))
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.CONTACT:
            if self.n is None:
                raise ValueError("a contact observation needs a normal")
            n = np.asarray(self.n, dtype=float).reshape(3)
            object.__setattr__(self, "n", n / np.linalg.norm(n))
            object.__setattr__(self, "d_s", 0.0)
        elif self.n is not None:
            raise ValueError("a non-contact observation carries no normal")

    @property
    def is_contact(self) -> bool:
        return self.kind is Kind.CONTACT

    @classmethod
    def contact(cls, x, n, t: int = 0) -> "Observation":
        return cls(x, Kind.CONTACT, n, t)

    @classmethod
    def non_contact(cls, x, t: int = 0) -> "Observation":
        return cls(x, Kind.NON_CONTACT, None, t)

    def to_dict(self) -> dict:
        d = {"x": [float(v) for v in self.x], "kind": self.kind.value, "t": self.t}
        if self.n is not None:
            d["n"] = [float(v) for v in self.n]
        return d


@dataclass(frozen=True)
class NoiseParams:
    sigma_d: float = 0.50
    sigma_n: float = 1.50

    def __post_init__(self):
        if self.sigma_d <= 0 or self.sigma_n <= 0:
            raise ValueError("noise parameters must be positive")


def contact_log_likelihood_array(pred_d, pred_n, obs_n, noise: NoiseParams):
    pred_d = np.asarray(pred_d, dtype=float)
    dn = np.asarray(pred_n, dtype=float) - np.asarray(obs_n, dtype=float)
    return -(pred_d ** 2 / (2 * noise.sigma_d ** 2) + (dn * dn).sum(axis=-1) / (2 * noise.sigma_n ** 2))


def noncontact_log_likelihood(pred_d, noise: NoiseParams):
    """log P(d_s > 0) = log(0.5 * (1 - erf(-f / (sqrt(2) sigma_d))))."""
    out = log_ndtr(np.asarray(pred_d, dtype=float) / noise.sigma_d)
    return float(out) if np.ndim(out) == 0 else out


def contact_log_likelihood(obs: Observation, pred_d: float, pred_n, noise: NoiseParams) -> float:
    if not obs.is_contact:
        raise ValueError("contact likelihood requested for a non-contact observation")
    return float(contact_log_likelihood_array(pred_d - obs.d_s, pred_n, obs.n, noise))


def observation_log_likelihood(obs: Observation, model: ObjectModel, pose: Pose, noise: NoiseParams) -> float:
    y = inverse_transform(pose, obs.x[None, :])
    if not obs.is_contact:
        return float(noncontact_log_likelihood(model.field.evaluate(y), noise)[0])
    d, g = model.field.evaluate_with_gradient(y)
    n, _ = normalize_gradient(g @ pose.rotation.T)
    return contact_log_likelihood(obs, float(d[0]), n[0], noise)


@dataclass
class ObservationBatch:
    """Struct-of-arrays view of observations for vectorized scoring."""

    contact_x: np.ndarray
    contact_n: np.ndarray
    free_x: np.ndarray

    @classmethod
    def from_observations(cls, obs: list[Observation]) -> "ObservationBatch":
        cx = np.array([o.x for o in obs if o.is_contact]).reshape(-1, 3)
        cn = np.array([o.n for o in obs if o.is_contact]).reshape(-1, 3)
        fx = np.array([o.x for o in obs if not o.is_contact]).reshape(-1, 3)
        return cls(cx, cn, fx)

    def __len__(self):
        return len(self.contact_x) + len(self.free_x)


def score_poses(model: ObjectModel, R: np.ndarray, t: np.ndarray, batch: ObservationBatch,
                noise: NoiseParams, chunk: int = 400_000) -> np.ndarray:
    """Summed log-likelihood of ``batch`` for P poses (R: (P,3,3), t: (P,3)) of one model."""
    P = len(R)
    total = np.zeros(P)
    if P == 0 or len(batch) == 0:
        return total
    per = max(1, chunk // max(len(batch), 1))
    for s in range(0, P, per):
        Rs, ts = R[s:s + per], t[s:s + per]
        acc = np.zeros(len(Rs))
        if len(batch.contact_x):
            # canonical coordinates: R^T (x - t)
            y = np.einsum("pji,pcj->pci", Rs, batch.contact_x[None, :, :] - ts[:, None, :])
            d, g = model.field.evaluate_with_gradient(y.reshape(-1, 3))
            g = np.einsum("pij,pcj->pci", Rs, g.reshape(len(Rs), -1, 3))
            n, _ = normalize_gradient(g)
            ll = contact_log_likelihood_array(d.reshape(len(Rs), -1), n, batch.contact_n[None], noise)
            acc += ll.sum(axis=1)
        if len(batch.free_x):
            y = np.einsum("pji,pcj->pci", Rs, batch.free_x[None, :, :] - ts[:, None, :])
            d = model.field.evaluate(y.reshape(-1, 3)).reshape(len(Rs), -1)
            acc += noncontact_log_likelihood(d, noise).sum(axis=1)
        total[s:s + per] = acc
    return total
