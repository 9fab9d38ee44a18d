"""Gaussian process implicit surface with gradient observations.

Each training contact contributes four targets: signed distance 0 and the
three components of the observed normal.  The GP models the residual between
those targets and a prior mean taken from a posed signed distance field
(value and raw gradient), with the compactly supported thin-plate kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh, solve_triangular
from scipy.spatial.distance import cdist

from .geometry import OrientedPoint, Pose, TriangleMesh, marching_cubes
from .sdf import ObjectModel, sdf_eval, sdf_gradient

A_MIN, A_MAX = 1e-3, 1e3
JITTERS = (0.0, 1e-8, 1e-6, 1e-4)


def thin_plate_blocks(X, Y, a: float, R: float) -> np.ndarray:
    """Covariance blocks between (f, grad f) at X (n,3) and at Y (m,3): shape (n, m, 4, 4).

    k = a(2d^3 - 3Rd^2 + R^3), truncated to zero for d >= R.  Block entries are
    [[k, dk/dy], [dk/dx, d2k/dx dy]].
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    diff = X[:, None, :] - Y[None, :, :]
    d = np.linalg.norm(diff, axis=-1)
    inside = d < R
    dm = np.where(inside, d, R)
    out = np.zeros(d.shape + (4, 4))
    out[..., 0, 0] = a * (2 * dm**3 - 3 * R * dm**2 + R**3)
    g = 6 * a * diff * (dm - R)[..., None]  # dk/dx
    out[..., 1:, 0] = g
    out[..., 0, 1:] = -g
    safe = np.where(d > 0, d, 1.0)
    outer = diff[..., :, None] * diff[..., None, :] / safe[..., None, None]
    out[..., 1:, 1:] = -6 * a * (outer + (dm - R)[..., None, None] * np.eye(3))
    out[~inside] = 0.0
    return out


def thin_plate_block(x, xp, a: float, R: float) -> np.ndarray:
    return thin_plate_blocks(np.reshape(x, (1, 3)), np.reshape(xp, (1, 3)), a, R)[0, 0]


def kernel_matrix(X, a: float, R: float) -> np.ndarray:
    B = thin_plate_blocks(X, X, a, R)
    n = len(X)
    return B.transpose(0, 2, 1, 3).reshape(4 * n, 4 * n)


def _first_row_parts(Xq, X, a: float, R: float):
    """k(xq, x) and the scalar c with dk/dx' = c * (xq - x), both (m, N), zero beyond R."""
    d = cdist(Xq, X)
    inside = d < R
    dm = np.where(inside, d, R)
    k = np.where(inside, a * (2 * dm**3 - 3 * R * dm**2 + R**3), 0.0)
    c = np.where(inside, -6 * a * (dm - R), 0.0)
    return k, c


def _first_rows(Xq, X, a: float, R: float) -> np.ndarray:
    """Cross-covariance between f(Xq) and all training targets: (m, 4N)."""
    k, c = _first_row_parts(Xq, X, a, R)
    diff = Xq[:, None, :] - X[None, :, :]
    return np.concatenate([k[..., None], c[..., None] * diff], axis=-1).reshape(len(Xq), -1)


def prior_mean(prior: tuple[ObjectModel, Pose], X) -> np.ndarray:
    """(m, 4) prior value and raw world-frame gradient of the posed prior field."""
    model, pose = prior
    X = np.atleast_2d(X)
    return np.column_stack([sdf_eval(model, pose, X), sdf_gradient(model, pose, X)])


def farthest_point_subset(X, k: int) -> np.ndarray:
    """Indices of a greedy farthest-point subset starting from the first point."""
    X = np.asarray(X)
    if len(X) <= k:
        return np.arange(len(X))
    chosen = [0]
    dist = np.linalg.norm(X - X[0], axis=1)
    for _ in range(k - 1):
        i = int(np.argmax(dist))
        chosen.append(i)
        dist = np.minimum(dist, np.linalg.norm(X - X[i], axis=1))
    return np.sort(np.array(chosen))


@dataclass
class GpisModel:
    train_x: np.ndarray
    train_n: np.ndarray
    prior: tuple[ObjectModel, Pose]
    a: float
    R: float
    sigma: float
    residual: np.ndarray  # (4N,)
    chol: tuple | None = None
    alpha: np.ndarray | None = None
    jitter: float = 0.0

    @property
    def prior_variance(self) -> float:
        return self.a * self.R**3

    def factorize(self) -> "GpisModel":
        K = kernel_matrix(self.train_x, self.a, self.R)
        n = len(K)
        last = None
        for j in JITTERS:
            try:
                C = K + (self.sigma**2 + j * self.prior_variance) * np.eye(n)
                self.chol = cho_factor(C, lower=True)
                self.jitter = j
                self.alpha = cho_solve(self.chol, self.residual)
                return self
            except LinAlgError as exc:
                last = exc
        raise LinAlgError(f"kernel matrix not positive definite even with jitter {JITTERS[-1]}: {last}")

    @property
    def noise_variance(self) -> float:
        return self.sigma**2 + self.jitter * self.prior_variance


def gpis_fit(contacts: list[OrientedPoint], prior: tuple[ObjectModel, Pose], a0: float = 1.0, R: float = 12.0,
             sigma: float = 1e-4, max_train: int = 400) -> GpisModel:
    if not contacts:
        raise ValueError("GPIS needs at least one contact")
    X = np.array([c.x for c in contacts])
    N = np.array([c.n for c in contacts])
    keep = farthest_point_subset(X, max_train)
    X, N = X[keep], N[keep]
    targets = np.column_stack([np.zeros(len(X)), N])
    residual = (targets - prior_mean(prior, X)).ravel()
    a = float(np.clip(a0, A_MIN, A_MAX))
    return GpisModel(X, N, prior, a, R, sigma, residual).factorize()


def gpis_predict(model: GpisModel, xq) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean (m, 4) and signed-distance variance (m,) at query points."""
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    B = thin_plate_blocks(xq, model.train_x, model.a, model.R)  # (m, N, 4, 4)
    Kq = B.transpose(0, 2, 1, 3).reshape(len(xq), 4, -1)
    mean = prior_mean(model.prior, xq) + Kq @ model.alpha
    var = _variance_from_rows(model, Kq[:, 0, :])
    return mean, var


def _variance_from_rows(model: GpisModel, rows: np.ndarray) -> np.ndarray:
    L = np.tril(model.chol[0])
    v = solve_triangular(L, rows.T, lower=True)
    return np.maximum(model.prior_variance - (v * v).sum(axis=0), 0.0)


def posterior_sdf(model: GpisModel, xq, chunk: int = 4096) -> np.ndarray:
    """Posterior mean of the signed-distance component only (memory-bounded)."""
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    out = sdf_eval(model.prior[0], model.prior[1], xq)
    al = model.alpha.reshape(-1, 4)
    X = model.train_x
    yal = (X * al[:, 1:]).sum(axis=1)
    for s in range(0, len(xq), chunk):
        q = xq[s:s + chunk]
        k, c = _first_row_parts(q, X, model.a, model.R)
        # sum_j c * (q_j - x_j) * alpha_j without forming the (m, N, 3) tensor
        out[s:s + chunk] += k @ al[:, 0] + (q * (c @ al[:, 1:])).sum(axis=1) - c @ yal
    return out


def posterior_variance(model: GpisModel, xq, chunk: int = 2048) -> np.ndarray:
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    out = np.empty(len(xq))
    for s in range(0, len(xq), chunk):
        out[s:s + chunk] = _variance_from_rows(model, _first_rows(xq[s:s + chunk], model.train_x, model.a, model.R))
    return out


def _log_ml_terms(lam, proj2, a, s):
    c = np.maximum(a * lam + s, 1e-300)
    ll = -0.5 * np.sum(proj2 / c) - 0.5 * np.sum(np.log(c)) - 0.5 * len(lam) * np.log(2 * np.pi)
    grad = 0.5 * np.sum(proj2 * a * lam / c**2 - a * lam / c)  # d ll / d log a
    return ll, grad


def log_marginal_likelihood(model: GpisModel) -> float:
    L = np.tril(model.chol[0])
    return float(-0.5 * model.residual @ model.alpha - np.log(np.diag(L)).sum()
                 - 0.5 * len(model.residual) * np.log(2 * np.pi))


def optimize_kernel_scale(model: GpisModel, iters: int = 25, step: float = 0.1) -> float:
    """Ascend the residual log marginal likelihood in log(a); refactorizes the model.

    Uses one eigendecomposition of the unit-scale kernel so each iterate is
    O(n).  The step doubles after an accepted move and halves after a rejected one.
    """
    K1 = kernel_matrix(model.train_x, 1.0, model.R)
    lam, Q = eigh(K1)
    lam = np.maximum(lam, 0.0)
    proj2 = (Q.T @ model.residual) ** 2
    s = model.noise_variance
    la = np.log(model.a)
    ll, g = _log_ml_terms(lam, proj2, np.exp(la), s)
    if not (np.isfinite(ll) and np.isfinite(g)):
        return model.a
    for _ in range(iters):
        if g == 0:
            break
        cand = float(np.clip(la + step * np.sign(g), np.log(A_MIN), np.log(A_MAX)))
        if cand == la:
            break
        ll_c, g_c = _log_ml_terms(lam, proj2, np.exp(cand), s)
        if np.isfinite(ll_c) and ll_c > ll:
            la, ll, g = cand, ll_c, g_c
            step *= 2
        else:
            step *= 0.5
    model.a = float(np.clip(np.exp(la), A_MIN, A_MAX))
    model.factorize()
    return model.a


def gp_prior_fitness_log(contacts: list[OrientedPoint], prior: tuple[ObjectModel, Pose], a: float = 1.0,
                         R: float = 12.0, sigma: float = 1e-4) -> float:
    return log_marginal_likelihood(gpis_fit(contacts, prior, a, R, sigma))


@dataclass
class SurfaceEstimate:
    mesh: TriangleMesh
    vertex_variance: np.ndarray

    @property
    def vertices(self) -> np.ndarray:
        return self.mesh.vertices


class ReconstructionCollapse(RuntimeError):
    pass


def extract_surface(model: GpisModel, lower, upper, cell: float) -> SurfaceEstimate:
    """Marching cubes on the posterior signed distance over a box; closed at the box faces."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    res = np.maximum(np.ceil((upper - lower) / cell).astype(int) + 1, 2)
    upper = lower + (res - 1) * cell
    axes = [np.linspace(lower[k], upper[k], res[k]) for k in range(3)]
    G = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = posterior_sdf(model, G).reshape(tuple(res))
    # a positive shell keeps the level set closed where it meets the box
    vol = np.pad(vol, 1, constant_values=max(cell, float(np.abs(vol).max())))
    mesh = marching_cubes(vol, lower - cell, upper + cell, vol.shape)
    if mesh.is_empty:
        raise ReconstructionCollapse("posterior mean has no zero crossing")
    return SurfaceEstimate(mesh, posterior_variance(model, mesh.vertices))
