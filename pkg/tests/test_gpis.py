import mpmath
import numpy as np
import pytest

from activetouch.geometry import OrientedPoint, Pose, two_way_hausdorff
from activetouch.gpis import (A_MAX, A_MIN, GpisModel, extract_surface, gp_prior_fitness_log, gpis_fit, gpis_predict,
                              kernel_matrix, log_marginal_likelihood, optimize_kernel_scale, posterior_sdf,
                              posterior_variance, prior_mean, thin_plate_block)
from activetouch.sdf import make_object_model, primitive_grid


def mp_kernel(a, R):
    def k(x0, x1, x2, y0, y1, y2):
        d = mpmath.sqrt((x0 - y0) ** 2 + (x1 - y1) ** 2 + (x2 - y2) ** 2)
        return a * (2 * d**3 - 3 * R * d**2 + R**3)
    return k


def fd_block(x, y, a, R):
    """All 4x4 covariance entries by high-precision numerical differentiation."""
    k = mp_kernel(a, R)
    args = [mpmath.mpf(v) for v in (*x, *y)]
    out = np.zeros((4, 4))
    with mpmath.workdps(30):
        out[0, 0] = float(k(*args))
        for i in range(3):
            o = [0] * 6
            o[i] = 1
            out[1 + i, 0] = float(mpmath.diff(k, args, tuple(o)))
            o = [0] * 6
            o[3 + i] = 1
            out[0, 1 + i] = float(mpmath.diff(k, args, tuple(o)))
            for j in range(3):
                o = [0] * 6
                o[i] = 1
                o[3 + j] = 1
                out[1 + i, 1 + j] = float(mpmath.diff(k, args, tuple(o)))
    return out


def test_kernel_limits():
    a, R = 1.7, 3.0
    B = thin_plate_block(np.zeros(3), np.zeros(3), a, R)
    assert B[0, 0] == pytest.approx(a * R**3)
    assert np.allclose(B[0, 1:], 0) and np.allclose(B[1:, 0], 0)
    assert np.allclose(B[1:, 1:], 6 * a * R * np.eye(3))
    assert np.allclose(thin_plate_block(np.zeros(3), [R, 0, 0], a, R), 0.0)
    assert np.allclose(thin_plate_block(np.zeros(3), [R + 1, 0, 0], a, R), 0.0)


def test_kernel_blocks_vs_finite_differences_1000_pairs():
    rng = np.random.default_rng(0)
    a, R = 1.3, 12.0
    worst = 0.0
    for _ in range(1000):
        x = rng.uniform(-6, 6, 3)
        u = rng.normal(size=3)
        y = x + u / np.linalg.norm(u) * rng.uniform(0.01 * R, 0.99 * R)
        B = thin_plate_block(x, y, a, R)
        F = fd_block(x, y, a, R)
        scale = np.maximum(np.abs(F), 1e-9 * np.abs(F).max())
        worst = max(worst, float((np.abs(B - F) / scale).max()))
    assert worst <= 1e-5


def test_kernel_matrix_symmetric_psd():
    # positive definite while the support radius dominates the point spread
    rng = np.random.default_rng(1)
    K = kernel_matrix(rng.uniform(-2, 2, (25, 3)), 1.0, 12.0)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > 0


def test_jitter_escalation_when_support_is_small(sphere):
    # with derivative targets the truncated kernel loses definiteness once pairs approach R
    rng = np.random.default_rng(1)
    X = rng.uniform(-2, 2, (5, 3))
    assert np.linalg.eigvalsh(kernel_matrix(X, 1.0, 4.0)).min() < 0
    gp = GpisModel(X, np.tile([0, 0, 1.0], (5, 1)), (sphere, Pose.identity()), 1.0, 4.0, 1e-4, np.zeros(20))
    with pytest.raises(np.linalg.LinAlgError, match="jitter"):
        gp.factorize()


@pytest.fixture(scope="module")
def sphere():
    spec = {"type": "sphere", "radius": 1.0}
    return make_object_model(0, "sphere", primitive_grid(spec, 48), spec, n_features=50, seed=0)


@pytest.fixture(scope="module")
def box():
    spec = {"type": "box", "half_extents": [0.8, 0.8, 0.8]}
    return make_object_model(1, "box", primitive_grid(spec, 48), spec, n_features=50, seed=1)


def sphere_contacts(n, rng, radius=1.0):
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return [OrientedPoint(radius * v, v) for v in u]


def test_fit_requires_contacts(sphere):
    with pytest.raises(ValueError):
        gpis_fit([], (sphere, Pose.identity()))


def test_single_contact_system(sphere):
    gp = gpis_fit([OrientedPoint([0, 0, 1.2], [0, 0, 1])], (sphere, Pose.identity()))
    assert gp.chol[0].shape == (4, 4)
    mean, _ = gpis_predict(gp, [[0, 0, 1.2]])
    assert np.allclose(mean[0], [0, 0, 0, 1], atol=10 * gp.sigma)


def test_interpolation_within_10_sigma(box):
    rng = np.random.default_rng(2)
    cs = sphere_contacts(30, rng, 1.1)  # deliberately not the prior's surface
    gp = gpis_fit(cs, (box, Pose([0.1, 0, 0], [0.2, 0, 0])), a0=1.0, R=12.0, sigma=1e-4)
    mean, var = gpis_predict(gp, [c.x for c in cs])
    target = np.array([[0.0, *c.n] for c in cs])
    assert np.abs(mean - target).max() <= 10 * gp.sigma
    assert var.max() <= 2 * gp.sigma**2 + 1e-9 * gp.prior_variance
    # dense-solve oracle for the correction term
    K = kernel_matrix(gp.train_x, gp.a, gp.R) + gp.noise_variance * np.eye(4 * len(cs))
    alpha = np.linalg.solve(K, gp.residual)
    assert np.allclose(alpha, gp.alpha, rtol=1e-6, atol=1e-8 * np.abs(alpha).max())


def test_truth_prior_leaves_prior_unchanged(sphere):
    rng = np.random.default_rng(3)
    cs = sphere_contacts(20, rng)
    gp = gpis_fit(cs, (sphere, Pose.identity()))
    gp.residual[:] = 0.0
    gp.factorize()
    q = rng.uniform(-2, 2, (200, 3))
    assert np.array_equal(posterior_sdf(gp, q), prior_mean(gp.prior, q)[:, 0])
    # with the real residuals (grid interpolation only) the correction stays tiny
    gp2 = gpis_fit(cs, (sphere, Pose.identity()))
    assert np.abs(posterior_sdf(gp2, q) - prior_mean(gp2.prior, q)[:, 0]).max() < 0.05


def test_far_query_reverts_to_prior(sphere):
    gp = gpis_fit([OrientedPoint([0, 0, 1], [0, 0, 1])], (sphere, Pose.identity()), R=2.0)
    mean, var = gpis_predict(gp, [[5.0, 0, 0]])
    assert np.allclose(mean[0], prior_mean(gp.prior, [[5.0, 0, 0]])[0])
    assert var[0] == pytest.approx(gp.prior_variance)


def test_fast_paths_match_dense_prediction(box):
    rng = np.random.default_rng(4)
    gp = gpis_fit(sphere_contacts(40, rng), (box, Pose.identity()), R=3.0)
    q = rng.uniform(-2, 2, (300, 3))
    mean, var = gpis_predict(gp, q)
    assert np.allclose(posterior_sdf(gp, q, chunk=37), mean[:, 0], atol=1e-10)
    assert np.allclose(posterior_variance(gp, q, chunk=41), var, atol=1e-10)


def test_variance_bounded_by_prior_and_smallest_at_data(sphere):
    rng = np.random.default_rng(5)
    R = 6.0
    for _ in range(100):
        cs = sphere_contacts(int(rng.integers(1, 12)), rng)
        gp = gpis_fit(cs, (sphere, Pose.identity()), R=R, a0=float(rng.uniform(0.1, 5)))
        X = gp.train_x
        q = rng.uniform(-7, 7, (400, 3))
        far = q[np.min(np.linalg.norm(q[:, None] - X[None], axis=2), axis=1) >= 0.5 * R]
        v_train = posterior_variance(gp, X)
        v_q = posterior_variance(gp, q)
        assert np.all(v_q <= gp.prior_variance + 1e-12)
        if len(far):
            assert v_train.max() <= posterior_variance(gp, far).min()


def test_optimizer_zero_residual_hits_lower_clamp(sphere):
    gp = gpis_fit(sphere_contacts(15, np.random.default_rng(6)), (sphere, Pose.identity()), R=3.0)
    gp.residual[:] = 0.0
    gp.factorize()
    assert optimize_kernel_scale(gp, iters=200) == pytest.approx(A_MIN)


def test_optimizer_recovers_generating_scale(sphere):
    rng = np.random.default_rng(7)
    est = []
    for _ in range(20):
        X = rng.uniform(-2, 2, (40, 3))
        R, sigma = 12.0, 1e-2
        K = kernel_matrix(X, 4.0, R) + sigma**2 * np.eye(160)
        lam, Q = np.linalg.eigh(K)
        y = Q @ (np.sqrt(np.maximum(lam, 0)) * rng.normal(size=160))
        gp = GpisModel(X, np.tile([0, 0, 1.0], (40, 1)), (sphere, Pose.identity()), 1.0, R, sigma, y).factorize()
        est.append(optimize_kernel_scale(gp, iters=60))
    assert 2.0 <= np.median(est) <= 8.0


def test_optimizer_respects_clamp(sphere):
    gp = gpis_fit(sphere_contacts(5, np.random.default_rng(8)), (sphere, Pose.identity()), R=3.0)
    gp.residual *= 1e8
    gp.factorize()
    assert A_MIN <= optimize_kernel_scale(gp, iters=300) <= A_MAX


def test_extract_single_contact_on_sphere(sphere):
    gp = gpis_fit([OrientedPoint([0, 0, 1], [0, 0, 1])], (sphere, Pose.identity()))
    cell = 4 / 63
    s = extract_surface(gp, [-2, -2, -2], [2, 2, 2], cell)
    assert len(s.vertices) > 0
    assert np.abs(np.linalg.norm(s.vertices, axis=1) - 1).max() <= 2 * cell
    assert s.mesh.is_watertight()
    assert np.all(s.vertex_variance >= 0)


def test_extract_truth_prior_twd(box):
    rng = np.random.default_rng(9)
    pose = Pose([0.2, -0.1, 0.3], [0.3, 0.2, 0.1])
    y = box.surface_samples(30)
    cs = []
    for p in y:
        x = pose.rotation @ p + pose.translation
        n = prior_mean((box, pose), x[None])[0, 1:]
        cs.append(OrientedPoint(x, n))
    gp = gpis_fit(cs, (box, pose))
    cell = 4 / 63
    s = extract_surface(gp, pose.translation - 2, pose.translation + 2, cell)
    truth = box.surface_samples(2000) @ pose.rotation.T + pose.translation
    verts = s.vertices[rng.choice(len(s.vertices), min(3000, len(s.vertices)), replace=False)]
    assert two_way_hausdorff(verts, truth) <= 3 * cell


def test_fitness_prefers_truth(sphere, box):
    rng = np.random.default_rng(10)
    for _ in range(5):
        cs = sphere_contacts(25, rng)
        good = gp_prior_fitness_log(cs, (sphere, Pose.identity()), R=3.0)
        bad = gp_prior_fitness_log(cs, (box, Pose([0.3, 0, 0], [0.5, 0, 0])), R=3.0)
        assert good >= bad


def test_fitness_zero_residual_is_maximal_and_noise_monotone(sphere):
    cs = sphere_contacts(20, np.random.default_rng(11))
    gp = gpis_fit(cs, (sphere, Pose.identity()), R=3.0)
    base = gp.residual.copy()
    direction = np.random.default_rng(12).normal(size=base.shape)
    vals = []
    for s in (0.0, 0.01, 0.1, 1.0):
        gp.residual = s * direction
        gp.factorize()
        vals.append(log_marginal_likelihood(gp))
    assert all(v1 > v2 for v1, v2 in zip(vals, vals[1:]))
    gp.residual = base
    gp.factorize()
    assert vals[0] >= log_marginal_likelihood(gp)
