import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from activetouch.geometry import Pose
from activetouch.measurement import (NoiseParams, Observation, ObservationBatch, contact_log_likelihood,
                                     noncontact_log_likelihood, observation_log_likelihood, score_poses)

NOISE = NoiseParams(0.5, 1.5)
N = np.array([0.0, 0.0, 1.0])


def tail_probability(f, sigma):
    """P(d > 0) for d ~ N(f, sigma^2) by quadrature of the density (50 digits)."""
    with mpmath.workdps(50):
        dens = lambda s: mpmath.exp(-(s - f) ** 2 / (2 * sigma**2)) / (sigma * mpmath.sqrt(2 * mpmath.pi))
        return float(mpmath.quad(dens, [0, f if f > 0 else 0, mpmath.inf]))


def test_contact_examples():
    obs = Observation.contact([0, 0, 0], N)
    assert contact_log_likelihood(obs, 0.0, N, NOISE) == 0.0
    assert contact_log_likelihood(obs, 0.5, N, NOISE) == pytest.approx(-0.5)
    assert contact_log_likelihood(obs, 0.0, -N, NOISE) == pytest.approx(-4 / (2 * 2.25))


def test_contact_rejects_noncontact():
    with pytest.raises(ValueError):
        contact_log_likelihood(Observation.non_contact([0, 0, 0]), 0.0, N, NOISE)


def test_observation_validation():
    with pytest.raises(ValueError):
        Observation.contact([0, 0, 0], None)
    with pytest.raises(ValueError):
        Observation([0, 0, 0], "non_contact", N)
    with pytest.raises(ValueError):
        NoiseParams(0.0, 1.0)


def test_noncontact_examples():
    assert noncontact_log_likelihood(0.0, NOISE) == pytest.approx(np.log(0.5))
    assert noncontact_log_likelihood(1e6, NOISE) == 0.0
    assert noncontact_log_likelihood(-0.5, NOISE) == pytest.approx(np.log(tail_probability(-0.5, 0.5)), abs=1e-12)
    assert np.exp(noncontact_log_likelihood(-0.5, NOISE)) == pytest.approx(0.158655, abs=1e-6)


def test_noncontact_vs_tail_integral_100_values():
    rng = np.random.default_rng(2024)
    fs = np.concatenate([rng.uniform(-3, 3, 97), [0.0, -5.0, 8.0]])
    for f in fs:
        got = np.exp(noncontact_log_likelihood(f, NOISE))
        assert abs(got - tail_probability(float(f), 0.5)) <= 1e-9


@given(st.floats(-40, 40), st.floats(0.05, 5))
def test_noncontact_log_is_finite_and_nonpositive(f, s):
    v = noncontact_log_likelihood(f, NoiseParams(s, 1.0))
    assert np.isfinite(v) and v <= 0


def test_observation_likelihood_on_truth(sphere_model):
    pose = Pose([0.3, -0.2, 1.0], [0.4, 0.1, -0.7])
    u = np.array([0.3, -0.5, 0.8])
    u /= np.linalg.norm(u)
    x = pose.rotation @ u + pose.translation
    obs = Observation.contact(x, pose.rotation @ u)
    assert observation_log_likelihood(obs, sphere_model, pose, NOISE) >= -1e-3
    far = Observation.non_contact(pose.translation + [5, 0, 0])
    assert observation_log_likelihood(far, sphere_model, pose, NOISE) == pytest.approx(0.0, abs=1e-12)


def test_noncontact_inside_large_shape():
    from activetouch.sdf import make_object_model, primitive_grid

    spec = {"type": "sphere", "radius": 2.6}  # inradius >= 5 sigma_d
    m = make_object_model(0, "big", primitive_grid(spec, 48), spec, n_features=20, seed=0)
    v = observation_log_likelihood(Observation.non_contact([0, 0, 0]), m, Pose.identity(), NOISE)
    assert v <= np.log(0.01)


def test_score_poses_matches_per_observation(sphere_model):
    rng = np.random.default_rng(5)
    obs = [Observation.contact(rng.normal(size=3), rng.normal(size=3)) for _ in range(6)]
    obs += [Observation.non_contact(rng.normal(size=3)) for _ in range(4)]
    poses = [Pose(rng.normal(size=3) * 0.3, rng.uniform(-np.pi, np.pi, 3)) for _ in range(7)]
    R = np.array([p.rotation for p in poses])
    t = np.array([p.translation for p in poses])
    got = score_poses(sphere_model, R, t, ObservationBatch.from_observations(obs), NOISE, chunk=13)
    want = [sum(observation_log_likelihood(o, sphere_model, p, NOISE) for o in obs) for p in poses]
    assert np.allclose(got, want, atol=1e-10)
