import numpy as np
import pytest
from scipy import stats
from scipy.spatial.transform import Rotation

from activetouch.geometry import Pose
from activetouch.measurement import Kind
from activetouch.objects import build_model
from activetouch.simulator import (WORKSPACE, Probe, World, probe_point, random_pose, random_rotation,
                                   ray_march_contact, sample_surface_point, surface_walk)


@pytest.fixture(scope="module")
def sphere_world(sphere_model):
    return World(sphere_model, Pose.identity())


def test_probe_on_surface(sphere_world):
    o = probe_point(sphere_world, [0, 0, 1.0])
    assert o.kind is Kind.CONTACT and np.allclose(o.n, [0, 0, 1], atol=1e-6)


def test_probe_outside(sphere_world):
    assert probe_point(sphere_world, [0, 0, 2.0]).kind is Kind.NON_CONTACT


def test_probe_projection_tolerance(sphere_world):
    rng = np.random.default_rng(0)
    for _ in range(100):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        o = probe_point(sphere_world, u * (1 + rng.uniform(-0.9e-4, 0.9e-4)))
        assert o.is_contact and abs(np.linalg.norm(o.x) - 1) <= sphere_world.contact_tol


def test_ray_hits_unit_sphere(sphere_world):
    hit = ray_march_contact(sphere_world, [3, 0, 0], [-1, 0, 0], 5.0)
    assert np.allclose(hit.x, [1, 0, 0], atol=1e-3)
    assert abs(sphere_world.sdf(hit.x)[0]) <= sphere_world.contact_tol


def test_ray_miss(sphere_world):
    assert ray_march_contact(sphere_world, [3, 3, 0], [0, 0, 1], 5.0) is None
    assert ray_march_contact(sphere_world, [3, 0, 0], [-1, 0, 0], 1.5) is None
    assert ray_march_contact(sphere_world, [0, 0, 0], [1, 0, 0], 5.0) is None  # starts inside


def test_ray_grazing_thin_feature():
    w = World(build_model("torus", resolution=48), Pose.identity())
    rng = np.random.default_rng(1)
    for _ in range(50):
        start = rng.uniform(-5, 5, 3)
        if w.sdf(start)[0] <= 0:
            continue
        hit = ray_march_contact(w, start, rng.normal(size=3), 12.0)
        if hit is not None:
            assert abs(w.sdf(hit.x)[0]) <= w.contact_tol


def test_surface_samples_uniform_octants(sphere_world):
    rng = np.random.default_rng(2)
    X = np.array([sample_surface_point(sphere_world, rng).x for _ in range(1000)])
    octant = (X[:, 0] > 0) * 4 + (X[:, 1] > 0) * 2 + (X[:, 2] > 0)
    counts = np.bincount(octant, minlength=8)
    assert stats.chisquare(counts).pvalue > 0.01


def test_surface_samples_contact_and_outward(sphere_world):
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = sample_surface_point(sphere_world, rng)
        assert probe_point(sphere_world, p.x).is_contact
        assert sphere_world.sdf(p.x + 0.01 * p.n)[0] > 0


def test_random_pose_translation_uniform():
    rng = np.random.default_rng(4)
    T = np.array([random_pose(rng).translation for _ in range(10_000)])
    for k in range(3):
        assert stats.kstest(T[:, k], stats.uniform(-1, 2).cdf).pvalue > 0.01


def test_random_rotation_uniform_on_so3():
    rng = np.random.default_rng(5)
    rv = Rotation.from_matrix(np.array([random_rotation(rng) for _ in range(10_000)])).as_rotvec()
    angle = np.linalg.norm(rv, axis=1)
    # Haar measure: rotation angle has cdf (theta - sin theta) / pi
    assert stats.kstest(angle, lambda t: (t - np.sin(t)) / np.pi).pvalue > 0.01
    axis = rv / angle[:, None]
    assert stats.kstest(axis[:, 2], stats.uniform(-1, 2).cdf).pvalue > 0.01


def test_random_pose_keeps_object_inside():
    m = build_model("l_bracket", resolution=48)
    rng = np.random.default_rng(6)
    for _ in range(200):
        p = random_pose(rng, m)
        v = m.display_mesh.vertices @ p.rotation.T + p.translation
        assert np.all(np.abs(v) <= WORKSPACE)


def test_surface_walk_stays_on_surface(sphere_world):
    hit, walked = surface_walk(sphere_world, [0, 0, 1], [0, 2, 1], 0.15, 0.6)
    assert abs(sphere_world.sdf(hit.x)[0]) <= sphere_world.contact_tol
    assert walked == pytest.approx(0.6, abs=1e-6) or walked < 0.6
    assert hit.x[1] > 0.4


def test_probe_facade_accounts_path(sphere_world):
    probe = Probe(sphere_world)
    hit = probe.ray([3, 0, 0], [-1, 0, 0], 5.0)
    assert probe.path_length == pytest.approx(2.0, abs=1e-3)
    hit2 = probe.approach([1, 0, 0], [1, 0, 0], 1.0)
    assert np.allclose(hit2.x, hit.x, atol=1e-3)
    assert not hasattr(probe, "world") and not hasattr(probe, "truth_pose")


def test_world_streams_reproducible(sphere_model):
    def stream(seed):
        w = World(sphere_model, random_pose(np.random.default_rng(seed)), normal_noise=0.05, seed=seed)
        rng = np.random.default_rng(seed)
        return np.array([np.r_[p.x, p.n] for p in (sample_surface_point(w, rng) for _ in range(20))])

    assert np.array_equal(stream(9), stream(9))
    assert not np.array_equal(stream(9), stream(10))


def test_surface_slide_follows_geodesic(sphere_world):
    from activetouch.simulator import surface_slide

    hit, slid = surface_slide(sphere_world, [0, 0, 1], [1, 0, 5], 0.9, 0.05)
    angle = np.arccos(np.clip(hit.x @ [0, 0, 1], -1, 1))
    assert slid == pytest.approx(0.9, abs=1e-6)
    assert angle == pytest.approx(0.9, rel=0.01)
    assert abs(hit.x[1]) < 1e-6  # stays on the great circle through the heading
