"""Rigid transforms, surface sampling, point-set distances and isosurfacing.

Rotation convention (used everywhere in the package): intrinsic Z-Y-X,
``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.  A pose maps canonical object
coordinates to world coordinates as ``x_world = R @ x_obj + translation``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

Array = np.ndarray


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(out <= -np.pi, out + 2.0 * np.pi, out)


def euler_to_matrix(euler) -> Array:
    euler = np.asarray(euler, dtype=float)
    return Rotation.from_euler("ZYX", euler).as_matrix()


def matrix_to_euler(R) -> Array:
    return wrap_angle(Rotation.from_matrix(np.asarray(R, dtype=float)).as_euler("ZYX"))


@dataclass(frozen=True)
class Pose:
    translation: Array = field(default_factory=lambda: np.zeros(3))
    euler: Array = field(default_factory=lambda: np.zeros(3))  # yaw, pitch, roll

    def __post_init__(self):
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "euler", wrap_angle(np.asarray(self.euler, dtype=float).reshape(3)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(np.asarray(t, dtype=float), matrix_to_euler(R))

    @property
    def rotation(self) -> Array:
        return euler_to_matrix(self.euler)

    def inverse(self) -> "Pose":
        R = self.rotation
        return Pose.from_matrix(R.T, -R.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Pose equivalent to applying ``other`` first, then ``self``."""
        R = self.rotation
        return Pose.from_matrix(R @ other.rotation, R @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"translation": [float(v) for v in self.translation],
                "euler": [float(v) for v in self.euler]}

    @classmethod
    def from_dict(cls, d) -> "Pose":
        return cls(d["translation"], d["euler"])


def compose_transform(pose: Pose, x) -> Array:
    """Canonical -> world. Works on a single point or an (N, 3) array."""
    x = np.asarray(x, dtype=float)
    return x @ pose.rotation.T + pose.translation


def inverse_transform(pose: Pose, x) -> Array:
    """World -> canonical; inverse of :func:`compose_transform`."""
    x = np.asarray(x, dtype=float)
    return (x - pose.translation) @ pose.rotation


@dataclass(frozen=True)
class OrientedPoint:
    x: Array
    n: Array

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float).reshape(3)
        n = np.asarray(self.n, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("normal must be non-zero")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "n", n / norm)


@dataclass
class TriangleMesh:
    vertices: Array
    triangles: Array

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self):
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def corners(self):
        t = self.triangles
        return self.vertices[t[:, 0]], self.vertices[t[:, 1]], self.vertices[t[:, 2]]

    def face_normals(self, normalize=True) -> Array:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def areas(self) -> Array:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    @property
    def area(self) -> float:
        return float(self.areas().sum())

    def transformed(self, pose: Pose) -> "TriangleMesh":
        return TriangleMesh(compose_transform(pose, self.vertices), self.triangles.copy())

    def cleaned(self, decimals: int = 9) -> "TriangleMesh":
        """Merge coincident vertices and drop zero-area triangles."""
        if self.is_empty:
            return TriangleMesh.empty()
        key = np.round(self.vertices, decimals)
        uniq, inverse = np.unique(key, axis=0, return_inverse=True)
        tris = inverse.reshape(-1)[self.triangles]
        ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
        mesh = TriangleMesh(uniq, tris[ok])
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[mesh.areas() > 1e-14])
        return mesh.compacted()

    def compacted(self) -> "TriangleMesh":
        """Drop vertices not referenced by any triangle."""
        used = np.unique(self.triangles)
        remap = -np.ones(len(self.vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[self.triangles])

    def open_edges(self) -> Array:
        """Undirected edges not shared by exactly two triangles."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts != 2]

    def is_watertight(self) -> bool:
        return not self.is_empty and len(self.open_edges()) == 0

    def connected_components(self) -> list[Array]:
        """Triangle index arrays, one per edge-connected component, largest first."""
        from scipy.sparse import coo_matrix
        from scipy.sparse.csgraph import connected_components

        t = self.triangles
        nv = len(self.vertices)
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
        _, labels = connected_components(adj, directed=False)
        tri_label = labels[t[:, 0]]
        comps = [np.flatnonzero(tri_label == lab) for lab in np.unique(tri_label)]
        comps.sort(key=lambda c: -self.areas()[c].sum())
        return comps

    def largest_component(self) -> "TriangleMesh":
        if self.is_empty:
            return TriangleMesh.empty()
        comp = self.connected_components()[0]
        return TriangleMesh(self.vertices, self.triangles[comp]).compacted()

    def sample_surface(self, count: int, rng: np.random.Generator) -> tuple[Array, Array]:
        """Area-weighted uniform samples with their face normals."""
        areas = self.areas()
        if areas.sum() <= 0:
            raise ValueError("mesh has zero area")
        face = rng.choice(len(areas), size=count, p=areas / areas.sum())
        u = rng.random((count, 2))
        flip = u.sum(axis=1) > 1
        u[flip] = 1 - u[flip]
        a, b, c = (v[face] for v in self.corners())
        pts = a + u[:, :1] * (b - a) + u[:, 1:] * (c - a)
        return pts, self.face_normals()[face]


def _as_points(A) -> Array:
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    if len(A) == 0:
        raise ValueError("Hausdorff distance is undefined for an empty point set")
    return A


def nearest_distances(A, B) -> Array:
    """Distance from every point of A to its nearest neighbour in B."""
    A, B = _as_points(A), _as_points(B)
    d, _ = cKDTree(B).query(A)
    return d


def directed_hausdorff(A, B) -> float:
    return float(nearest_distances(A, B).max())


def two_way_hausdorff(A, B) -> float:
    return max(directed_hausdorff(A, B), directed_hausdorff(B, A))


def poisson_disc_sample(mesh: TriangleMesh, count: int, rng: np.random.Generator | None = None,
                        oversample: int = 30, shrink: float = 0.95) -> list[OrientedPoint]:
    """Blue-noise samples by greedy dart throwing with an annealed rejection radius.

    Candidates are drawn area-uniformly; a candidate is accepted when it is at
    least ``r`` from every accepted point.  Whenever a full pass leaves fewer
    than ``count`` points, ``r`` shrinks geometrically and the pass repeats.
    """
    if count < 2:
        raise ValueError("count must be >= 2")
    rng = np.random.default_rng(0) if rng is None else rng
    area = mesh.area if not mesh.is_empty else 0.0
    if area <= 0:
        raise ValueError("mesh has zero area")
    cand, normals = mesh.sample_surface(max(oversample * count, 1000), rng)
    r = 2.0 * np.sqrt(area / count)
    chosen: list[int] = []
    taken = np.zeros(len(cand), dtype=bool)
    while True:
        for i in range(len(cand)):
            if taken[i]:
                continue
            if chosen:
                d2 = ((cand[chosen] - cand[i]) ** 2).sum(axis=1)
                if d2.min() < r * r:
                    continue
            chosen.append(i)
            taken[i] = True
            if len(chosen) == count:
                return [OrientedPoint(cand[j], normals[j]) for j in chosen]
        r *= shrink


def grid_axes(lower, upper, resolution):
    lower = np.asarray(lower, dtype=float) * np.ones(3)
    upper = np.asarray(upper, dtype=float) * np.ones(3)
    res = np.asarray(resolution, dtype=int) * np.ones(3, dtype=int)
    if np.any(res < 2):
        raise ValueError("resolution must be >= 2 per axis")
    return [np.linspace(lower[k], upper[k], res[k]) for k in range(3)]


def sample_grid(field, lower, upper, resolution) -> Array:
    axes = grid_axes(lower, upper, resolution)
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    return np.asarray(field(pts), dtype=float).reshape(X.shape)


def marching_cubes(field, lower, upper, resolution, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set of a scalar field on a regular box grid.

    ``field`` is either a callable mapping (N, 3) points to N values or an
    already sampled array of shape ``resolution``.  Triangles are wound so
    their normals point towards increasing field values.
    """
    from skimage import measure

    lower = np.asarray(lower, dtype=float) * np.ones(3)
    upper = np.asarray(upper, dtype=float) * np.ones(3)
    if callable(field):
        vol = sample_grid(field, lower, upper, resolution)
    else:
        vol = np.asarray(field, dtype=float)
    if np.any(np.array(vol.shape) < 2):
        raise ValueError("resolution must be >= 2 per axis")
    if not np.all(np.isfinite(vol)):
        raise ValueError("field must be finite on every grid node")
    if not (vol.min() < iso < vol.max()):
        return TriangleMesh.empty()
    spacing = (upper - lower) / (np.array(vol.shape) - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, spacing=tuple(spacing))
    return TriangleMesh(verts + lower, faces)
