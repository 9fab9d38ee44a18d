"""Signed distance fields: analytic primitives, mesh-derived grids, evaluation.

Sign convention: negative strictly inside, positive strictly outside.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from dataclasses import field as dc_field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    OrientedPoint,
    Pose,
    TriangleMesh,
    euler_to_matrix,
    inverse_transform,
    marching_cubes,
    poisson_disc_sample,
)

Array = np.ndarray


class SdfSource(str, enum.Enum):
    MESH = "mesh-derived"
    PRIMITIVE = "analytic-primitive"
    GPIS = "gpis-learned"


# ---------------------------------------------------------------------------
# analytic primitives

PRIMITIVES = ("sphere", "box", "torus", "capsule", "superellipsoid", "union")


def _local(spec: dict, p: Array) -> Array:
    """Express points in the primitive's own frame (optional center/euler)."""
    c = np.asarray(spec.get("center", (0.0, 0.0, 0.0)), dtype=float)
    q = p - c
    if "euler" in spec:
        q = q @ euler_to_matrix(spec["euler"])
    return q


def _sdf_sphere(spec, q):
    return np.linalg.norm(q, axis=1) - float(spec["radius"])


def _sdf_box(spec, q):
    b = np.asarray(spec["half_extents"], dtype=float)
    d = np.abs(q) - b
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return outside + inside


def _sdf_torus(spec, q):
    # ring in the local xy plane
    R, r = float(spec["major"]), float(spec["minor"])
    rad = np.hypot(q[:, 0], q[:, 1]) - R
    return np.hypot(rad, q[:, 2]) - r


def _sdf_capsule(spec, q):
    a = np.asarray(spec["a"], dtype=float)
    b = np.asarray(spec["b"], dtype=float)
    ab = b - a
    t = np.clip(((q - a) @ ab) / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(q - closest, axis=1) - float(spec["radius"])


def _sdf_superellipsoid(spec, q):
    # Radial approximation: (F**(e1/2) - 1) * min(radii). Exact zero set, not an
    # exact distance away from it; |error| grows with distance and exponent.
    a = np.asarray(spec["radii"], dtype=float)
    e1, e2 = (float(v) for v in spec["exponents"])
    u = np.abs(q) / a
    xy = (u[:, 0] ** (2 / e2) + u[:, 1] ** (2 / e2)) ** (e2 / e1)
    F = xy + u[:, 2] ** (2 / e1)
    return (F ** (e1 / 2) - 1.0) * a.min()


_DISPATCH = {
    "sphere": _sdf_sphere,
    "box": _sdf_box,
    "torus": _sdf_torus,
    "capsule": _sdf_capsule,
    "superellipsoid": _sdf_superellipsoid,
}


def primitive_sdf(spec: dict, x) -> Array | float:
    """Signed distance of ``x`` (a point or (N, 3) array) to a primitive shape."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    p = x.reshape(-1, 3)
    kind = spec.get("type")
    if kind == "union":
        q = _local(spec, p)
        out = np.min([primitive_sdf(c, q) for c in spec["children"]], axis=0)
    elif kind in _DISPATCH:
        out = _DISPATCH[kind](spec, _local(spec, p))
    else:
        raise ValueError(f"unknown primitive type: {kind!r}")
    out = np.asarray(out, dtype=float).reshape(-1)
    return float(out[0]) if single else out


def _local_bounds(spec) -> tuple[Array, Array]:
    kind = spec.get("type")
    if kind == "sphere":
        r = float(spec["radius"])
        return -np.full(3, r), np.full(3, r)
    if kind == "box":
        b = np.asarray(spec["half_extents"], dtype=float)
        return -b, b
    if kind == "torus":
        R, r = float(spec["major"]), float(spec["minor"])
        return -np.array([R + r, R + r, r]), np.array([R + r, R + r, r])
    if kind == "capsule":
        ends = np.array([spec["a"], spec["b"]], dtype=float)
        r = float(spec["radius"])
        return ends.min(axis=0) - r, ends.max(axis=0) + r
    if kind == "superellipsoid":
        a = np.asarray(spec["radii"], dtype=float)
        return -a, a
    if kind == "union":
        bs = [primitive_bounds(c) for c in spec["children"]]
        return np.min([b[0] for b in bs], axis=0), np.max([b[1] for b in bs], axis=0)
    raise ValueError(f"unknown primitive type: {kind!r}")


def primitive_bounds(spec: dict) -> tuple[Array, Array]:
    """Axis-aligned bounds of a primitive in its parent frame."""
    lo, hi = _local_bounds(spec)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    if "euler" in spec:
        corners = corners @ euler_to_matrix(spec["euler"]).T
    corners = corners + np.asarray(spec.get("center", (0.0, 0.0, 0.0)), dtype=float)
    return corners.min(axis=0), corners.max(axis=0)


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class SdfField:
    origin: Array
    cell: float
    dims: tuple[int, int, int]
    values: Array
    source: SdfSource = SdfSource.MESH

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        vals = np.asarray(self.values, dtype=float).reshape(self.dims)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "cell", float(self.cell))
        object.__setattr__(self, "source", SdfSource(self.source))

    @property
    def upper(self) -> Array:
        return self.origin + self.cell * (np.array(self.dims) - 1)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.origin))

    @cached_property
    def _channels(self) -> Array:
        # value + central-difference gradient (one-sided on the boundary), so the
        # interpolated gradient equals central differences of the interpolant with
        # step = cell.
        g = np.gradient(self.values, self.cell)
        ch = np.stack([self.values, g[0], g[1], g[2]], axis=-1)
        return np.ascontiguousarray(ch.reshape(-1, 4))

    def _interp(self, p: Array, channels: slice) -> tuple[Array, Array]:
        dims = np.array(self.dims)
        clamped = np.clip(p, self.origin, self.upper)
        outside = np.linalg.norm(p - clamped, axis=1)
        u = (clamped - self.origin) / self.cell
        i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
        f = np.clip(u - i0, 0.0, 1.0)
        ny, nz = self.dims[1], self.dims[2]
        base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
        ch = self._channels[:, channels]
        fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
        gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
        sx, sy = ny * nz, nz
        out = (ch[base] * gx * gy * gz
               + ch[base + sx] * fx * gy * gz
               + ch[base + sy] * gx * fy * gz
               + ch[base + 1] * gx * gy * fz
               + ch[base + sx + sy] * fx * fy * gz
               + ch[base + sx + 1] * fx * gy * fz
               + ch[base + sy + 1] * gx * fy * fz
               + ch[base + sx + sy + 1] * fx * fy * fz)
        return out, outside

    def evaluate(self, points) -> Array:
        """Trilinear value; outside the box: boundary value + distance to the box."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        out, outside = self._interp(p, slice(0, 1))
        return out[:, 0] + outside

    def evaluate_with_gradient(self, points) -> tuple[Array, Array]:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        out, outside = self._interp(p, slice(0, 4))
        return out[:, 0] + outside, out[:, 1:]

    def contains(self, points) -> Array:
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((p >= self.origin - 1e-12) & (p <= self.upper + 1e-12), axis=1)

    def node_points(self) -> Array:
        axes = [self.origin[k] + self.cell * np.arange(self.dims[k]) for k in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)

    def zero_mesh(self) -> TriangleMesh:
        return marching_cubes(self.values, self.origin, self.upper, self.dims)

    # -- flat binary cache: magic, dims (3 x int32), origin (3 x f64), cell (f64),
    #    source tag (16 bytes), then little-endian float32 values, x fastest.
    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = b"SDF1" + struct.pack("<3i", *self.dims) + struct.pack("<4d", *self.origin, self.cell)
        header += self.source.value.encode().ljust(16, b"\0")[:16]
        payload = self.values.astype("<f4").ravel(order="F").tobytes()
        path.write_bytes(header + payload)

    @classmethod
    def load(cls, path) -> "SdfField":
        data = Path(path).read_bytes()
        if data[:4] != b"SDF1":
            raise ValueError("not an SDF grid file")
        dims = struct.unpack("<3i", data[4:16])
        *origin, cell = struct.unpack("<4d", data[16:48])
        tag = data[48:64].rstrip(b"\0").decode()
        vals = np.frombuffer(data, dtype="<f4", offset=64).astype(float)
        return cls(np.array(origin), cell, dims, vals.reshape(dims, order="F"), SdfSource(tag))


def _grid_geometry(lo, hi, resolution: int):
    extent = hi - lo
    cell = float(extent.max() / (resolution - 1))
    dims = np.maximum(np.ceil(extent / cell - 1e-9).astype(int) + 1, 2)
    # centre the grid on the bounds
    origin = lo - 0.5 * ((dims - 1) * cell - extent)
    return origin, cell, tuple(int(d) for d in dims)


def primitive_grid(spec: dict, resolution: int = 96, padding: float = 1.0) -> SdfField:
    lo, hi = primitive_bounds(spec)
    origin, cell, dims = _grid_geometry(lo - padding, hi + padding, resolution)
    f = SdfField(origin, cell, dims, np.zeros(dims), SdfSource.PRIMITIVE)
    vals = primitive_sdf(spec, f.node_points()).reshape(dims)
    return SdfField(origin, cell, dims, vals, SdfSource.PRIMITIVE)


def point_triangle_distance(p, a, b, c) -> Array:
    """Exact Euclidean distance from points to triangles (row-wise)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        closest = a + v[:, None] * ab + w[:, None] * ac  # interior

        # edge regions
        t_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        closest[m] = a[m] + t_ab[m, None] * ab[m]
        t_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        closest[m] = a[m] + t_ac[m, None] * ac[m]
        den_bc = (d4 - d3) + (d5 - d6)
        t_bc = np.where(den_bc != 0, (d4 - d3) / den_bc, 0.0)
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        closest[m] = b[m] + t_bc[m, None] * (c[m] - b[m])

    # vertex regions
    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]
    m = (d3 >= 0) & (d4 <= d3)
    closest[m] = b[m]
    m = (d6 >= 0) & (d5 <= d6)
    closest[m] = c[m]
    return np.linalg.norm(p - closest, axis=1)


def mesh_unsigned_distance(mesh: TriangleMesh, points, k: int = 16) -> Array:
    """Distance to the mesh surface via exact point-triangle tests.

    The ``k`` nearest triangles by centroid are tested; queries whose ``k``-th
    centroid is not beyond (best + largest circumradius) get one more round with
    ``4k`` candidates.  Exact when the mesh has fewer than ``4k`` triangles, and
    in practice for the near-uniform meshes produced by marching cubes.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    A, B, C = mesh.corners()
    cent = (A + B + C) / 3.0
    rad = np.max([np.linalg.norm(A - cent, axis=1), np.linalg.norm(B - cent, axis=1),
                  np.linalg.norm(C - cent, axis=1)], axis=0)
    rmax = float(rad.max())
    tree = cKDTree(cent)
    best = np.full(len(p), np.inf)

    def closest(idx, kk, start):
        cd, ci = tree.query(p[idx], k=kk)
        cd = cd.reshape(len(idx), kk)
        ci = ci.reshape(len(idx), kk)
        b = best[idx]
        for j in range(start, kk):
            t = ci[:, j]
            b = np.minimum(b, point_triangle_distance(p[idx], A[t], B[t], C[t]))
        best[idx] = b
        return cd[:, -1]

    k1 = min(k, len(cent))
    kth = closest(np.arange(len(p)), k1, 0)
    if k1 < len(cent):
        unsure = np.flatnonzero(kth < best + rmax)
        if len(unsure):
            closest(unsure, min(4 * k, len(cent)), k1)
    return best


def _inside_parity(mesh: TriangleMesh, origin, cell, dims) -> Array:
    """Inside mask on grid nodes by crossing parity along +x grid lines."""
    nx, ny, nz = dims
    # irrational sub-cell shift keeps rays off edges and vertices
    ys = origin[1] + cell * (np.arange(ny) + 1.3e-7 * np.pi)
    zs = origin[2] + cell * (np.arange(nz) + 1.7e-7 * np.e)
    xs = origin[0] + cell * np.arange(nx)
    A, B, C = mesh.corners()
    tri_lo = np.minimum(np.minimum(A, B), C)
    tri_hi = np.maximum(np.maximum(A, B), C)
    j0 = np.clip(np.ceil((tri_lo[:, 1] - ys[0]) / cell).astype(int), 0, ny)
    j1 = np.clip(np.floor((tri_hi[:, 1] - ys[0]) / cell).astype(int), -1, ny - 1)
    k0 = np.clip(np.ceil((tri_lo[:, 2] - zs[0]) / cell).astype(int), 0, nz)
    k1 = np.clip(np.floor((tri_hi[:, 2] - zs[0]) / cell).astype(int), -1, nz - 1)
    nj = np.maximum(j1 - j0 + 1, 0)
    nk = np.maximum(k1 - k0 + 1, 0)
    counts = nj * nk
    tri = np.repeat(np.arange(len(A)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(len(tri)) - start
    jj = j0[tri] + local // np.maximum(nk[tri], 1)
    kk = k0[tri] + local % np.maximum(nk[tri], 1)
    y, z = ys[jj], zs[kk]
    a, b, c = A[tri], B[tri], C[tri]
    # barycentric coordinates in the yz projection
    det = (b[:, 1] - a[:, 1]) * (c[:, 2] - a[:, 2]) - (c[:, 1] - a[:, 1]) * (b[:, 2] - a[:, 2])
    ok = np.abs(det) > 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = ((y - a[:, 1]) * (c[:, 2] - a[:, 2]) - (c[:, 1] - a[:, 1]) * (z - a[:, 2])) / det
        l2 = ((b[:, 1] - a[:, 1]) * (z - a[:, 2]) - (y - a[:, 1]) * (b[:, 2] - a[:, 2])) / det
    with np.errstate(invalid="ignore"):
        hit = ok & (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
    xc = a[hit, 0] + l1[hit] * (b[hit, 0] - a[hit, 0]) + l2[hit] * (c[hit, 0] - a[hit, 0])
    first = np.searchsorted(xs, xc, side="right")
    toggles = np.zeros((ny, nz, nx + 1), dtype=np.int64)
    np.add.at(toggles, (jj[hit], kk[hit], first), 1)
    parity = np.cumsum(toggles, axis=2)[:, :, :nx] % 2
    return np.transpose(parity, (2, 0, 1)).astype(bool)


def build_sdf_grid(mesh: TriangleMesh, resolution: int = 96, padding: float = 1.0,
                   source: SdfSource = SdfSource.MESH) -> SdfField:
    """Signed distance grid of a closed triangle mesh."""
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    if mesh.is_empty:
        raise ValueError("cannot build an SDF from an empty mesh")
    open_edges = mesh.open_edges()
    if len(open_edges):
        shown = ", ".join(f"({a},{b})" for a, b in open_edges[:10])
        more = "" if len(open_edges) <= 10 else f" and {len(open_edges) - 10} more"
        raise ValueError(f"mesh is not watertight; open edges: {shown}{more}")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    origin, cell, dims = _grid_geometry(lo - padding, hi + padding, resolution)
    tmp = SdfField(origin, cell, dims, np.zeros(dims), source)
    dist = mesh_unsigned_distance(mesh, tmp.node_points()).reshape(dims)
    inside = _inside_parity(mesh, origin, cell, dims)
    return SdfField(origin, cell, dims, np.where(inside, -dist, dist), source)


# ---------------------------------------------------------------------------
# object models


@dataclass
class ObjectModel:
    class_id: int
    name: str
    field: SdfField
    feature_x: Array  # (F, 3) canonical feature points
    feature_n: Array  # (F, 3) unit outward normals
    display_mesh: TriangleMesh
    primitive: dict | None = None
    surface_seed: int = 0
    _samples: dict = dc_field(default_factory=dict, repr=False)

    @property
    def feature_points(self) -> list[OrientedPoint]:
        return [OrientedPoint(x, n) for x, n in zip(self.feature_x, self.feature_n)]

    def exact_sdf(self, points) -> Array:
        """Best available canonical-frame distance (analytic if a primitive)."""
        if self.primitive is not None:
            return primitive_sdf(self.primitive, np.asarray(points, dtype=float).reshape(-1, 3))
        return self.field.evaluate(points)

    def surface_samples(self, count: int) -> Array:
        """Fixed, seeded area-uniform samples on the display mesh (canonical frame)."""
        if count not in self._samples:
            rng = np.random.default_rng(self.surface_seed + 7919 * count)
            self._samples[count] = self.display_mesh.sample_surface(count, rng)[0]
        return self._samples[count]


def project_to_zero(field_fn, x: Array, tol: float, iters: int = 30) -> Array:
    """Newton projection of points onto the zero level set of a field."""
    x = np.array(x, dtype=float)
    for _ in range(iters):
        d, g = field_fn(x)
        if np.all(np.abs(d) <= tol):
            break
        gg = np.maximum((g * g).sum(axis=1), 1e-12)
        x = x - (d / gg)[:, None] * g
    return x


def make_object_model(class_id: int, name: str, field: SdfField, primitive: dict | None = None,
                      n_features: int = 200, seed: int = 0,
                      display_mesh: TriangleMesh | None = None) -> ObjectModel:
    mesh = field.zero_mesh() if display_mesh is None else display_mesh
    if mesh.is_empty:
        raise ValueError(f"model {name!r} has an empty zero level set")
    rng = np.random.default_rng(seed)
    pts = poisson_disc_sample(mesh, n_features, rng)
    x = np.array([p.x for p in pts])
    x = project_to_zero(field.evaluate_with_gradient, x, tol=1e-4 * field.cell)
    _, g = field.evaluate_with_gradient(x)
    n = g / np.linalg.norm(g, axis=1, keepdims=True)
    return ObjectModel(class_id, name, field, x, n, mesh, primitive, surface_seed=seed)


def sdf_eval(model: ObjectModel, pose: Pose, x) -> Array | float:
    x = np.asarray(x, dtype=float)
    out = model.field.evaluate(inverse_transform(pose, x.reshape(-1, 3)))
    return float(out[0]) if x.ndim == 1 else out


def sdf_gradient(model: ObjectModel, pose: Pose, x, normalized: bool = False):
    """World-frame gradient. With ``normalized`` also returns a medial-axis flag."""
    x = np.asarray(x, dtype=float)
    _, g = model.field.evaluate_with_gradient(inverse_transform(pose, x.reshape(-1, 3)))
    g = g @ pose.rotation.T
    if not normalized:
        return g[0] if x.ndim == 1 else g
    n, flag = normalize_gradient(g)
    return (n[0], bool(flag[0])) if x.ndim == 1 else (n, flag)


def normalize_gradient(g: Array) -> tuple[Array, Array]:
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    flag = norm[..., 0] < 1e-6
    n = np.where(flag[..., None], np.array([0.0, 0.0, 1.0]), g / np.where(flag[..., None], 1.0, norm))
    return n, flag
