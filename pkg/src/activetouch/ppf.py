"""Point-pair features: computation, discretized lookup table, pair alignment."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import OrientedPoint, Pose

DIST_STEP = 0.1
ANGLE_STEP = np.deg2rad(12.0)
N_ANGLE_BINS = int(round(np.pi / ANGLE_STEP)) + 1  # 0..15


def _angle(u, v):
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    return np.arctan2(cross, np.einsum("...i,...i->...", u, v))


def ppf_arrays(xa, na, xb, nb):
    """Vectorized features (distance, angle(na, nb), angle(na, d), angle(nb, d)), d = xb - xa."""
    d = np.asarray(xb, dtype=float) - np.asarray(xa, dtype=float)
    dist = np.linalg.norm(d, axis=-1)
    return dist, _angle(na, nb), _angle(na, d), _angle(nb, d)


def compute_ppf(a: OrientedPoint, b: OrientedPoint) -> tuple[float, float, float, float]:
    if np.linalg.norm(b.x - a.x) < 1e-12:
        raise ValueError("point-pair feature undefined for coincident points")
    return tuple(float(v) for v in ppf_arrays(a.x, a.n, b.x, b.n))


@dataclass(frozen=True)
class PpfKey:
    d_bin: int
    a1_bin: int
    a2_bin: int
    a3_bin: int

    @property
    def distance(self) -> float:
        return self.d_bin * DIST_STEP

    @property
    def angles_deg(self) -> tuple[int, int, int]:
        return (12 * self.a1_bin, 12 * self.a2_bin, 12 * self.a3_bin)

    def packed(self) -> int:
        return int(pack_bins(np.array([self.d_bin]), np.array([self.a1_bin]),
                             np.array([self.a2_bin]), np.array([self.a3_bin]))[0])


def discretize(dist, a1, a2, a3):
    """Round distance to one decimal and angles to the nearest multiple of 12 degrees."""
    db = np.floor(np.asarray(dist) / DIST_STEP + 0.5).astype(np.int64)
    bins = [np.clip(np.floor(np.asarray(a) / ANGLE_STEP + 0.5).astype(np.int64), 0, N_ANGLE_BINS - 1)
            for a in (a1, a2, a3)]
    return db, bins[0], bins[1], bins[2]


def pack_bins(db, b1, b2, b3):
    return ((np.asarray(db, dtype=np.int64) * 16 + b1) * 16 + b2) * 16 + b3


def ppf_key(a: OrientedPoint, b: OrientedPoint) -> PpfKey:
    db, b1, b2, b3 = discretize(*compute_ppf(a, b))
    return PpfKey(int(db), int(b1), int(b2), int(b3))


def neighbor_keys(packed):
    """Packed key plus the keys one bin away in a single coordinate (up to 9)."""
    packed = np.atleast_1d(np.asarray(packed, dtype=np.int64))
    b3 = packed % 16
    b2 = (packed // 16) % 16
    b1 = (packed // 256) % 16
    db = packed // 4096
    out = [packed]
    for delta in (-1, 1):
        nd = db + delta
        out.append(np.where(nd >= 0, pack_bins(nd, b1, b2, b3), -1))
        for which in range(3):
            bins = [b1.copy(), b2.copy(), b3.copy()]
            bins[which] = bins[which] + delta
            valid = (bins[which] >= 0) & (bins[which] < N_ANGLE_BINS)
            out.append(np.where(valid, pack_bins(db, *bins), -1))
    return np.stack(out, axis=1)


@dataclass
class PpfTable:
    """Sorted-array hash table from packed keys to (class_id, i, j) model pairs."""

    keys: np.ndarray  # sorted packed keys, one per entry
    class_id: np.ndarray
    i: np.ndarray
    j: np.ndarray
    digest: str = ""

    def __len__(self):
        return len(self.keys)

    def lookup(self, packed) -> np.ndarray:
        """Entry indices for every key in ``packed`` (keys < 0 are ignored)."""
        packed = np.asarray(packed, dtype=np.int64).ravel()
        packed = packed[packed >= 0]
        lo = np.searchsorted(self.keys, packed, side="left")
        hi = np.searchsorted(self.keys, packed, side="right")
        counts = hi - lo
        if counts.sum() == 0:
            return np.zeros(0, dtype=np.int64)
        start = np.repeat(lo, counts)
        offset = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        return start + offset

    def get(self, key: PpfKey) -> list[tuple[int, int, int]]:
        idx = self.lookup([key.packed()])
        return list(zip(self.class_id[idx].tolist(), self.i[idx].tolist(), self.j[idx].tolist()))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, keys=self.keys, class_id=self.class_id, i=self.i, j=self.j,
                     digest=np.array(self.digest))

    @classmethod
    def load(cls, path, digest: str | None = None) -> "PpfTable | None":
        """Cached table, or None if missing or built for a different library."""
        path = Path(path)
        if not path.exists():
            return None
        with np.load(path) as z:
            stored = str(z["digest"])
            if digest is not None and stored != digest:
                return None
            return cls(z["keys"], z["class_id"], z["i"], z["j"], stored)


def library_digest(models) -> str:
    h = hashlib.sha256()
    for m in models:
        h.update(str(m.class_id).encode())
        h.update(np.ascontiguousarray(m.feature_x).tobytes())
        h.update(np.ascontiguousarray(m.feature_n).tobytes())
    return h.hexdigest()


def build_ppf_table(models) -> PpfTable:
    keys, cls_, ii, jj = [], [], [], []
    for m in models:
        F = len(m.feature_x)
        I, J = np.meshgrid(np.arange(F), np.arange(F), indexing="ij")
        off = I != J
        I, J = I[off], J[off]
        bins = discretize(*ppf_arrays(m.feature_x[I], m.feature_n[I], m.feature_x[J], m.feature_n[J]))
        keys.append(pack_bins(*bins))
        cls_.append(np.full(len(I), m.class_id, dtype=np.int64))
        ii.append(I)
        jj.append(J)
    keys = np.concatenate(keys)
    order = np.argsort(keys, kind="stable")
    return PpfTable(keys[order], np.concatenate(cls_)[order], np.concatenate(ii)[order],
                    np.concatenate(jj)[order], library_digest(models))


# ---------------------------------------------------------------------------
# alignment


def _skew(v):
    z = np.zeros(v.shape[:-1])
    return np.stack([np.stack([z, -v[..., 2], v[..., 1]], -1),
                     np.stack([v[..., 2], z, -v[..., 0]], -1),
                     np.stack([-v[..., 1], v[..., 0], z], -1)], -2)


def rotation_between(a, b):
    """Rotations taking unit vectors a onto unit vectors b (row-wise)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    v = np.cross(a, b)
    c = np.einsum("ij,ij->i", a, b)
    K = _skew(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    anti = c < -1 + 1e-12
    denom = np.where(anti, 1.0, 1.0 + c)
    R = eye + K + (K @ K) / denom[:, None, None]
    if np.any(anti):
        # half turn about any axis perpendicular to a
        ax = np.cross(a[anti], np.array([1.0, 0.0, 0.0]))
        small = np.linalg.norm(ax, axis=1) < 1e-6
        ax[small] = np.cross(a[anti][small], np.array([0.0, 1.0, 0.0]))
        ax /= np.linalg.norm(ax, axis=1, keepdims=True)
        R[anti] = 2 * np.einsum("ki,kj->kij", ax, ax) - np.eye(3)
    return R


def axis_angle(axis, angle):
    axis = np.atleast_2d(axis)
    angle = np.broadcast_to(np.asarray(angle, dtype=float), axis.shape[:1])
    K = _skew(axis)
    s, c = np.sin(angle)[:, None, None], np.cos(angle)[:, None, None]
    return np.eye(3) + s * K + (1 - c) * (K @ K)


def align_pairs(m1x, m1n, m2x, o1x, o1n, o2x, eps: float = 1e-6):
    """Rigid transforms mapping model pairs onto observed pairs (vectorized).

    The first model point lands on the first observed point, the first normals
    coincide and the remaining rotation about that normal brings the second
    points into the same half-plane.  Returns (R, t, valid); ``valid`` is False
    where a second point lies (nearly) on the normal axis.
    """
    m1x, m1n, m2x, o1x, o1n, o2x = (np.atleast_2d(np.asarray(v, dtype=float)) for v in
                                    (m1x, m1n, m2x, o1x, o1n, o2x))
    Ra = rotation_between(m1n, np.broadcast_to(o1n, m1n.shape))
    dm = np.einsum("kij,kj->ki", Ra, m2x - m1x)
    do = np.broadcast_to(o2x - o1x, dm.shape)
    n = np.broadcast_to(o1n, dm.shape)
    pm = dm - np.einsum("ki,ki->k", dm, n)[:, None] * n
    po = do - np.einsum("ki,ki->k", do, n)[:, None] * n
    npm, npo = np.linalg.norm(pm, axis=1), np.linalg.norm(po, axis=1)
    valid = (npm > eps * np.maximum(np.linalg.norm(dm, axis=1), 1e-12)) & \
            (npo > eps * np.maximum(np.linalg.norm(do, axis=1), 1e-12))
    alpha = np.arctan2(np.einsum("ki,ki->k", n, np.cross(pm, po)), np.einsum("ki,ki->k", pm, po))
    R = axis_angle(n, alpha) @ Ra
    t = np.broadcast_to(o1x, dm.shape) - np.einsum("kij,kj->ki", R, m1x)
    return R, t, valid


def align_pair(model_pair: tuple[OrientedPoint, OrientedPoint],
               obs_pair: tuple[OrientedPoint, OrientedPoint]) -> Pose:
    (m1, m2), (o1, o2) = model_pair, obs_pair
    R, t, valid = align_pairs(m1.x, m1.n, m2.x, o1.x, o1.n, o2.x)
    if not valid[0]:
        raise ValueError("degenerate pair: second point lies on the first normal axis")
    return Pose.from_matrix(R[0], t[0])
