"""Barycentric resampling between spherical meshes, and rotation of
spherical data via precomputed tables.

Each destination vertex is located in the source face its ray from the
origin passes through (gnomonic projection onto the face plane); the
interpolation weights are the barycentric coordinates of that planar hit.
Candidate faces come from a k-d tree over face centroids; among all faces
containing the point the lowest face index wins, which makes degenerate
hits on shared edges and vertices deterministic.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParseError, ShapeError, ValidationError
from .mesh import Icosphere, TriMesh

logger = logging.getLogger(__name__)

AUGMENT_ANGLES = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
AXES = ("x", "y", "z")

_SNAP = 1e-9  # weights below this collapse to exact 0 / exact one-hot
_ON_SPHERE_TOL = 1e-4


@dataclass
class FeatureField:
    """Per-vertex multi-channel data on a carrier mesh. values is (V, C)
    float32 and must be finite."""
    values: np.ndarray
    channel_names: list[str] = field(default_factory=list)
    mesh_id: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError("field values must be (V, C)")
        if not np.isfinite(self.values).all():
            raise ValidationError("field contains NaN or Inf")
        if not self.channel_names:
            self.channel_names = [f"c{i}" for i in range(self.values.shape[1])]
        if len(self.channel_names) != self.values.shape[1]:
            raise ValidationError("channel_names length != channel count")

    @property
    def vertex_count(self) -> int:
        return self.values.shape[0]

    @property
    def channel_count(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_mesh(cls, mesh: TriMesh, mesh_id: str = "") -> "FeatureField":
        names = list(mesh.channels)
        vals = np.stack([mesh.channels[n] for n in names], axis=1)
        return cls(vals, names, mesh_id)

    def as_channels(self) -> dict[str, np.ndarray]:
        return {n: self.values[:, i] for i, n in enumerate(self.channel_names)}


@dataclass
class ResampleTable:
    """Per destination vertex: a source face index and 3 barycentric
    weights (non-negative, summing to 1 within 1e-6)."""
    face_index: np.ndarray        # (Vdst,) int
    weights: np.ndarray           # (Vdst, 3) float64
    src_vertex_count: int
    src_faces: np.ndarray         # (Fsrc, 3) int, for application

    def __post_init__(self):
        self.face_index = np.ascontiguousarray(self.face_index, dtype=np.int64)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.face_index), 3):
            raise ShapeError("weights must be (Vdst, 3)")

    @property
    def dst_vertex_count(self) -> int:
        return len(self.face_index)


def _require_spherical(mesh: TriMesh, name: str) -> np.ndarray:
    v = mesh.vertices.astype(np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.abs(norms - 1.0).max() > _ON_SPHERE_TOL:
        raise ValidationError(f"{name} mesh vertices are not on the unit sphere")
    return v / norms[:, None]


def _locate(src_verts: np.ndarray, faces: np.ndarray, points: np.ndarray):
    """Face index + planar barycentric weights for each unit query point."""
    tri = src_verts[faces]                      # (F, 3, 3)
    centroids = tri.mean(axis=1)
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    tree = cKDTree(centroids)

    n_pts = len(points)
    face_out = np.full(n_pts, -1, dtype=np.int64)
    w_out = np.zeros((n_pts, 3))
    unresolved = np.arange(n_pts)

    for k in (8, 32, 128):
        if unresolved.size == 0:
            break
        k_eff = min(k, len(faces))
        _, cand = tree.query(points[unresolved], k=k_eff)
        cand = cand.reshape(len(unresolved), k_eff)
        f, w = _best_hit(tri, faces, points[unresolved], cand)
        hit = f >= 0
        face_out[unresolved[hit]] = f[hit]
        w_out[unresolved[hit]] = w[hit]
        unresolved = unresolved[~hit]
        if k_eff == len(faces):
            break

    if unresolved.size:
        # numerically outside every candidate: fall back to nearest centroid
        logger.warning("resample: %d vertices fell back to nearest-centroid "
                       "location", unresolved.size)
        _, nearest = tree.query(points[unresolved], k=1)
        nearest = np.atleast_1d(nearest).astype(np.int64)
        face_out[unresolved] = nearest
        w = _bary(tri[nearest], points[unresolved])
        w_out[unresolved] = np.clip(w, 0.0, None)
    return face_out, w_out


def _bary(tris: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coords of the ray-plane intersection, per (tri, point).

    Rays that miss the plane (back-facing or parallel) get -inf weights so
    containment tests reject them.
    """
    a, b, c = tris[..., 0, :], tris[..., 1, :], tris[..., 2, :]
    n = np.cross(b - a, c - a)
    nd = np.einsum("...i,...i->...", n, points)
    na = np.einsum("...i,...i->...", n, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = na / nd
    p = t[..., None] * points
    area2 = np.einsum("...i,...i->...", n, n)
    w0 = np.einsum("...i,...i->...", np.cross(b - p, c - p), n)
    w1 = np.einsum("...i,...i->...", np.cross(c - p, a - p), n)
    w2 = np.einsum("...i,...i->...", np.cross(a - p, b - p), n)
    with np.errstate(invalid="ignore"):
        w = np.stack([w0, w1, w2], axis=-1) / area2[..., None]
    bad = (nd <= 0) | ~np.isfinite(w).all(axis=-1)
    w[bad] = -np.inf
    return w


def _best_hit(tri, faces, points, cand):
    """Among candidate faces containing each point, pick the lowest index."""
    w = _bary(tri[cand], points[:, None, :])    # (n, k, 3)
    inside = (w > -1e-9).all(axis=-1)
    face_pick = np.where(inside, cand, np.iinfo(np.int64).max)
    best = face_pick.min(axis=1)
    hit = best < np.iinfo(np.int64).max
    rows = np.arange(len(points))
    col = np.argmin(face_pick, axis=1)
    w_best = w[rows, col]
    return np.where(hit, best, -1), w_best


def _normalize_weights(w: np.ndarray) -> np.ndarray:
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    w[w < _SNAP] = 0.0
    # re-close the partition: largest weight absorbs the rounding residue
    top = np.argmax(w, axis=1)
    rows = np.arange(len(w))
    others = w.sum(axis=1) - w[rows, top]
    w[rows, top] = 1.0 - others
    return w


def _build_table(src: TriMesh, lookup_points: np.ndarray) -> ResampleTable:
    src_verts = _require_spherical(src, "source")
    pts = lookup_points / np.linalg.norm(lookup_points, axis=1, keepdims=True)
    face_idx, w = _locate(src_verts, src.faces, pts)
    return ResampleTable(face_idx, _normalize_weights(w),
                         src.vertex_count, src.faces)


def build_resample_table(src: TriMesh, dst: TriMesh) -> ResampleTable:
    """Table moving per-vertex data from src to dst, both on the unit sphere."""
    dst_verts = _require_spherical(dst, "destination")
    return _build_table(src, dst_verts)


def apply_resample(f: FeatureField, table: ResampleTable) -> FeatureField:
    """out[d] = sum_i w_i * field[faceVertex_i(d)].

    Evaluated in the affine form a + w1*(b-a) + w2*(c-a) so constant fields
    and exact one-hot weights reproduce source values bit-for-bit.
    """
    if f.vertex_count != table.src_vertex_count:
        raise ShapeError(f"field has {f.vertex_count} vertices, table source "
                         f"has {table.src_vertex_count}")
    tri_vid = table.src_faces[table.face_index]          # (Vdst, 3)
    vals = f.values.astype(np.float64)
    a = vals[tri_vid[:, 0]]
    b = vals[tri_vid[:, 1]]
    c = vals[tri_vid[:, 2]]
    w1 = table.weights[:, 1:2]
    w2 = table.weights[:, 2:3]
    out = a + w1 * (b - a) + w2 * (c - a)
    return FeatureField(out.astype(np.float32), list(f.channel_names))


def rotation_matrix(axis: str, degrees: float) -> np.ndarray:
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected one of {AXES}")
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def rotation_table(ico: Icosphere, axis: str, degrees: float) -> ResampleTable:
    """Table computing f_rot(v) = f(R^-1 v) on the icosphere's own vertices.

    Tables for the 36 augmentation configurations (3 axes x +/-{5..30} deg)
    are pure functions of (order, axis, degrees) and can be cached.
    """
    r_inv = rotation_matrix(axis, degrees).T
    lookup = ico.mesh.vertices.astype(np.float64) @ r_inv.T
    return _build_table(ico.mesh, lookup)


# ---------------------------------------------------------------------------
# native format: RESAMPLE v1 <Vdst>, then `faceIndex w0 w1 w2` per vertex


def save_resample_table(table: ResampleTable, path) -> None:
    lines = [f"RESAMPLE v1 {table.dst_vertex_count}"]
    for fi, w in zip(table.face_index, table.weights):
        lines.append(f"{int(fi)} {w[0]!r} {w[1]!r} {w[2]!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_resample_table(path, src: TriMesh) -> ResampleTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[:2] != ["RESAMPLE", "v1"]:
        raise ParseError(f"{path}:1: bad header")
    n = int(head[2])
    if len(lines) < n + 1:
        raise ParseError(f"{path}: expected {n} rows")
    face_idx = np.empty(n, dtype=np.int64)
    weights = np.empty((n, 3))
    for i in range(n):
        parts = lines[1 + i].split()
        if len(parts) != 4:
            raise ParseError(f"{path}:{i + 2}: expected 4 fields")
        face_idx[i] = int(parts[0])
        weights[i] = [float(p) for p in parts[1:]]
    if face_idx.size and (face_idx.min() < 0 or face_idx.max() >= len(src.faces)):
        raise ValidationError(f"{path}: face index out of range")
    return ResampleTable(face_idx, weights, src.vertex_count, src.faces)
