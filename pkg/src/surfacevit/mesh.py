"""Triangulated icospheres, subdivided quad meshes, and their native file
format.

Vertex ordering is pinned exactly so that downstream patch tables are
reproducible: every subdivision keeps parent vertices at their old indices
and appends new edge vertices in ascending (min, max) parent-edge order;
the four children of face f always occupy indices 4f..4f+3. Vertices are
stored as float32, which the 9-significant-digit text format round-trips
bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ResourceLimitError, StructureError, ValidationError

MAX_ICOSPHERE_ORDER = 8

def _base_icosahedron():
    """Unit icosahedron in polar form: vertices at both poles plus two
    staggered pentagonal rings at z = +/- 1/sqrt(5). Faces are
    counter-clockwise viewed from outside."""
    z = 1.0 / np.sqrt(5.0)
    r = 2.0 / np.sqrt(5.0)
    verts = [(0.0, 0.0, 1.0)]
    for k in range(5):
        a = 2.0 * np.pi * k / 5.0
        verts.append((r * np.cos(a), r * np.sin(a), z))
    for k in range(5):
        a = 2.0 * np.pi * (k + 0.5) / 5.0
        verts.append((r * np.cos(a), r * np.sin(a), -z))
    verts.append((0.0, 0.0, -1.0))
    up = [1, 2, 3, 4, 5]
    lo = [6, 7, 8, 9, 10]
    faces = []
    for k in range(5):
        kn = (k + 1) % 5
        faces.append((0, up[k], up[kn]))
        faces.append((up[k], lo[k], up[kn]))
        faces.append((up[kn], lo[k], lo[kn]))
        faces.append((11, lo[kn], lo[k]))
    return (np.array(verts, dtype=np.float64),
            np.array(faces, dtype=np.int64))


_ICO_VERTS, _ICO_FACES = _base_icosahedron()


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def undirected_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges as sorted (min, max) pairs, lexicographic."""
    k = faces.shape[1]
    pairs = np.concatenate([faces[:, [i, (i + 1) % k]] for i in range(k)])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


@dataclass
class TriMesh:
    """Triangle mesh: vertices (V, 3) float32, faces (F, 3) int, plus
    optional named per-vertex scalar channels."""
    vertices: np.ndarray
    faces: np.ndarray
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = _freeze(np.ascontiguousarray(self.vertices, dtype=np.float32))
        self.faces = _freeze(np.ascontiguousarray(self.faces, dtype=np.int64))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValidationError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValidationError("face index out of range")
        if self.faces.size:
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValidationError("degenerate face (repeated vertex index)")
        self.channels = {k: _freeze(np.ascontiguousarray(v, dtype=np.float32))
                         for k, v in self.channels.items()}
        for name, vals in self.channels.items():
            if vals.shape != (len(self.vertices),):
                raise ValidationError(f"channel {name!r} length != vertex count")

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def euler_characteristic(self) -> int:
        return self.vertex_count - len(undirected_edges(self.faces)) + self.face_count

    def with_channels(self, channels: dict[str, np.ndarray]) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, dict(channels))


@dataclass
class QuadMesh:
    """Quadrilateral mesh, possibly with open boundary.

    boundary_edges holds the (min, max) vertex pairs that belong to exactly
    one face; an edge on three or more faces is rejected as non-manifold.
    parent_face[f] is the face of the immediately coarser mesh that f
    subdivides (None for a control mesh).
    """
    vertices: np.ndarray
    faces: np.ndarray
    boundary_edges: frozenset = None
    parent_face: np.ndarray | None = None
    channels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = _freeze(np.ascontiguousarray(self.vertices, dtype=np.float32))
        self.faces = _freeze(np.ascontiguousarray(self.faces, dtype=np.int64))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValidationError("vertices must be (V, 3)")
        if self.faces.ndim != 2 or self.faces.shape[1] != 4:
            raise ValidationError("faces must be (F, 4)")
        if self.faces.size and (self.faces.min() < 0
                                or self.faces.max() >= len(self.vertices)):
            raise ValidationError("face index out of range")
        edges, counts = self._edge_counts()
        over = counts > 2
        if np.any(over):
            e = edges[np.argmax(over)]
            raise StructureError(f"non-manifold edge ({e[0]}, {e[1]}) shared by "
                                 f"{int(counts[np.argmax(over)])} faces")
        derived = frozenset(map(tuple, edges[counts == 1]))
        if self.boundary_edges is None:
            self.boundary_edges = derived
        elif frozenset(self.boundary_edges) != derived:
            raise ValidationError("boundary_edges inconsistent with face incidence")
        if self.parent_face is not None:
            self.parent_face = _freeze(np.ascontiguousarray(self.parent_face,
                                                            dtype=np.int64))
        self.channels = {k: _freeze(np.ascontiguousarray(v, dtype=np.float32))
                         for k, v in self.channels.items()}

    def _edge_counts(self):
        k = 4
        pairs = np.concatenate([self.faces[:, [i, (i + 1) % k]] for i in range(k)])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0, return_counts=True)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)


@dataclass
class Icosphere:
    """Recursively subdivided icosahedron of a given order.

    parent_face[f] maps each face to the order n-1 face it subdivides
    (None at order 0). Children of face f sit at indices 4f..4f+3, so the
    order n-k ancestor of face f is simply f // 4**k.
    """
    order: int
    mesh: TriMesh
    parent_face: np.ndarray | None

    @property
    def vertex_count(self) -> int:
        return self.mesh.vertex_count

    @property
    def face_count(self) -> int:
        return self.mesh.face_count


def _subdivide_tri(vertices: np.ndarray, faces: np.ndarray, project: bool):
    """One 4-to-1 split. Returns (vertices, faces); new midpoint vertices are
    appended in ascending (min, max) parent-edge order."""
    v64 = vertices.astype(np.float64)
    edges = undirected_edges(faces)
    mid = 0.5 * (v64[edges[:, 0]] + v64[edges[:, 1]])
    if project:
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    base = len(vertices)
    # np.unique sorts rows lexicographically, so midpoint vertex indices
    # follow ascending (min, max) edge order by construction.
    edge_key = edges[:, 0] * np.int64(len(vertices)) + edges[:, 1]
    lookup = dict(zip(edge_key.tolist(), range(base, base + len(edges))))

    def mid_index(a, b):
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        key = lo * np.int64(len(vertices)) + hi
        return np.array([lookup[k] for k in key.tolist()], dtype=np.int64)

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab = mid_index(a, b)
    mbc = mid_index(b, c)
    mca = mid_index(c, a)
    children = np.empty((len(faces) * 4, 3), dtype=np.int64)
    children[0::4] = np.stack([a, mab, mca], axis=1)
    children[1::4] = np.stack([mab, b, mbc], axis=1)
    children[2::4] = np.stack([mca, mbc, c], axis=1)
    children[3::4] = np.stack([mab, mbc, mca], axis=1)
    return np.concatenate([vertices, mid.astype(np.float32)]), children


def build_icosphere(order: int) -> Icosphere:
    """Regular icosahedron subdivided `order` times, midpoints projected to
    the unit sphere after each level. order <= 8."""
    if order < 0:
        raise ValueError("order must be non-negative")
    if order > MAX_ICOSPHERE_ORDER:
        raise ResourceLimitError(f"icosphere order {order} exceeds limit "
                                 f"{MAX_ICOSPHERE_ORDER}")
    verts = (_ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True))
    verts = verts.astype(np.float32)
    faces = _ICO_FACES.copy()
    parent = None
    for _ in range(order):
        n_faces = len(faces)
        verts, faces = _subdivide_tri(verts, faces, project=True)
        parent = np.repeat(np.arange(n_faces, dtype=np.int64), 4)
    return Icosphere(order=order, mesh=TriMesh(verts, faces), parent_face=parent)


def icosphere_vertex_count(order: int) -> int:
    return 10 * 4 ** order + 2


# ---------------------------------------------------------------------------
# Catmull-Clark


def catmull_clark(mesh: QuadMesh) -> QuadMesh:
    """One Catmull-Clark step.

    New vertex layout: repositioned originals keep indices 0..V-1, face
    points follow at V..V+F-1 in face order, then edge points in ascending
    (min, max) edge order. Children of face f occupy indices 4f..4f+3, each
    anchored at the corresponding original corner. Interior vertices use the
    standard (Q + 2R + (n-3)S)/n stencil; boundary vertices use the cubic
    B-spline rule 3/4 self + 1/8 each boundary neighbor.
    """
    V = mesh.vertex_count
    F = mesh.face_count
    verts = mesh.vertices.astype(np.float64)
    faces = mesh.faces

    face_pts = verts[faces].mean(axis=1)

    pairs = np.concatenate([faces[:, [i, (i + 1) % 4]] for i in range(4)])
    face_of_pair = np.tile(np.arange(F, dtype=np.int64), 4)
    spairs = np.sort(pairs, axis=1)
    edges, inverse, counts = np.unique(spairs, axis=0, return_inverse=True,
                                       return_counts=True)
    E = len(edges)
    if np.any(counts > 2):
        bad = edges[np.argmax(counts > 2)]
        raise StructureError(f"non-manifold edge ({bad[0]}, {bad[1]})")
    boundary = counts == 1

    # face points adjacent to each edge
    adj_face_sum = np.zeros((E, 3))
    np.add.at(adj_face_sum, inverse, face_pts[face_of_pair])
    endpoints_mid = 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])
    edge_pts = np.where(boundary[:, None],
                        endpoints_mid,
                        (verts[edges[:, 0]] + verts[edges[:, 1]] + adj_face_sum) / 4.0)

    # reposition originals
    new_orig = np.empty_like(verts)
    valence = np.zeros(V)
    np.add.at(valence, edges.ravel(), 1.0)
    fp_sum = np.zeros((V, 3))
    np.add.at(fp_sum, faces.ravel(), np.repeat(face_pts, 4, axis=0))
    fp_count = np.zeros(V)
    np.add.at(fp_count, faces.ravel(), 1.0)
    mid_sum = np.zeros((V, 3))
    np.add.at(mid_sum, edges[:, 0], endpoints_mid)
    np.add.at(mid_sum, edges[:, 1], endpoints_mid)

    on_boundary = np.zeros(V, dtype=bool)
    on_boundary[edges[boundary].ravel()] = True
    interior = ~on_boundary

    n = np.maximum(valence, 1.0)
    q = fp_sum / np.maximum(fp_count, 1.0)[:, None]
    r = mid_sum / n[:, None]
    new_orig[interior] = ((q + 2.0 * r + (n[:, None] - 3.0) * verts) / n[:, None])[interior]

    bnd_sum = np.zeros((V, 3))
    bnd_deg = np.zeros(V)
    be = edges[boundary]
    np.add.at(bnd_sum, be[:, 0], verts[be[:, 1]])
    np.add.at(bnd_sum, be[:, 1], verts[be[:, 0]])
    np.add.at(bnd_deg, be.ravel(), 1.0)
    if np.any(bnd_deg[on_boundary] != 2):
        bad = int(np.flatnonzero(on_boundary & (bnd_deg != 2))[0])
        raise StructureError(f"vertex {bad} has {int(bnd_deg[bad])} boundary edges")
    new_orig[on_boundary] = (0.75 * verts + 0.125 * bnd_sum)[on_boundary]

    new_vertices = np.concatenate([new_orig, face_pts, edge_pts]).astype(np.float32)

    edge_vid = V + F + np.arange(E, dtype=np.int64)
    edge_index = inverse.reshape(4, F).T  # [f, i] = edge (v_i, v_{i+1}) of face f
    e01 = edge_vid[edge_index[:, 0]]
    e12 = edge_vid[edge_index[:, 1]]
    e23 = edge_vid[edge_index[:, 2]]
    e30 = edge_vid[edge_index[:, 3]]
    fp = V + np.arange(F, dtype=np.int64)
    v0, v1, v2, v3 = faces.T

    children = np.empty((4 * F, 4), dtype=np.int64)
    children[0::4] = np.stack([v0, e01, fp, e30], axis=1)
    children[1::4] = np.stack([v1, e12, fp, e01], axis=1)
    children[2::4] = np.stack([v2, e23, fp, e12], axis=1)
    children[3::4] = np.stack([v3, e30, fp, e23], axis=1)

    parent = np.repeat(np.arange(F, dtype=np.int64), 4)
    return QuadMesh(new_vertices, children, parent_face=parent)


# ---------------------------------------------------------------------------
# native format
#
# SURFMESH v1 <tri|quad> <V> <F> <C>
# V lines of 3 floats, F lines of 3 or 4 indices, then C blocks of
# "CHANNEL <name>" followed by V floats (one per line). Floats use 9
# significant digits, which round-trips float32 exactly.


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def save_mesh(mesh: TriMesh | QuadMesh, path) -> None:
    kind = "tri" if isinstance(mesh, TriMesh) else "quad"
    chans = mesh.channels
    lines = [f"SURFMESH v1 {kind} {mesh.vertex_count} {mesh.face_count} {len(chans)}"]
    for v in mesh.vertices:
        lines.append(f"{_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for f in mesh.faces:
        lines.append(" ".join(str(int(i)) for i in f))
    for name, vals in chans.items():
        lines.append(f"CHANNEL {name}")
        lines.extend(_fmt(x) for x in vals)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path) -> TriMesh | QuadMesh:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "SURFMESH" or head[1] != "v1":
        raise ParseError(f"{path}:1: bad header {lines[0]!r}")
    kind = head[2]
    if kind not in ("tri", "quad"):
        raise ParseError(f"{path}:1: unknown mesh kind {kind!r}")
    try:
        nv, nf, nc = int(head[3]), int(head[4]), int(head[5])
    except ValueError as e:
        raise ParseError(f"{path}:1: {e}") from None
    width = 3 if kind == "tri" else 4
    need = 1 + nv + nf + nc * (nv + 1)
    if len(lines) < need:
        raise ParseError(f"{path}: expected {need} lines, found {len(lines)}")

    def parse_floats(row, lineno, n):
        parts = row.split()
        if len(parts) != n:
            raise ParseError(f"{path}:{lineno}: expected {n} fields")
        try:
            return [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad float") from None

    verts = np.array([parse_floats(lines[1 + i], 2 + i, 3) for i in range(nv)],
                     dtype=np.float32)
    at = 1 + nv
    try:
        faces = np.array([[int(x) for x in lines[at + i].split()] for i in range(nf)],
                         dtype=np.int64)
    except ValueError:
        raise ParseError(f"{path}: bad face index near line {at + 1}") from None
    if nf and faces.shape[1] != width:
        raise ParseError(f"{path}: face width {faces.shape[1]} != {width}")
    if nf == 0:
        faces = faces.reshape(0, width)
    at += nf
    channels: dict[str, np.ndarray] = {}
    for _ in range(nc):
        tag = lines[at].split(maxsplit=1)
        if len(tag) != 2 or tag[0] != "CHANNEL":
            raise ParseError(f"{path}:{at + 1}: expected CHANNEL block")
        name = tag[1]
        vals = np.array([parse_floats(lines[at + 1 + i], at + 2 + i, 1)[0]
                         for i in range(nv)], dtype=np.float32)
        channels[name] = vals
        at += 1 + nv
    if kind == "tri":
        return TriMesh(verts, faces, channels)
    return QuadMesh(verts, faces, channels=channels)
