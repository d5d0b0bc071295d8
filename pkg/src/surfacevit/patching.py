"""Patch tables mapping mesh vertices to token patches, and flattened
patch sequences.

Patch-internal order is the row-major grid order implied by the
subdivision lineage: descendants of a coarse triangle form a triangular
lattice (i steps toward corner B, j toward corner C, i + j <= 2**k), and
descendants of a quad element form a square lattice. Both lattices are
recovered combinatorially by walking child faces with midpoint arithmetic,
never from coordinates, so tables are identical across runs.

Flatten order is vertex-major: all channels of vertex 0, then vertex 1...
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ShapeError, StructureError, ValidationError
from .mesh import Icosphere, QuadMesh
from .resample import FeatureField


@dataclass
class PatchTable:
    """rows is (N, V): ordered vertex indices of each patch."""
    rows: np.ndarray
    carrier_vertex_count: int
    carrier_id: str = ""

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ShapeError("patch table rows must be (N, V)")
        if self.rows.size and (self.rows.min() < 0
                               or self.rows.max() >= self.carrier_vertex_count):
            raise ValidationError("patch table vertex index out of range")

    @property
    def patch_count(self) -> int:
        return self.rows.shape[0]

    @property
    def vertices_per_patch(self) -> int:
        return self.rows.shape[1]

    def coverage(self) -> np.ndarray:
        """How many patches contain each carrier vertex."""
        counts = np.zeros(self.carrier_vertex_count, dtype=np.int64)
        np.add.at(counts, self.rows.ravel(), 1)
        return counts


@dataclass
class PatchSequence:
    """data is (N, V*C): the flattened patch matrix fed to the encoder."""
    data: np.ndarray
    vertices_per_patch: int
    channels: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ShapeError("sequence data must be (N, V*C)")
        if self.data.shape[1] != self.vertices_per_patch * self.channels:
            raise ShapeError("sequence width != V*C")

    @property
    def patch_count(self) -> int:
        return self.data.shape[0]


def _tri_lattice_vertices(fine_faces: np.ndarray, coarse_face_count: int,
                          levels: int):
    """Per coarse face: fine vertex ids keyed by lattice coords.

    Walks the deterministic 4-child split in pure index space. Coordinates
    live on the (i, j) lattice with denominator 2**levels; corner A = (0,0),
    B = (s,0), C = (0,s) where s = 2**levels.
    """
    s = 2 ** levels
    # corner coords per face, replicated for every coarse face
    coords = np.array([[0, 0], [s, 0], [0, s]], dtype=np.int64)
    coords = np.broadcast_to(coords, (coarse_face_count, 3, 2)).copy()
    for _ in range(levels):
        a, b, c = coords[:, 0], coords[:, 1], coords[:, 2]
        mab = (a + b) // 2
        mbc = (b + c) // 2
        mca = (c + a) // 2
        nxt = np.empty((coords.shape[0] * 4, 3, 2), dtype=np.int64)
        nxt[0::4] = np.stack([a, mab, mca], axis=1)
        nxt[1::4] = np.stack([mab, b, mbc], axis=1)
        nxt[2::4] = np.stack([mca, mbc, c], axis=1)
        nxt[3::4] = np.stack([mab, mbc, mca], axis=1)
        coords = nxt
    if len(fine_faces) != coarse_face_count * 4 ** levels:
        raise StructureError("fine face count inconsistent with lineage")
    ancestor = np.arange(len(fine_faces), dtype=np.int64) // (4 ** levels)
    # one (patch, i, j, vid) record per face corner; dedupe
    patch = np.repeat(ancestor, 3)
    ij = coords.reshape(-1, 2)
    vid = fine_faces.reshape(-1)
    key = ((patch * (s + 1) + ij[:, 0]) * (s + 1) + ij[:, 1])
    order = np.argsort(key, kind="stable")
    key_s, vid_s = key[order], vid[order]
    keep = np.ones(len(key_s), dtype=bool)
    keep[1:] = key_s[1:] != key_s[:-1]
    if not (vid_s[~keep] == vid_s[np.flatnonzero(~keep) - 1]).all():
        raise StructureError("lineage walk disagrees with fine mesh connectivity")
    return key_s[keep], vid_s[keep], s


def build_ico_patch_table(fine: Icosphere, coarse: Icosphere) -> PatchTable:
    """One patch per coarse face, covering all fine vertices inside it.

    Requires fine to be built from coarse by repeated subdivision (shared
    lineage); for the canonical pairing (order 6, order 2) this yields
    N = 320 patches of V = 153 vertices.
    """
    levels = fine.order - coarse.order
    if levels < 1:
        raise StructureError("fine icosphere must be a subdivision of coarse")
    vc = coarse.vertex_count
    if (fine.face_count != coarse.face_count * 4 ** levels
            or not np.array_equal(fine.mesh.vertices[:vc], coarse.mesh.vertices)):
        raise StructureError("icospheres do not share subdivision lineage")
    key, vid, s = _tri_lattice_vertices(fine.mesh.faces, coarse.face_count, levels)
    per_patch = (s + 1) * (s + 2) // 2
    n = coarse.face_count
    if len(key) != n * per_patch:
        raise StructureError("patch lattice incomplete")
    # keys sort by (patch, i, j): exactly the row-major triangular order
    rows = vid.reshape(n, per_patch)
    return PatchTable(rows, fine.vertex_count,
                      carrier_id=f"ico{fine.order}/ico{coarse.order}")


def _quad_lattice_vertices(fine_faces: np.ndarray, control_face_count: int,
                           levels: int):
    """Quad analogue of the triangular walk; children follow the
    (corner, edge-mid, center, edge-mid) pattern of catmull_clark."""
    s = 2 ** levels
    coords = np.array([[0, 0], [s, 0], [s, s], [0, s]], dtype=np.int64)
    coords = np.broadcast_to(coords, (control_face_count, 4, 2)).copy()
    for _ in range(levels):
        p0, p1, p2, p3 = coords[:, 0], coords[:, 1], coords[:, 2], coords[:, 3]
        e01 = (p0 + p1) // 2
        e12 = (p1 + p2) // 2
        e23 = (p2 + p3) // 2
        e30 = (p3 + p0) // 2
        ctr = (p0 + p1 + p2 + p3) // 4
        nxt = np.empty((coords.shape[0] * 4, 4, 2), dtype=np.int64)
        nxt[0::4] = np.stack([p0, e01, ctr, e30], axis=1)
        nxt[1::4] = np.stack([p1, e12, ctr, e01], axis=1)
        nxt[2::4] = np.stack([p2, e23, ctr, e12], axis=1)
        nxt[3::4] = np.stack([p3, e30, ctr, e23], axis=1)
        coords = nxt
    if len(fine_faces) != control_face_count * 4 ** levels:
        raise StructureError("fine face count inconsistent with lineage")
    ancestor = np.arange(len(fine_faces), dtype=np.int64) // (4 ** levels)
    patch = np.repeat(ancestor, 4)
    ij = coords.reshape(-1, 2)
    vid = fine_faces.reshape(-1)
    key = ((patch * (s + 1) + ij[:, 1]) * (s + 1) + ij[:, 0])  # row-major: (j, i)
    order = np.argsort(key, kind="stable")
    key_s, vid_s = key[order], vid[order]
    keep = np.ones(len(key_s), dtype=bool)
    keep[1:] = key_s[1:] != key_s[:-1]
    if not (vid_s[~keep] == vid_s[np.flatnonzero(~keep) - 1]).all():
        raise StructureError("lineage walk disagrees with fine mesh connectivity")
    return key_s[keep], vid_s[keep], s


def build_quad_patch_table(control: QuadMesh, fine: QuadMesh,
                           pairing: list[tuple[int, int]] | None = None,
                           levels: int = 2) -> PatchTable:
    """Patch table for a subdivided quad control mesh.

    Each control element exposes its (2**levels + 1)^2 descendant vertex
    grid in row-major order (25 vertices for two subdivision steps). With a
    pairing list, each pair concatenates two element grids into one row and
    every element must appear in exactly one pair.
    """
    key, vid, s = _quad_lattice_vertices(fine.faces, control.face_count, levels)
    per_elem = (s + 1) * (s + 1)
    n_elem = control.face_count
    if len(key) != n_elem * per_elem:
        raise StructureError("element lattice incomplete")
    grids = vid.reshape(n_elem, per_elem)
    if pairing is None:
        return PatchTable(grids, fine.vertex_count, carrier_id="quad")
    seen: dict[int, int] = {}
    for k, pair in enumerate(pairing):
        if len(pair) != 2:
            raise ValidationError(f"pair {k} must list exactly 2 elements")
        for e in pair:
            if not 0 <= e < n_elem:
                raise ValidationError(f"pair {k}: element {e} out of range")
            if e in seen:
                raise ValidationError(f"element {e} appears in pairs {seen[e]} and {k}")
            seen[e] = k
    unpaired = sorted(set(range(n_elem)) - set(seen))
    if unpaired:
        raise ValidationError(f"unpaired elements: {unpaired}")
    rows = np.stack([np.concatenate([grids[a], grids[b]]) for a, b in pairing])
    return PatchTable(rows, fine.vertex_count, carrier_id="quad-paired")


def extract_sequence(f: FeatureField, table: PatchTable) -> PatchSequence:
    """data[r] = field values gathered by table row r, vertex-major."""
    if f.vertex_count != table.carrier_vertex_count:
        raise ShapeError(f"field has {f.vertex_count} vertices, table carrier "
                         f"has {table.carrier_vertex_count}")
    gathered = f.values[table.rows]          # (N, V, C)
    n, v, c = gathered.shape
    return PatchSequence(gathered.reshape(n, v * c), v, c)


def scatter_sequence(seq: PatchSequence, table: PatchTable) -> FeatureField:
    """Inverse of extract_sequence, averaging vertices shared by patches."""
    n, v, c = seq.patch_count, seq.vertices_per_patch, seq.channels
    if table.rows.shape != (n, v):
        raise ShapeError("sequence/table shape mismatch")
    sums = np.zeros((table.carrier_vertex_count, c))
    counts = np.zeros(table.carrier_vertex_count)
    data = seq.data.reshape(n, v, c).astype(np.float64)
    np.add.at(sums, table.rows.ravel(), data.reshape(-1, c))
    np.add.at(counts, table.rows.ravel(), 1.0)
    if np.any(counts == 0):
        raise ValidationError("table does not cover every carrier vertex")
    return FeatureField((sums / counts[:, None]).astype(np.float32))


# ---------------------------------------------------------------------------
# formats: PATCHTABLE v1 <N> <V> + N rows of V indices; pairing files are
# lines of two element indices.


def save_patch_table(table: PatchTable, path) -> None:
    lines = [f"PATCHTABLE v1 {table.patch_count} {table.vertices_per_patch}"]
    for row in table.rows:
        lines.append(" ".join(str(int(i)) for i in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_patch_table(path, carrier_vertex_count: int) -> PatchTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["PATCHTABLE", "v1"]:
        raise ParseError(f"{path}:1: bad header")
    n, v = int(head[2]), int(head[3])
    if len(lines) < n + 1:
        raise ParseError(f"{path}: expected {n} rows")
    try:
        rows = np.array([[int(x) for x in lines[1 + i].split()] for i in range(n)],
                        dtype=np.int64)
    except ValueError:
        raise ParseError(f"{path}: bad vertex index") from None
    if n and rows.shape[1] != v:
        raise ParseError(f"{path}: row width != {v}")
    return PatchTable(rows.reshape(n, v), carrier_vertex_count)


def load_pairing(path) -> list[tuple[int, int]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 element indices")
            try:
                pairs.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad element index") from None
    return pairs
