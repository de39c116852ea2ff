"""Triangle meshes, plane slicing, slice centroids and per-bone nearest-vertex queries."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

#: default slice spacing along the slicing axis (m)
SLICE_SPACING = 0.01
#: endpoint merge tolerance when stitching intersection segments (m)
STITCH_TOL = 1e-9
#: relative inward nudge of the first/last slicing plane
END_NUDGE = 1e-6
#: total enclosed area below which a contour counts as degenerate (m^2)
MIN_AREA = 1e-12


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : (V, 3) array_like
        Vertex positions in meters.
    faces : (F, 3) array_like of int
        Vertex-index triples.
    name : str
        Label (bone or muscle name).
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = "mesh"

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f) == 0:
            raise GeometryError(f"{self.name}: mesh has no faces")
        if not np.all(np.isfinite(v)):
            raise GeometryError(f"{self.name}: non-finite vertex coordinates")
        if f.min() < 0 or f.max() >= len(v):
            raise GeometryError(f"{self.name}: face index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def extent(self, axis) -> tuple[float, float]:
        d = self.vertices @ np.asarray(axis, dtype=float)
        return float(d.min()), float(d.max())

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def transformed(self, rotation=None, translation=None, name=None) -> "TriMesh":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=float)
        return TriMesh(v, self.faces, name or self.name)


@dataclass(frozen=True)
class SliceContour:
    """Intersection of a mesh with the plane ``axis . p == plane_offset``."""

    plane_offset: float
    axis: np.ndarray
    loops: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ax = np.asarray(self.axis, dtype=float)
        loops = tuple(np.asarray(lp, dtype=float).reshape(-1, 3) for lp in self.loops)
        for lp in loops:
            if len(lp) < 3:
                raise GeometryError("contour loop needs at least 3 points")
        object.__setattr__(self, "axis", ax)
        object.__setattr__(self, "loops", loops)

    def points(self) -> np.ndarray:
        return np.vstack(self.loops)


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise GeometryError("zero-length axis")
    return v / n


def principal_axis(mesh: TriMesh) -> np.ndarray:
    """Largest-variance direction of the vertex cloud, sign fixed so the
    largest-magnitude component is positive."""
    x = mesh.vertices - mesh.vertices.mean(axis=0)
    w, vecs = np.linalg.eigh(x.T @ x)
    ax = vecs[:, np.argmax(w)]
    if ax[np.argmax(np.abs(ax))] < 0:
        ax = -ax
    return ax


def plane_basis(axis) -> tuple[np.ndarray, np.ndarray]:
    """Right-handed orthonormal pair (e1, e2) spanning the plane normal to ``axis``."""
    n = normalize(axis)
    helper = np.eye(3)[np.argmin(np.abs(n))]
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return e1, e2


def default_slice_count(extent: float, spacing: float = SLICE_SPACING) -> int:
    return max(2, int(math.ceil(extent / spacing)))


def _stitch(keys_a, keys_b, pts_a, pts_b, forward):
    """Chain undirected segments into loops.

    Returns a list of (point array, closed_naturally) pairs. Each loop is
    oriented by majority vote of the per-segment ``forward`` flags, which say
    whether a->b runs counter-clockwise about the slicing axis.
    """
    adj: dict = {}
    pos: dict = {}
    for i, (ka, kb) in enumerate(zip(keys_a, keys_b)):
        adj.setdefault(ka, []).append((kb, i, True))
        adj.setdefault(kb, []).append((ka, i, False))
        pos[ka] = pts_a[i]
        pos[kb] = pts_b[i]

    used = np.zeros(len(keys_a), dtype=bool)
    loops = []

    def walk(start):
        chain = [start]
        votes = 0
        cur = start
        while True:
            nxt = None
            for k, i, fwd in adj[cur]:
                if not used[i]:
                    used[i] = True
                    votes += 1 if fwd == forward[i] else -1
                    nxt = k
                    break
            if nxt is None or nxt == start:
                return chain, votes, nxt == start
            chain.append(nxt)
            cur = nxt

    # open chains first, starting from their free ends
    ends = sorted((k for k, nb in adj.items() if len(nb) % 2 == 1), key=repr)
    for k in ends:
        if any(not used[i] for _, i, _ in adj[k]):
            chain, votes, closed = walk(k)
            loops.append((chain, votes, closed))
    for i in range(len(keys_a)):
        if not used[i]:
            chain, votes, closed = walk(keys_a[i])
            loops.append((chain, votes, closed))

    out = []
    for chain, votes, closed in loops:
        if len(chain) < 3:
            continue
        p = np.array([pos[k] for k in chain])
        if votes < 0:
            p = p[::-1]
        out.append((p, closed))
    return out


def section(mesh: TriMesh, axis, offset: float) -> SliceContour | None:
    """Intersect ``mesh`` with the plane ``axis . p == offset``.

    Returns None when the plane misses the mesh. Crossing points are keyed by
    the mesh edge (or on-plane vertex) that produced them, so stitching is
    topological; an additional merge at ``STITCH_TOL`` handles meshes with
    duplicated vertices.
    """
    ax = normalize(axis)
    v = mesh.vertices
    d = v @ ax - offset
    # on-plane vertices count as "above" so every crossing has one strictly
    # negative endpoint
    above = d >= 0
    f = mesh.faces
    n_above = above[f].sum(axis=1)
    hit = np.nonzero((n_above == 1) | (n_above == 2))[0]
    if len(hit) == 0:
        return None

    normals = mesh.face_normals()[hit]
    seg_dir = np.cross(ax, normals)

    keys_a, keys_b, pts_a, pts_b, dirs = [], [], [], [], []
    for fi, sd in zip(hit, seg_dir):
        tri = f[fi]
        crossing = []
        for j in range(3):
            i0, i1 = int(tri[j]), int(tri[(j + 1) % 3])
            if above[i0] == above[i1]:
                continue
            lo, hi = (i0, i1) if not above[i0] else (i1, i0)
            if d[hi] == 0.0:
                key = ("v", hi)
                p = v[hi]
            else:
                t = d[lo] / (d[lo] - d[hi])
                key = ("e", min(i0, i1), max(i0, i1))
                p = v[lo] + t * (v[hi] - v[lo])
            crossing.append((key, p))
        (ka, pa), (kb, pb) = crossing
        if ka == kb:
            continue
        keys_a.append(ka)
        keys_b.append(kb)
        pts_a.append(pa)
        pts_b.append(pb)
        dirs.append(sd)

    if not keys_a:
        return None

    # merge coincident points coming from duplicated vertices
    allp = np.array(pts_a + pts_b)
    grid = np.round(allp / STITCH_TOL).astype(np.int64)
    canon: dict = {}
    remap = {}
    for k, g in zip(keys_a + keys_b, map(tuple, grid)):
        remap[k] = canon.setdefault(g, k)
    keys_a = [remap[k] for k in keys_a]
    keys_b = [remap[k] for k in keys_b]
    keep = [i for i in range(len(keys_a)) if keys_a[i] != keys_b[i]]

    pa = np.array(pts_a)[keep]
    pb = np.array(pts_b)[keep]
    forward = np.einsum("ij,ij->i", pb - pa, np.array(dirs)[keep]) > 0
    stitched = _stitch([keys_a[i] for i in keep], [keys_b[i] for i in keep], pa, pb, forward)
    if not stitched:
        return None

    loops = []
    n_open = 0
    for p, closed in stitched:
        # project exactly onto the plane
        p = p - np.outer(p @ ax - offset, ax)
        loops.append(p)
        n_open += not closed
    meta = {"open_chains": n_open} if n_open else {}
    return SliceContour(float(offset), ax, tuple(loops), meta)


def slice_offsets(mesh: TriMesh, axis, n_slices: int) -> np.ndarray:
    lo, hi = mesh.extent(normalize(axis))
    extent = hi - lo
    if extent < 1e-9:
        raise GeometryError("axis-degenerate mesh")
    nudge = END_NUDGE * extent
    return np.linspace(lo + nudge, hi - nudge, n_slices)


def slice_mesh(mesh: TriMesh, axis, n_slices: int | None = None) -> list[SliceContour]:
    """Slice ``mesh`` with ``n_slices`` equally spaced planes normal to ``axis``.

    Planes span the mesh extent along the axis, with the end planes nudged
    inward so they are guaranteed to cut the surface. Planes that miss the
    mesh are dropped.
    """
    ax = normalize(axis)
    if n_slices is None:
        lo, hi = mesh.extent(ax)
        n_slices = default_slice_count(hi - lo)
    if n_slices < 2:
        raise GeometryError("n_slices must be >= 2")
    out = []
    for off in slice_offsets(mesh, ax, n_slices):
        c = section(mesh, ax, float(off))
        if c is not None:
            out.append(c)
    return out


def _loop_moments(p2: np.ndarray) -> tuple[float, np.ndarray]:
    x, y = p2[:, 0], p2[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    first = np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / 6.0
    return area, first


def centroid_with_area(contour: SliceContour) -> tuple[np.ndarray, float, bool]:
    """Area-weighted centroid of the region bounded by the contour loops.

    Returns ``(point, signed_area, degenerate)``. Loops are combined by signed
    area, so a clockwise inner loop subtracts a hole. When the total area is
    below ``MIN_AREA`` the vertex average is returned and ``degenerate`` is set.
    """
    ax = contour.axis
    e1, e2 = plane_basis(ax)
    pts = contour.points()
    # work relative to the vertex mean to limit cancellation
    origin = pts.mean(axis=0)
    area = 0.0
    first = np.zeros(2)
    for lp in contour.loops:
        rel = lp - origin
        a, m = _loop_moments(np.column_stack([rel @ e1, rel @ e2]))
        area += a
        first += m
    if abs(area) < MIN_AREA:
        return origin, area, True
    c2 = first / area
    c = origin + c2[0] * e1 + c2[1] * e2
    # snap onto the plane
    c = c - (c @ ax - contour.plane_offset) * ax
    return c, area, False


def contour_centroid(contour: SliceContour) -> np.ndarray:
    return centroid_with_area(contour)[0]


class BoneIndex:
    """Per-bone kd-trees over bone vertices.

    Distances are to vertices, not to triangle surfaces.
    """

    def __init__(self, skeleton):
        skeleton = list(skeleton)
        if not skeleton:
            raise GeometryError("empty skeleton")
        names = [b.name for b in skeleton]
        dup = sorted({n for n in names if names.count(n) > 1})
        if dup:
            raise GeometryError(f"duplicate bone name(s): {', '.join(dup)}")
        order = sorted(range(len(skeleton)), key=lambda i: names[i])
        self.names = tuple(names[i] for i in order)
        self._trees = tuple(cKDTree(skeleton[i].vertices) for i in order)
        self._points = tuple(skeleton[i].vertices for i in order)

    def __len__(self):
        return len(self.names)

    def nearest(self, bone: str, point) -> tuple[float, np.ndarray]:
        i = self.names.index(bone)
        dist, j = self._trees[i].query(np.asarray(point, dtype=float))
        return float(dist), self._points[i][j]

    def distances(self, point) -> np.ndarray:
        p = np.asarray(point, dtype=float)
        return np.array([t.query(p)[0] for t in self._trees])

    def closest(self, point) -> tuple[str, float]:
        d = self.distances(point)
        # names are sorted, so argmin resolves ties to the smallest name
        i = int(np.argmin(d))
        return self.names[i], float(d[i])


def build_bone_index(skeleton) -> BoneIndex:
    return BoneIndex(skeleton)


def closest_bone(index: BoneIndex, point) -> tuple[str, float]:
    return index.closest(point)


# -- mesh I/O -----------------------------------------------------------------


def load_obj(path, name=None) -> TriMesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated."""
    path = Path(path)
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    k = int(tok.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
    return TriMesh(np.array(verts), np.array(faces), name or path.stem)


def save_obj(mesh: TriMesh, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"o {mesh.name}\n")
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


_STL_RECORD = np.dtype([("normal", "<f4", 3), ("tri", "<f4", (3, 3)), ("attr", "<u2")])


def load_stl(path, name=None) -> TriMesh:
    """Read a binary STL, merging bitwise-identical vertices."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 84:
        raise GeometryError(f"{path}: truncated STL")
    (n,) = struct.unpack("<I", data[80:84])
    rec = np.frombuffer(data, dtype=_STL_RECORD, count=n, offset=84)
    tri = rec["tri"].astype(float).reshape(-1, 3)
    verts, inverse = np.unique(tri, axis=0, return_inverse=True)
    return TriMesh(verts, inverse.reshape(-1, 3), name or path.stem)


def save_stl(mesh: TriMesh, path) -> None:
    rec = np.zeros(len(mesh.faces), dtype=_STL_RECORD)
    rec["tri"] = mesh.vertices[mesh.faces]
    n = mesh.face_normals()
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    rec["normal"] = n / np.where(norm == 0, 1, norm)
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", len(rec)))
        fh.write(rec.tobytes())


def load_mesh(path, name=None) -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return load_obj(path, name)
    if suffix == ".stl":
        return load_stl(path, name)
    raise GeometryError(f"unsupported mesh format: {path.suffix}")


def dump_slices(contours, path=None) -> dict:
    """Slice/centroid dump ``{axis, offsets, centroids}``."""
    if not contours:
        raise GeometryError("no contours to dump")
    doc = {
        "axis": [float(x) for x in contours[0].axis],
        "offsets": [c.plane_offset for c in contours],
        "centroids": [[float(x) for x in contour_centroid(c)] for c in contours],
    }
    if path is not None:
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


# -- primitive meshes (fixtures, tests, demo) ---------------------------------


def make_box(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), name="box") -> TriMesh:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    # outward-facing, counter-clockwise
    faces = [
        [0, 2, 3], [0, 3, 1],  # z = lo
        [4, 5, 7], [4, 7, 6],  # z = hi
        [0, 1, 5], [0, 5, 4],  # y = lo
        [2, 6, 7], [2, 7, 3],  # y = hi
        [0, 4, 6], [0, 6, 2],  # x = lo
        [1, 3, 7], [1, 7, 5],  # x = hi
    ]
    return TriMesh(corners, faces, name)


def _grid_faces(n_rings, n_around, wrap_rings):
    faces = []
    rings = n_rings if wrap_rings else n_rings - 1
    for i in range(rings):
        i2 = (i + 1) % n_rings
        for j in range(n_around):
            j2 = (j + 1) % n_around
            a, b = i * n_around + j, i * n_around + j2
            c, d = i2 * n_around + j2, i2 * n_around + j
            faces.append([a, b, c])
            faces.append([a, c, d])
    return faces


def make_uv_sphere(radius=1.0, n_lat=32, n_lon=64, center=(0.0, 0.0, 0.0), name="sphere") -> TriMesh:
    """UV sphere; an even ``n_lat`` puts a vertex ring on the equator."""
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi), np.broadcast_to(ct, (len(theta), n_lon))], axis=-1)
    verts = [ring.reshape(-1, 3)]
    faces = _grid_faces(len(theta), n_lon, wrap_rings=False)
    # ring 0 is at the north pole side (cos > 0); rings run southwards
    faces = [[a, c, b] for a, b, c in faces]
    nv = len(theta) * n_lon
    north, south = nv, nv + 1
    verts.append([[0, 0, 1], [0, 0, -1]])
    last = (len(theta) - 1) * n_lon
    for j in range(n_lon):
        j2 = (j + 1) % n_lon
        faces.append([north, j, j2])
        faces.append([south, last + j2, last + j])
    v = np.vstack(verts) * radius + np.asarray(center, dtype=float)
    return TriMesh(v, faces, name)


def make_torus(major=1.0, minor=0.25, n_major=96, n_minor=32, name="torus") -> TriMesh:
    u = np.linspace(0, 2 * np.pi, n_major, endpoint=False)[:, None]
    w = np.linspace(0, 2 * np.pi, n_minor, endpoint=False)[None, :]
    r = major + minor * np.cos(w) + 0.0 * u
    verts = np.stack([r * np.cos(u), r * np.sin(u), np.broadcast_to(minor * np.sin(w), r.shape)], axis=-1)
    faces = [[a, c, b] for a, b, c in _grid_faces(n_major, n_minor, wrap_rings=True)]
    return TriMesh(verts.reshape(-1, 3), faces, name)


def make_cylinder(radius=0.02, length=0.3, n_around=24, n_rings=31, start=(0.0, 0.0, 0.0),
                  axis=(0.0, 0.0, 1.0), name="cylinder") -> TriMesh:
    """Closed cylinder from ``start`` along ``axis``; ends capped with a centre vertex."""
    ax = normalize(axis)
    e1, e2 = plane_basis(ax)
    t = np.linspace(0.0, length, n_rings)
    a = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
    circ = radius * (np.cos(a)[:, None] * e1 + np.sin(a)[:, None] * e2)
    verts = (t[:, None, None] * ax + circ[None]).reshape(-1, 3)
    faces = _grid_faces(n_rings, n_around, wrap_rings=False)
    nv = len(verts)
    caps = np.array([np.zeros(3), length * ax])
    bottom, top = nv, nv + 1
    last = (n_rings - 1) * n_around
    for j in range(n_around):
        j2 = (j + 1) % n_around
        faces.append([bottom, j2, j])
        faces.append([top, last + j, last + j2])
    v = np.vstack([verts, caps]) + np.asarray(start, dtype=float)
    return TriMesh(v, faces, name)
