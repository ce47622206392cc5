"""Planar triangle meshes: data model, structured generation, boundary topology and file I/O."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

# Triangles with signed area below this are treated as degenerate (m^2).
EPS_AREA = 1e-9


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class MeshParseError(MeshError):
    """Malformed mesh file."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class Topology:
    """Connectivity shared by every mesh with the same triangles and boundary loop.

    Derived tables (unique edges, triangle adjacency, vertex 1-rings) are built
    lazily and cached, so meshes produced by moving vertices reuse them.
    """

    def __init__(self, triangles: np.ndarray, boundary_loop: np.ndarray, n_vertices: int):
        self.triangles = _frozen(np.array(triangles, dtype=np.int64).reshape(-1, 3))
        self.boundary_loop = _frozen(np.array(boundary_loop, dtype=np.int64).ravel())
        self.n_vertices = int(n_vertices)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        b = self.boundary_loop
        return _frozen(np.column_stack([b, np.roll(b, -1)]))

    @cached_property
    def interior_ids(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self.boundary_loop] = False
        return _frozen(np.flatnonzero(mask))

    @cached_property
    def _edge_table(self) -> tuple[np.ndarray, np.ndarray]:
        tri = self.triangles
        # half-edges (a->b) of every triangle; local edge e is opposite vertex e
        he = np.concatenate([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]])
        key = np.sort(he, axis=1)
        edges, inverse = np.unique(key, axis=0, return_inverse=True)
        return edges, inverse.ravel()

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, (E, 2) with i < j."""
        return _frozen(self._edge_table[0])

    @cached_property
    def adjacent_triangle_pairs(self) -> np.ndarray:
        """Pairs of triangles sharing an edge, (P, 2)."""
        _, inverse = self._edge_table
        n_tri = len(self.triangles)
        owner = np.tile(np.arange(n_tri), 3)
        order = np.argsort(inverse, kind="stable")
        inv_sorted = inverse[order]
        same = inv_sorted[1:] == inv_sorted[:-1]
        pairs = np.column_stack([owner[order][:-1][same], owner[order][1:][same]])
        return _frozen(pairs.reshape(-1, 2))

    @cached_property
    def edge_use_counts(self) -> np.ndarray:
        _, inverse = self._edge_table
        return np.bincount(inverse, minlength=len(self.edges))

    @cached_property
    def neighbor_matrix(self):
        """Symmetric 0/1 sparse vertex adjacency (CSR)."""
        import scipy.sparse as sp

        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable planar triangulation.

    ``vertices`` is (N, 2); topology holds triangles (CCW) and the CCW boundary loop.
    Use :meth:`with_vertices` / :meth:`with_boundary` to obtain moved copies.
    """

    vertices: np.ndarray
    topology: Topology = field(repr=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 2)
        if len(v) != self.topology.n_vertices:
            raise MeshError(f"expected {self.topology.n_vertices} vertices, got {len(v)}")
        object.__setattr__(self, "vertices", _frozen(v))

    @classmethod
    def from_arrays(cls, vertices, triangles, boundary_loop, check: bool = True) -> "Mesh":
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        topo = Topology(triangles, boundary_loop, len(vertices))
        mesh = cls(vertices, topo)
        if check:
            validate_topology(mesh)
        return mesh

    @classmethod
    def from_triangles(cls, vertices, triangles) -> "Mesh":
        """Build a mesh extracting the boundary loop from the triangulation."""
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
        loop = extract_boundary_loop(vertices, triangles)
        return cls.from_arrays(vertices, triangles, loop)

    @property
    def triangles(self) -> np.ndarray:
        return self.topology.triangles

    @property
    def boundary_vertex_ids(self) -> np.ndarray:
        return self.topology.boundary_loop

    @property
    def boundary_edges(self) -> np.ndarray:
        return self.topology.boundary_edges

    @property
    def interior_vertex_ids(self) -> np.ndarray:
        return self.topology.interior_ids

    @property
    def boundary_coords(self) -> np.ndarray:
        return self.vertices[self.boundary_vertex_ids]

    @property
    def interior_coords(self) -> np.ndarray:
        return self.vertices[self.interior_vertex_ids]

    @property
    def counts(self) -> "MeshCounts":
        return MeshCounts(
            n_vertices=len(self.vertices),
            n_boundary=len(self.boundary_vertex_ids),
            n_interior=len(self.interior_vertex_ids),
            n_triangles=len(self.triangles),
        )

    def with_vertices(self, vertices) -> "Mesh":
        return Mesh(vertices, self.topology)

    def with_boundary(self, coords) -> "Mesh":
        v = self.vertices.copy()
        v[self.boundary_vertex_ids] = coords
        return Mesh(v, self.topology)

    def with_interior(self, coords) -> "Mesh":
        v = self.vertices.copy()
        v[self.interior_vertex_ids] = coords
        return Mesh(v, self.topology)

    def same_as(self, other: "Mesh") -> bool:
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
            and np.array_equal(self.boundary_vertex_ids, other.boundary_vertex_ids)
        )


@dataclass(frozen=True)
class MeshCounts:
    n_vertices: int
    n_boundary: int
    n_interior: int
    n_triangles: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Signed areas, positive for counterclockwise triangles."""
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                  - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))


def signed_areas(mesh: Mesh) -> np.ndarray:
    return triangle_areas(mesh.vertices, mesh.triangles)


def signed_area(mesh: Mesh) -> float:
    """Total signed area of the triangulation."""
    return float(np.sum(signed_areas(mesh)))


def shoelace_area(polygon: np.ndarray) -> float:
    """Signed area of a closed polygon given as (n, 2) vertices in order."""
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def extract_boundary_loop(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Counterclockwise boundary loop starting at the lexicographically smallest (x, y) vertex."""
    tri = np.asarray(triangles, dtype=np.int64)
    he = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    key = np.sort(he, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-manifold edge shared by more than two triangles")
    # half-edges on a single triangle, oriented with the domain on their left
    bnd = he[counts[inverse.ravel()] == 1]
    if len(bnd) == 0:
        raise MeshError("triangulation has no boundary")
    succ: dict[int, int] = {}
    for a, b in bnd:
        if int(a) in succ:
            raise MeshError(f"boundary is not a single simple loop at vertex {int(a)}")
        succ[int(a)] = int(b)
    ids = np.fromiter(succ.keys(), dtype=np.int64)
    start = int(ids[np.lexsort((vertices[ids, 1], vertices[ids, 0]))[0]])
    loop = [start]
    cur = succ[start]
    while cur != start:
        loop.append(cur)
        if len(loop) > len(succ):
            raise MeshError("boundary edges do not close into a loop")
        cur = succ[cur]
    if len(loop) != len(succ):
        raise MeshError(f"boundary has multiple loops ({len(loop)} of {len(succ)} edges in the first)")
    return np.asarray(loop, dtype=np.int64)


def validate_topology(mesh: Mesh) -> None:
    """Check index ranges, boundary loop consistency and the Euler relation."""
    topo = mesh.topology
    n = topo.n_vertices
    tri = topo.triangles
    if tri.size and (tri.min() < 0 or tri.max() >= n):
        bad = int(np.flatnonzero((tri < 0).any(axis=1) | (tri >= n).any(axis=1))[0])
        raise MeshError(f"triangle {bad} has a vertex index out of range [0, {n})")
    loop = topo.boundary_loop
    if loop.size and (loop.min() < 0 or loop.max() >= n):
        raise MeshError(f"boundary index out of range [0, {n})")
    if len(np.unique(loop)) != len(loop):
        raise MeshError("boundary loop visits a vertex more than once")
    if np.any(topo.edge_use_counts > 2):
        raise MeshError("non-manifold edge shared by more than two triangles")
    single = topo.edges[topo.edge_use_counts == 1]
    loop_edges = np.sort(topo.boundary_edges, axis=1)
    if len(single) != len(loop_edges) or not np.array_equal(
        np.unique(loop_edges, axis=0), single
    ):
        raise MeshError("boundary loop does not match the triangulation's boundary edges")
    used = np.zeros(n, dtype=bool)
    used[tri.ravel()] = True
    if not used.all():
        raise MeshError(f"vertex {int(np.flatnonzero(~used)[0])} is not used by any triangle")
    euler = n - len(topo.edges) + len(tri) + 1
    if euler != 2:
        raise MeshError(f"Euler characteristic V - E + F = {euler}, expected 2")


def check_orientation(mesh: Mesh, eps: float = 0.0) -> None:
    """Raise MeshError unless every triangle has signed area > eps."""
    areas = signed_areas(mesh)
    bad = np.flatnonzero(areas <= eps)
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} has non-positive signed area {areas[bad[0]]:.3e}")
    if shoelace_area(mesh.boundary_coords) <= 0:
        raise MeshError("boundary loop is not counterclockwise")


def generate_rect_mesh(width: float, height: float, nx: int, ny: int) -> Mesh:
    """Structured rectangle mesh on [0, width] x [0, height].

    Each cell is split along a diagonal whose direction alternates with the
    cell parity, giving a union-jack pattern.
    """
    if not (width > 0 and height > 0):
        raise ValueError(f"width and height must be positive, got {width}, {height}")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError(f"nx and ny must be integers >= 1, got {nx}, {ny}")
    nx, ny = int(nx), int(ny)
    xs = np.array([width * i / nx for i in range(nx + 1)])
    ys = np.array([height * j / ny for j in range(ny + 1)])
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    triangles = np.asarray(tris, dtype=np.int64)
    mesh = Mesh.from_triangles(vertices, triangles)
    check_orientation(mesh)
    return mesh


def segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Proper or touching intersection test for segment arrays (broadcasting)."""

    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (
            c[..., 0] - a[..., 0]
        )

    d1 = orient(q1, q2, p1)
    d2 = orient(q1, q2, p2)
    d3 = orient(p1, p2, q1)
    d4 = orient(p1, p2, q2)
    crossing = (d1 * d2 <= 0) & (d3 * d4 <= 0)
    collinear = (d1 == 0) & (d2 == 0)
    # collinear segments intersect only if their bounding boxes overlap
    boxes = np.ones_like(crossing)
    for ax in (0, 1):
        lo_p = np.minimum(p1[..., ax], p2[..., ax])
        hi_p = np.maximum(p1[..., ax], p2[..., ax])
        lo_q = np.minimum(q1[..., ax], q2[..., ax])
        hi_q = np.maximum(q1[..., ax], q2[..., ax])
        boxes = boxes & (lo_p <= hi_q) & (lo_q <= hi_p)
    return np.where(collinear, boxes, crossing)


def boundary_self_intersections(coords: np.ndarray) -> list[tuple[int, int]]:
    """Pairs of non-adjacent edges (by loop position) of a closed polygon that intersect."""
    n = len(coords)
    a = coords
    b = np.roll(coords, -1, axis=0)
    hit = segments_intersect(a[:, None], b[:, None], a[None, :], b[None, :])
    i, j = np.triu_indices(n, k=2)
    adjacent = (i == 0) & (j == n - 1)
    mask = hit[i, j] & ~adjacent
    return [(int(x), int(y)) for x, y in zip(i[mask], j[mask])]


def boundary_is_simple(mesh: Mesh) -> bool:
    return not boundary_self_intersections(mesh.boundary_coords)


def write_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text ``mesh2d 1`` format (atomically)."""
    lines = ["mesh2d 1"]
    lines += [f"v {x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += [f"t {i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append("b " + " ".join(str(i) for i in mesh.boundary_vertex_ids.tolist()))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    path = str(path)
    verts, tris, loop = [], [], None
    with open(path) as fh:
        raw = fh.read().splitlines()
    if not raw or raw[0].split() != ["mesh2d", "1"]:
        raise MeshParseError("missing 'mesh2d 1' header", line=1, path=path)
    for lineno, line in enumerate(raw[1:], start=2):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag, args = parts[0], parts[1:]
        try:
            if tag == "v":
                if len(args) != 2:
                    raise ValueError("vertex line needs 2 coordinates")
                xy = [float(a) for a in args]
                if not all(np.isfinite(xy)):
                    raise ValueError("non-finite coordinate")
                verts.append(xy)
            elif tag == "t":
                if len(args) != 3:
                    raise ValueError("triangle line needs 3 indices")
                tris.append([int(a) for a in args])
            elif tag == "b":
                if loop is not None:
                    raise ValueError("duplicate boundary line")
                loop = [int(a) for a in args]
            else:
                raise ValueError(f"unknown record type {tag!r}")
        except ValueError as exc:
            raise MeshParseError(str(exc), line=lineno, path=path) from None
        if tag in "tb":
            idx = tris[-1] if tag == "t" else loop
            n = len(verts)
            if any(i < 0 or i >= n for i in idx):
                raise MeshParseError(
                    f"vertex index out of range (only {n} vertices defined so far)",
                    line=lineno,
                    path=path,
                )
    if loop is None:
        raise MeshParseError("missing boundary line", path=path)
    if not tris:
        raise MeshParseError("no triangles", path=path)
    try:
        mesh = Mesh.from_arrays(np.array(verts), np.array(tris), np.array(loop))
        check_orientation(mesh)
    except MeshError as exc:
        raise MeshParseError(str(exc), path=path) from None
    return mesh


def write_obj(mesh: Mesh, path) -> None:
    """Wavefront OBJ export with z = 0."""
    lines = [f"v {x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.triangles.tolist()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
