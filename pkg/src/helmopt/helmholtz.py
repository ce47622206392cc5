"""P1 finite elements for the 2D Helmholtz equation with an admittance wall.

Strong form: lap(p) + k^2 p = -f in the domain, dp/dn + i k beta p = 0 on the wall.
The discrete system is K p = f with K = S - k^2 M + i k beta B, where S, M are
the stiffness and consistent mass matrices and B is the boundary-edge mass matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import EPS_AREA, Mesh, atomic_write_text, signed_areas

logger = logging.getLogger(__name__)

DEFAULT_SOUND_SPEED = 343.0
RESIDUAL_TOL = 1e-10

# Degree-2 rule: barycentric points (2/3, 1/6, 1/6) and permutations, equal weights.
_BARY3 = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_W3 = np.full(3, 1 / 3)

# Degree-4 six-point rule (Dunavant), used only for error norms.
_A4, _B4 = 0.445948490915965, 0.091576213509771
_WA4, _WB4 = 0.223381589678011, 0.109951743655322
_BARY6 = np.array(
    [
        [1 - 2 * _A4, _A4, _A4],
        [_A4, 1 - 2 * _A4, _A4],
        [_A4, _A4, 1 - 2 * _A4],
        [1 - 2 * _B4, _B4, _B4],
        [_B4, 1 - 2 * _B4, _B4],
        [_B4, _B4, 1 - 2 * _B4],
    ]
)
_W6 = np.array([_WA4] * 3 + [_WB4] * 3)

# Two-point Gauss-Legendre on [0, 1] for boundary edges.
_G2 = np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)])


class SolverError(RuntimeError):
    """Factorization or solve failure; carries a 1-norm condition estimate when available."""

    def __init__(self, message: str, condition_estimate: float | None = None):
        self.condition_estimate = condition_estimate
        if condition_estimate is not None:
            message = f"{message} (condition estimate {condition_estimate:.3e})"
        super().__init__(message)


class DegenerateMeshError(ValueError):
    def __init__(self, triangle: int, area: float):
        self.triangle = triangle
        self.area = area
        super().__init__(f"triangle {triangle} is degenerate (signed area {area:.3e})")


class OutsideDomainError(ValueError):
    def __init__(self, points: np.ndarray):
        self.points = np.atleast_2d(points)
        super().__init__(f"{len(self.points)} point(s) outside the mesh, first at {self.points[0].tolist()}")


@dataclass(frozen=True)
class GaussianSource:
    center: tuple[float, float]
    sigma: float
    amplitude: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def __call__(self, x) -> np.ndarray:
        return eval_source(self, x)


@dataclass(frozen=True)
class HelmholtzProblem:
    frequency: float
    source: GaussianSource
    admittance: complex
    sound_speed: float = DEFAULT_SOUND_SPEED

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError(f"frequency must be positive, got {self.frequency}")
        if not self.sound_speed > 0:
            raise ValueError(f"sound_speed must be positive, got {self.sound_speed}")
        beta = complex(self.admittance)
        if not np.isfinite(beta):
            raise ValueError(f"admittance must be finite, got {beta}")
        object.__setattr__(self, "admittance", beta)

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi * self.frequency / self.sound_speed

    def with_admittance(self, beta: complex) -> "HelmholtzProblem":
        return HelmholtzProblem(self.frequency, self.source, complex(beta), self.sound_speed)


def eval_source(source: GaussianSource, x) -> np.ndarray | float:
    """A * exp(-|x - s|^2 / (2 sigma^2)); accepts a single point or an (n, 2) array."""
    x = np.asarray(x, dtype=float)
    d2 = np.sum((x - np.asarray(source.center, dtype=float)) ** 2, axis=-1)
    val = source.amplitude * np.exp(-d2 / (2 * source.sigma**2))
    return float(val) if np.ndim(val) == 0 else val


def _gradients(mesh: Mesh, check: bool = True):
    """P1 basis gradients per triangle, (T, 3, 2), and areas (T,)."""
    v = mesh.vertices
    tri = mesh.triangles
    areas = signed_areas(mesh)
    if check:
        bad = np.flatnonzero(areas < EPS_AREA)
        if len(bad):
            raise DegenerateMeshError(int(bad[0]), float(areas[bad[0]]))
    p0, p1, p2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    # grad(phi_a) = rot90(edge opposite a) / (2 area)
    e0 = p2 - p1
    e1 = p0 - p2
    e2 = p1 - p0
    g = np.stack([e0, e1, e2], axis=1)
    grads = np.stack([-g[..., 1], g[..., 0]], axis=-1) / (2 * areas[:, None, None])
    return grads, areas


def _scatter(tri: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


@dataclass(frozen=True, eq=False)
class FEOperators:
    """Real sparse FE matrices of a mesh; independent of frequency and admittance."""

    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    boundary_mass: sp.csr_matrix

    def system_matrix(self, k: float, beta: complex) -> sp.csc_matrix:
        K = self.stiffness - k**2 * self.mass + (1j * k * beta) * self.boundary_mass
        return sp.csc_matrix(K, dtype=np.complex128)


def assemble_operators(mesh: Mesh) -> FEOperators:
    grads, areas = _gradients(mesh)
    n = len(mesh.vertices)
    tri = mesh.triangles
    k_loc = np.einsum("tad,tbd->tab", grads, grads) * areas[:, None, None]
    m_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    m_loc = areas[:, None, None] * m_ref[None]
    S = _scatter(tri, k_loc, n)
    M = _scatter(tri, m_loc, n)
    e = mesh.boundary_edges
    lengths = np.linalg.norm(mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]], axis=1)
    b_ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    b_loc = lengths[:, None, None] * b_ref[None]
    rows = np.repeat(e, 2, axis=1).ravel()
    cols = np.tile(e, (1, 2)).ravel()
    B = sp.csr_matrix((b_loc.ravel(), (rows, cols)), shape=(n, n))
    return FEOperators(S, M, B)


def quadrature_points(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Three-point degree-2 rule: points (3T, 2) and weights (3T,), triangle-major."""
    pts, w, _, _ = _quadrature(mesh, _BARY3, _W3)
    return pts, w


def _quadrature(mesh: Mesh, bary: np.ndarray, weights: np.ndarray):
    v = mesh.vertices
    tri = mesh.triangles
    corners = v[tri]  # (T, 3, 2)
    pts = np.einsum("qa,tad->tqd", bary, corners).reshape(-1, 2)
    areas = signed_areas(mesh)
    w = (areas[:, None] * weights[None, :]).ravel()
    tri_ids = np.repeat(np.arange(len(tri)), len(weights))
    bary_all = np.tile(bary, (len(tri), 1))
    return pts, w, tri_ids, bary_all


def load_vector(mesh: Mesh, func) -> np.ndarray:
    """f_j = integral of func * phi_j over the domain, using the 3-point rule."""
    pts, w, tri_ids, bary = _quadrature(mesh, _BARY3, _W3)
    vals = np.asarray(func(pts)) * w
    n = len(mesh.vertices)
    nodes = mesh.triangles[tri_ids]
    out = np.zeros(n, dtype=np.result_type(vals, float))
    np.add.at(out, nodes.ravel(), (vals[:, None] * bary).ravel())
    return out


def boundary_load(mesh: Mesh, func) -> np.ndarray:
    """g_j = integral of func * phi_j over the boundary (two-point Gauss per edge)."""
    v = mesh.vertices
    e = mesh.boundary_edges
    a, b = v[e[:, 0]], v[e[:, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    out = np.zeros(len(v), dtype=complex)
    for s in _G2:
        x = (1 - s) * a + s * b
        g = np.asarray(func(x)) * lengths * 0.5
        np.add.at(out, e[:, 0], g * (1 - s))
        np.add.at(out, e[:, 1], g * s)
    return out


@dataclass(frozen=True, eq=False)
class ComplexSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray
    mesh: Mesh | None = None
    operators: FEOperators | None = None
    wavenumber: float | None = None


def assemble(mesh: Mesh, problem: HelmholtzProblem, operators: FEOperators | None = None) -> ComplexSystem:
    ops = operators if operators is not None else assemble_operators(mesh)
    k = problem.wavenumber
    K = ops.system_matrix(k, problem.admittance)
    f = load_vector(mesh, problem.source).astype(np.complex128)
    return ComplexSystem(K, f, mesh, ops, k)


class Factorization:
    """Sparse complex LU of a system matrix, reusable for forward and adjoint solves."""

    def __init__(self, matrix):
        self.matrix = sp.csc_matrix(matrix, dtype=np.complex128)
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}", np.inf) from None

    def solve(self, rhs, trans: str = "N") -> np.ndarray:
        rhs = np.asarray(rhs, dtype=np.complex128)
        x = self._lu.solve(rhs, trans=trans)
        A = self.matrix if trans == "N" else self.matrix.T
        r = rhs - A @ x
        nb = np.linalg.norm(rhs)
        if nb == 0:
            return x
        rel = np.linalg.norm(r) / nb
        # one step of iterative refinement before giving up
        if rel > RESIDUAL_TOL:
            x = x + self._lu.solve(r, trans=trans)
            rel = np.linalg.norm(rhs - A @ x) / nb
        if not np.all(np.isfinite(x)) or rel > RESIDUAL_TOL:
            raise SolverError(f"solve residual {rel:.3e} exceeds {RESIDUAL_TOL:g}", self.condition_estimate())
        return x

    def condition_estimate(self) -> float:
        n = self.matrix.shape[0]
        inv = spla.LinearOperator(
            (n, n),
            matvec=lambda b: self._lu.solve(np.asarray(b, dtype=complex).ravel()),
            rmatvec=lambda b: self._lu.solve(np.asarray(b, dtype=complex).ravel(), trans="H"),
            dtype=np.complex128,
        )
        try:
            inv_norm = spla.onenormest(inv)
        except Exception:  # estimator itself can fail on garbage factors
            return float("inf")
        return float(spla.norm(self.matrix, 1) * inv_norm)


@dataclass(frozen=True, eq=False)
class PressureField:
    mesh: Mesh | None
    nodal: np.ndarray

    def __post_init__(self):
        if self.mesh is not None and len(self.nodal) != len(self.mesh.vertices):
            raise ValueError("nodal vector length does not match the vertex count")


def solve(system: ComplexSystem, factorization: Factorization | None = None) -> PressureField:
    lu = factorization if factorization is not None else Factorization(system.matrix)
    return PressureField(system.mesh, lu.solve(system.rhs))


def relative_residual(system: ComplexSystem, field: PressureField) -> float:
    r = system.matrix @ field.nodal - system.rhs
    nb = np.linalg.norm(system.rhs)
    return float(np.linalg.norm(r) / nb) if nb > 0 else float(np.linalg.norm(r))


def locate_points(mesh: Mesh, points, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Containing triangle and barycentric coordinates for each point.

    Raises OutsideDomainError for points not inside any triangle.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    v = mesh.vertices
    tri = mesh.triangles
    p0 = v[tri[:, 0]]
    d1 = v[tri[:, 1]] - p0
    d2 = v[tri[:, 2]] - p0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    tri_ids = np.empty(len(pts), dtype=np.int64)
    bary = np.empty((len(pts), 3))
    for start in range(0, len(pts), 256):
        chunk = pts[start:start + 256]
        r = chunk[:, None, :] - p0[None]
        l1 = (r[..., 0] * d2[None, :, 1] - r[..., 1] * d2[None, :, 0]) / det
        l2 = (d1[None, :, 0] * r[..., 1] - d1[None, :, 1] * r[..., 0]) / det
        l0 = 1 - l1 - l2
        worst = np.minimum(np.minimum(l0, l1), l2)
        best = np.argmax(worst, axis=1)
        ok = worst[np.arange(len(chunk)), best] >= -tol
        if not ok.all():
            raise OutsideDomainError(chunk[~ok])
        rows = np.arange(len(chunk))
        tri_ids[start:start + len(chunk)] = best
        bary[start:start + len(chunk)] = np.column_stack(
            [l0[rows, best], l1[rows, best], l2[rows, best]]
        )
    return tri_ids, bary


def interpolation_matrix(mesh: Mesh, points) -> sp.csr_matrix:
    """Sparse (n_points, n_vertices) matrix P with P @ nodal = P1 interpolant at the points."""
    tri_ids, bary = locate_points(mesh, points)
    rows = np.repeat(np.arange(len(tri_ids)), 3)
    cols = mesh.triangles[tri_ids].ravel()
    return sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(len(tri_ids), len(mesh.vertices)))


def eval_field(field: PressureField, x) -> complex | np.ndarray:
    pts = np.asarray(x, dtype=float)
    vals = interpolation_matrix(field.mesh, pts) @ field.nodal
    return complex(vals[0]) if pts.ndim == 1 else vals


def acoustic_energy(field: PressureField) -> float:
    """Integral of |p|^2 with the 3-point rule applied to the P1 interpolant."""
    mesh = field.mesh
    _, w, tri_ids, bary = _quadrature(mesh, _BARY3, _W3)
    vals = np.sum(field.nodal[mesh.triangles[tri_ids]] * bary, axis=1)
    return float(np.sum(w * np.abs(vals) ** 2))


def l2_error(field: PressureField, exact) -> float:
    """L2 norm of (p_h - exact) using a degree-4 rule."""
    mesh = field.mesh
    pts, w, tri_ids, bary = _quadrature(mesh, _BARY6, _W6)
    ph = np.sum(field.nodal[mesh.triangles[tri_ids]] * bary, axis=1)
    return float(np.sqrt(np.sum(w * np.abs(ph - exact(pts)) ** 2)))


def write_field_csv(path, points: np.ndarray, values: np.ndarray) -> None:
    lines = ["x,y,re_p,im_p,abs_p"]
    for (x, y), p in zip(np.asarray(points).tolist(), np.asarray(values, dtype=complex).tolist()):
        lines.append(f"{x!r},{y!r},{p.real!r},{p.imag!r},{abs(p)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_field(field: PressureField, path, at_quadrature: bool = False) -> None:
    if at_quadrature:
        pts, _ = quadrature_points(field.mesh)
        vals = interpolation_matrix(field.mesh, pts) @ field.nodal
        write_field_csv(path, pts, vals)
    else:
        write_field_csv(path, field.mesh.vertices, field.nodal)


class ForwardModel:
    """Caches the mesh operators and load vector; re-solves cheaply for new admittances."""

    def __init__(self, mesh: Mesh, problem: HelmholtzProblem):
        self.mesh = mesh
        self.problem = problem
        self.operators = assemble_operators(mesh)

    @cached_property
    def rhs(self) -> np.ndarray:
        return load_vector(self.mesh, self.problem.source).astype(np.complex128)

    def system(self, beta: complex) -> ComplexSystem:
        k = self.problem.wavenumber
        return ComplexSystem(self.operators.system_matrix(k, beta), self.rhs, self.mesh, self.operators, k)
