"""Geometric mesh-quality losses, their interior-vertex gradients, and the interior smoothing loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import EPS_AREA, Mesh, signed_area, signed_areas
from .optimizers import AdamState, Optimizer


@dataclass(frozen=True)
class MeshLossWeights:
    w_e: float = 1.0
    w_l: float = 1.0
    w_n: float = 1.0
    w_A: float = 100.0

    def __post_init__(self):
        if min(self.w_e, self.w_l, self.w_n, self.w_A) < 0:
            raise ValueError("mesh loss weights must be non-negative")


@dataclass(frozen=True)
class MeshLossReport:
    edge: float
    laplacian: float
    normal: float
    area: float
    total: float


def _edge_lengths(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    e = mesh.topology.edges
    d = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    return d, np.linalg.norm(d, axis=1)


def edge_loss(mesh: Mesh) -> float:
    """Variance of the unique edge lengths."""
    _, ell = _edge_lengths(mesh)
    return float(np.mean((ell - ell.mean()) ** 2))


def edge_loss_gradient(mesh: Mesh) -> np.ndarray:
    d, ell = _edge_lengths(mesh)
    # the mean's own dependence drops out because deviations sum to zero
    coef = 2.0 * (ell - ell.mean()) / len(ell)
    ge = (coef / ell)[:, None] * d
    g = np.zeros_like(mesh.vertices)
    e = mesh.topology.edges
    np.add.at(g, e[:, 1], ge)
    np.add.at(g, e[:, 0], -ge)
    return g


def _laplacian_residuals(mesh: Mesh):
    A = mesh.topology.neighbor_matrix
    deg = np.asarray(A.sum(axis=1)).ravel()
    ids = mesh.interior_vertex_ids
    v = mesh.vertices
    centroid = (A @ v) / deg[:, None]
    return ids, (v - centroid)[ids], A, deg


def laplacian_loss(mesh: Mesh) -> float:
    """Mean squared distance of interior vertices from their 1-ring centroid."""
    ids, r, _, _ = _laplacian_residuals(mesh)
    if len(ids) == 0:
        return 0.0
    return float(np.mean(np.sum(r * r, axis=1)))


def laplacian_loss_gradient(mesh: Mesh) -> np.ndarray:
    ids, r, A, deg = _laplacian_residuals(mesh)
    g = np.zeros_like(mesh.vertices)
    if len(ids) == 0:
        return g
    scale = 2.0 / len(ids)
    g[ids] += scale * r
    # each interior residual pulls on its neighbours with weight -1/deg
    w = np.zeros_like(mesh.vertices)
    w[ids] = r / deg[ids, None]
    g -= scale * (A.T @ w)
    return g


def _face_normals(mesh: Mesh) -> np.ndarray:
    return np.sign(signed_areas(mesh))


def normal_consistency_loss(mesh: Mesh) -> float:
    """Mean of 1 - n_i . n_j over triangle pairs sharing an edge, n = signed unit z-normal."""
    pairs = mesh.topology.adjacent_triangle_pairs
    if len(pairs) == 0:
        return 0.0
    n = _face_normals(mesh)
    return float(np.mean(1.0 - n[pairs[:, 0]] * n[pairs[:, 1]]))


def normal_consistency_gradient(mesh: Mesh) -> np.ndarray:
    # piecewise constant in the vertex positions away from zero-area triangles
    return np.zeros_like(mesh.vertices)


def area_loss(mesh: Mesh, reference_area: float) -> float:
    return (signed_area(mesh) - reference_area) ** 2


def signed_area_gradient(mesh: Mesh) -> np.ndarray:
    """d(total signed area)/d(vertex), accumulated triangle by triangle."""
    v = mesh.vertices
    tri = mesh.triangles
    g = np.zeros_like(v)
    for a in range(3):
        b, c = tri[:, (a + 1) % 3], tri[:, (a + 2) % 3]
        # dA/dp_a = 0.5 * rot(p_b - p_c)
        diff = v[b] - v[c]
        np.add.at(g, tri[:, a], 0.5 * np.column_stack([diff[:, 1], -diff[:, 0]]))
    return g


def area_loss_gradient(mesh: Mesh, reference_area: float) -> np.ndarray:
    return 2.0 * (signed_area(mesh) - reference_area) * signed_area_gradient(mesh)


def mesh_loss(mesh: Mesh, weights: MeshLossWeights, reference_area: float) -> MeshLossReport:
    e = edge_loss(mesh)
    lap = laplacian_loss(mesh)
    nrm = normal_consistency_loss(mesh)
    ar = area_loss(mesh, reference_area)
    total = weights.w_e * e + weights.w_l * lap + weights.w_n * nrm + weights.w_A * ar
    return MeshLossReport(e, lap, nrm, ar, total)


def mesh_loss_gradient_full(mesh: Mesh, weights: MeshLossWeights, reference_area: float) -> np.ndarray:
    """Gradient with respect to every vertex (N, 2)."""
    g = np.zeros_like(mesh.vertices)
    if weights.w_e:
        g += weights.w_e * edge_loss_gradient(mesh)
    if weights.w_l:
        g += weights.w_l * laplacian_loss_gradient(mesh)
    if weights.w_n:
        g += weights.w_n * normal_consistency_gradient(mesh)
    if weights.w_A:
        g += weights.w_A * area_loss_gradient(mesh, reference_area)
    return g


def mesh_loss_gradient_interior(mesh: Mesh, weights: MeshLossWeights, reference_area: float) -> np.ndarray:
    """Gradient restricted to interior vertices, (N_i, 2); boundary rows are dropped."""
    return mesh_loss_gradient_full(mesh, weights, reference_area)[mesh.interior_vertex_ids]


@dataclass
class InteriorResult:
    mesh: Mesh
    report: MeshLossReport
    state: AdamState | None
    degenerate: bool = False
    steps_taken: int = 0
    losses: list[float] | None = None


def interior_optimize(
    mesh: Mesh,
    weights: MeshLossWeights,
    reference_area: float,
    step_size: float,
    m_inner: int,
    method: str = "adam",
    optimizer_state: AdamState | None = None,
    eps_area: float = EPS_AREA,
    max_halvings: int = 0,
    monotone: bool = False,
) -> InteriorResult:
    """Move interior vertices to reduce the mesh-quality loss; boundary stays fixed.

    A step that leaves any triangle with signed area below ``eps_area`` is
    discarded and the last valid mesh is returned with ``degenerate=True``.
    """
    if m_inner < 1:
        raise ValueError(f"m_inner must be >= 1, got {m_inner}")
    opt = Optimizer(method, step_size)
    if opt.method == "adam":
        opt.state = optimizer_state if optimizer_state is not None else AdamState.zeros(mesh.interior_coords.shape)
    current = mesh
    losses = [mesh_loss(current, weights, reference_area).total]
    degenerate = False
    steps = 0
    for _ in range(m_inner):
        if len(current.interior_vertex_ids) == 0:
            break
        g = mesh_loss_gradient_interior(current, weights, reference_area)
        delta = opt.direction(g)
        x0 = current.interior_coords
        trial = None
        for h in range(max_halvings + 1):
            cand = current.with_interior(x0 - delta * 0.5**h)
            if signed_areas(cand).min() < eps_area:
                continue
            cand_loss = mesh_loss(cand, weights, reference_area).total
            if monotone and cand_loss > losses[-1]:
                continue
            trial = cand
            break
        if trial is None:
            if monotone and signed_areas(current.with_interior(x0 - delta * 0.5**max_halvings)).min() >= eps_area:
                continue
            degenerate = True
            break
        current = trial
        steps += 1
        losses.append(cand_loss)
    return InteriorResult(
        mesh=current,
        report=mesh_loss(current, weights, reference_area),
        state=opt.state,
        degenerate=degenerate,
        steps_taken=steps,
        losses=losses,
    )


def harmonic_extension(mesh: Mesh, boundary_coords: np.ndarray) -> Mesh:
    """Move the boundary to ``boundary_coords`` and spread the displacement to the interior.

    Interior displacements solve the uniform graph Laplace equation, so a mesh
    at the Laplacian-loss minimum stays at it.
    """
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    disp_b = np.asarray(boundary_coords, dtype=float) - mesh.boundary_coords
    ids_i = mesh.interior_vertex_ids
    ids_b = mesh.boundary_vertex_ids
    v = mesh.vertices.copy()
    v[ids_b] = boundary_coords
    if len(ids_i):
        A = mesh.topology.neighbor_matrix
        deg = np.asarray(A.sum(axis=1)).ravel()
        L = (sp.diags(deg) - A).tocsr()
        L_ii = L[ids_i][:, ids_i].tocsc()
        L_ib = L[ids_i][:, ids_b]
        disp_i = spla.splu(L_ii).solve(np.asarray(-(L_ib @ disp_b)))
        v[ids_i] += disp_i
    return mesh.with_vertices(v)
