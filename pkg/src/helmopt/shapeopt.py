"""Room-shape optimization: randomized boundary gradients alternated with interior mesh smoothing.

Each outer iteration spends ``samples + 1`` forward solves on a forward-difference
estimate of the boundary gradient, takes one boundary step, then relaxes the
interior vertices with the purely geometric mesh-quality loss (no solves).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    EPS_AREA,
    Mesh,
    boundary_self_intersections,
    signed_area,
    signed_areas,
)
from .helmholtz import (
    DegenerateMeshError,
    Factorization,
    HelmholtzProblem,
    SolverError,
    acoustic_energy,
    assemble,
    PressureField,
)
from .meshqual import MeshLossWeights, area_loss_gradient, harmonic_extension, interior_optimize, mesh_loss
from .optimizers import AdamState, Optimizer

logger = logging.getLogger(__name__)

MAX_REDRAWS = 3
MAX_HALVINGS = 5
INTERIOR_HALVINGS = 5


class ObjectiveError(RuntimeError):
    """Forward evaluation failed; ``mesh`` holds the geometry that caused it."""

    def __init__(self, message: str, mesh: Mesh | None = None):
        self.mesh = mesh
        super().__init__(message)


class BoundaryUpdateError(RuntimeError):
    def __init__(self, message: str, edges: list[tuple[int, int]] | None = None, triangles=None):
        self.edges = edges or []
        self.triangles = [] if triangles is None else list(triangles)
        super().__init__(message)


@dataclass(frozen=True)
class RandGradConfig:
    samples: int = 30
    epsilon: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True, eq=False)
class ShapeOptConfig:
    problem: HelmholtzProblem
    mesh: Mesh
    boundary_step: float = 0.1
    interior_step: float = 0.1
    m_inner: int = 20
    max_outer: int = 100
    tolerance: float = 0.0
    rand_grad: RandGradConfig = field(default_factory=RandGradConfig)
    mesh_weights: MeshLossWeights = field(default_factory=MeshLossWeights)
    objective_normalization: str = "initial-energy"
    method: str = "adam"
    snapshot_every: int = 0
    threads: int = 1
    # the area penalty is closed-form, so by default only the energy is estimated
    area_gradient: str = "analytic"
    morph: bool = True
    # accepted iterates keep every triangle above this fraction of the smallest initial area
    min_area_fraction: float = 0.1

    def __post_init__(self):
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be >= 0")
        if self.objective_normalization not in ("initial-energy", "none"):
            raise ValueError(f"unknown normalization {self.objective_normalization!r}")
        if self.m_inner < 1:
            raise ValueError("m_inner must be >= 1")
        if not 0 <= self.min_area_fraction < 1:
            raise ValueError("min_area_fraction must lie in [0, 1)")
        if self.area_gradient not in ("analytic", "estimated"):
            raise ValueError(f"area_gradient must be 'analytic' or 'estimated', got {self.area_gradient!r}")


def solve_energy(mesh: Mesh, problem: HelmholtzProblem) -> float:
    """Acoustic energy of the forward solution on ``mesh``."""
    system = assemble(mesh, problem)
    p = Factorization(system.matrix).solve(system.rhs)
    return acoustic_energy(PressureField(mesh, p))


def boundary_objective(
    mesh: Mesh, problem: HelmholtzProblem, reference_area: float, w_A: float, normalization: float
) -> float:
    """energy / normalization + w_A * (area - reference_area)^2."""
    return _objective_parts(mesh, problem, reference_area, w_A, normalization)[0]


def _objective_parts(mesh, problem, reference_area, w_A, normalization) -> tuple[float, float]:
    try:
        energy = solve_energy(mesh, problem)
    except (SolverError, DegenerateMeshError) as exc:
        raise ObjectiveError(str(exc), mesh) from exc
    return energy / normalization + w_A * (signed_area(mesh) - reference_area) ** 2, energy


class BoundaryObjective:
    """J as a function of boundary coordinates, interior vertices held at ``mesh``.

    Counts every forward solve it performs (including failed ones).
    """

    def __init__(self, mesh: Mesh, problem: HelmholtzProblem, reference_area: float, w_A: float, normalization: float = 1.0):
        self.mesh = mesh
        self.problem = problem
        self.reference_area = reference_area
        self.w_A = w_A
        self.normalization = normalization
        self.n_solves = 0
        self.last_energy: float | None = None

    def evaluate(self, mesh: Mesh) -> tuple[float, float]:
        """(J, raw energy) for a full mesh."""
        self.n_solves += 1
        return _objective_parts(mesh, self.problem, self.reference_area, self.w_A, self.normalization)

    def __call__(self, boundary_coords: np.ndarray) -> float:
        return self.evaluate(self.mesh.with_boundary(boundary_coords))[0]


@dataclass
class RandGradResult:
    gradient: np.ndarray
    j0: float
    evaluations: int
    redraws: int


def _direction(seed: int, iteration: int, sample: int, attempt: int, shape) -> np.ndarray:
    # counter-based stream: identical regardless of which thread draws it
    return np.random.default_rng([seed, iteration, sample, attempt]).standard_normal(shape)


def randomized_boundary_gradient(
    mesh: Mesh,
    objective,
    config: RandGradConfig,
    *,
    iteration: int = 0,
    j0: float | None = None,
    threads: int = 1,
) -> RandGradResult:
    """Forward-difference Gaussian-direction estimate of dJ/d(boundary coords), (N_b, 2).

    ``objective`` maps boundary coordinates to a float and may raise on failure;
    a failing sample is redrawn up to three times, then dropped from the average.
    Passing ``j0`` skips the base evaluation (callers that already have it).
    """
    x0 = mesh.boundary_coords
    evaluations = 0
    if j0 is None:
        j0 = float(objective(x0))
        evaluations += 1
    eps = config.epsilon

    def one(s: int):
        n_eval = 0
        for attempt in range(MAX_REDRAWS + 1):
            d = _direction(config.seed, iteration, s, attempt, x0.shape)
            n_eval += 1
            try:
                js = float(objective(x0 + eps * d))
            except Exception as exc:  # any failed forward evaluation triggers a redraw
                logger.debug("sample %d attempt %d failed: %s", s, attempt, exc)
                continue
            return (js - j0) / eps * d, n_eval, attempt
        return None, n_eval, MAX_REDRAWS + 1

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(config.samples)))
    else:
        results = [one(s) for s in range(config.samples)]

    grad = np.zeros_like(x0)
    used = 0
    redraws = 0
    # fixed summation order keeps the result independent of thread scheduling
    for contrib, n_eval, attempts in results:
        evaluations += n_eval
        redraws += min(attempts, MAX_REDRAWS) if contrib is not None else MAX_REDRAWS
        if contrib is not None:
            grad += contrib
            used += 1
    if used == 0:
        raise ObjectiveError("every randomized-gradient sample failed", mesh)
    return RandGradResult(grad / used, j0, evaluations, redraws)


def fd_gradient(x0: np.ndarray, objective, step: float) -> tuple[np.ndarray, int]:
    """Central differences over every coordinate of ``x0``; returns (gradient, evaluations)."""
    x0 = np.asarray(x0, dtype=float)
    g = np.zeros_like(x0)
    flat = g.reshape(-1)
    n_eval = 0
    for idx in range(x0.size):
        e = np.zeros(x0.size)
        e[idx] = step
        e = e.reshape(x0.shape)
        try:
            fp = objective(x0 + e)
            fm = objective(x0 - e)
        except Exception as exc:
            raise ObjectiveError(f"evaluation failed at coordinate {idx}: {exc}") from exc
        n_eval += 2
        flat[idx] = (fp - fm) / (2 * step)
    return g, n_eval


def fd_full_mesh_gradient(mesh: Mesh, objective, step: float = 1e-6) -> tuple[np.ndarray, int]:
    """Central-difference gradient over all vertex coordinates, (N, 2); ``objective`` takes a Mesh.

    Costs 2 * N * 2 evaluations, the baseline the randomized estimator is compared against.
    """
    return fd_gradient(mesh.vertices, lambda v: objective(mesh.with_vertices(v)), step)


def apply_boundary_update(
    mesh: Mesh,
    gradient: np.ndarray,
    optimizer: Optimizer,
    eps_area: float = EPS_AREA,
    morph: bool = True,
) -> tuple[Mesh, int]:
    """One optimizer step on the boundary; returns (new mesh, number of halvings).

    Only boundary coordinates change in the returned mesh. The step is halved
    (up to five times) while the boundary self-intersects or, when ``morph`` is
    set, while the harmonically morphed mesh would contain a triangle with
    signed area below ``eps_area``.
    """
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != mesh.boundary_coords.shape:
        raise ValueError(f"gradient shape {gradient.shape} != boundary shape {mesh.boundary_coords.shape}")
    delta = optimizer.direction(gradient)
    x0 = mesh.boundary_coords
    scale = 1.0
    for halvings in range(MAX_HALVINGS + 1):
        xb = x0 - scale * delta
        crossings = boundary_self_intersections(xb)
        bad = np.array([], dtype=int)
        if not crossings:
            preview = harmonic_extension(mesh, xb) if morph else mesh.with_boundary(xb)
            bad = np.flatnonzero(signed_areas(preview) < eps_area)
            if len(bad) == 0:
                return mesh.with_boundary(xb), halvings
        scale *= 0.5
    raise BoundaryUpdateError(
        f"boundary update invalid after {MAX_HALVINGS} halvings "
        f"({len(crossings)} crossing edge pairs, {len(bad)} collapsed triangles)",
        edges=crossings,
        triangles=bad.tolist(),
    )


@dataclass
class ShapeOptTrace:
    iteration: list[int] = field(default_factory=list)
    energy: list[float] = field(default_factory=list)
    energy_normalized: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    mesh_loss: list[float] = field(default_factory=list)
    area: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    pde_solves: list[int] = field(default_factory=list)
    redraws: list[int] = field(default_factory=list)
    halvings: list[int] = field(default_factory=list)
    interior_degenerate: list[bool] = field(default_factory=list)
    snapshots: dict[int, Mesh] = field(default_factory=dict)
    final_mesh: Mesh | None = None
    reason: str = ""
    error: str | None = None
    samples: int = 0

    def to_csv(self) -> str:
        lines = ["iter,energy,energy_normalized,mesh_loss,area,grad_norm,pde_solves"]
        for i in range(len(self.iteration)):
            lines.append(
                ",".join(
                    [str(self.iteration[i])]
                    + [repr(float(x)) for x in (self.energy[i], self.energy_normalized[i], self.mesh_loss[i], self.area[i], self.grad_norm[i])]
                    + [str(self.pde_solves[i])]
                )
            )
        return "\n".join(lines) + "\n"

    @property
    def solves_per_iteration(self) -> list[int]:
        return np.diff(self.pde_solves).tolist()

    @property
    def reduction(self) -> float:
        return 1.0 - self.energy[-1] / self.energy[0]


def optimize_shape(config: ShapeOptConfig) -> ShapeOptTrace:
    """Two-stage hybrid loop; stops after ``max_outer`` iterations or when |J - J_prev| <= tolerance.

    The boundary step is spread to the interior by harmonic extension before
    the interior stage, which only accepts steps that lower the mesh loss and
    keep every triangle valid. A rejected boundary step leaves the geometry
    unchanged and does not count towards the tolerance test.

    Row k of the trace describes iterate k; ``grad_norm`` is the norm of the
    boundary gradient estimated at that iterate (NaN for the last row).
    """
    mesh = config.mesh
    problem = config.problem
    reference_area = signed_area(mesh)
    w_A = config.mesh_weights.w_A
    trace = ShapeOptTrace(samples=config.rand_grad.samples)
    eps_area = max(EPS_AREA, config.min_area_fraction * float(signed_areas(mesh).min()))

    try:
        e0 = solve_energy(mesh, problem)
    except (SolverError, DegenerateMeshError) as exc:
        trace.reason = "error"
        trace.error = str(exc)
        trace.final_mesh = mesh
        return trace
    norm = e0 if config.objective_normalization == "initial-energy" else 1.0
    if not norm > 0:
        norm = 1.0
    solves = 1
    j = e0 / norm + w_A * (signed_area(mesh) - reference_area) ** 2
    energy = e0

    b_opt = Optimizer(config.method, config.boundary_step)
    i_state: AdamState | None = None

    def record(k, m, energy, j, gnorm, redraws=0, halvings=0, degenerate=False):
        trace.iteration.append(k)
        trace.energy.append(energy)
        trace.energy_normalized.append(energy / norm)
        trace.objective.append(j)
        trace.mesh_loss.append(mesh_loss(m, config.mesh_weights, reference_area).total)
        trace.area.append(signed_area(m))
        trace.grad_norm.append(gnorm)
        trace.pde_solves.append(solves)
        trace.redraws.append(redraws)
        trace.halvings.append(halvings)
        trace.interior_degenerate.append(degenerate)
        if config.snapshot_every and k % config.snapshot_every == 0:
            trace.snapshots[k] = m

    j_prev = math.inf
    k = 0
    pending = dict(redraws=0, halvings=0, degenerate=False)
    while k < config.max_outer and abs(j - j_prev) > config.tolerance:
        j_prev = j
        analytic_area = config.area_gradient == "analytic"
        if analytic_area:
            obj = BoundaryObjective(mesh, problem, reference_area, 0.0, norm)
            j_base = energy / norm
        else:
            obj = BoundaryObjective(mesh, problem, reference_area, w_A, norm)
            j_base = j
        try:
            est = randomized_boundary_gradient(
                mesh, obj, config.rand_grad, iteration=k, j0=j_base, threads=config.threads
            )
            if analytic_area:
                est.gradient = est.gradient + w_A * area_loss_gradient(mesh, reference_area)[mesh.boundary_vertex_ids]
        except ObjectiveError as exc:
            solves += obj.n_solves
            record(k, mesh, energy, j, float("nan"), **pending)
            trace.reason, trace.error = "error", str(exc)
            break
        solves += obj.n_solves
        record(k, mesh, energy, j, float(np.linalg.norm(est.gradient)), **pending)
        trace.redraws[-1] += est.redraws

        try:
            moved, halvings = apply_boundary_update(mesh, est.gradient, b_opt, eps_area=eps_area, morph=config.morph)
        except BoundaryUpdateError as exc:
            logger.info("outer %d: boundary step rejected: %s", k, exc)
            moved, halvings = mesh, MAX_HALVINGS + 1
            j_prev = math.inf
        if config.morph:
            moved = harmonic_extension(mesh, moved.boundary_coords)
        inner = interior_optimize(
            moved,
            config.mesh_weights,
            reference_area,
            config.interior_step,
            config.m_inner,
            method=config.method,
            optimizer_state=i_state,
            eps_area=eps_area,
            max_halvings=INTERIOR_HALVINGS,
            monotone=True,
        )
        i_state = inner.state
        candidate = inner.mesh
        try:
            j_new, e_new = BoundaryObjective(candidate, problem, reference_area, w_A, norm).evaluate(candidate)
        except ObjectiveError as exc:
            solves += 1
            trace.reason, trace.error = "error", str(exc)
            break
        solves += 1
        mesh, j, energy = candidate, j_new, e_new
        k += 1
        pending = dict(redraws=0, halvings=halvings, degenerate=inner.degenerate)
        if k % 10 == 0:
            logger.info("outer %d energy %.4e (%.3f of initial) area %.4f", k, energy, energy / e0, signed_area(mesh))
    else:
        trace.reason = "max-iters" if k >= config.max_outer else "tolerance"

    if trace.reason != "error" or not trace.iteration or trace.iteration[-1] != k:
        record(k, mesh, energy, j, float("nan"), **pending)
    trace.final_mesh = mesh
    return trace
