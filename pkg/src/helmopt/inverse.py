"""Admittance estimation from sparse pressure measurements.

The misfit mixes magnitude, wrapped-phase and relative L2 terms. It is not
holomorphic in p, so its gradient is taken with respect to (Re p, Im p) and
pulled back through K(beta) p = f with one adjoint solve.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Mesh, atomic_write_text
from .helmholtz import (
    Factorization,
    ForwardModel,
    HelmholtzProblem,
    PressureField,
    SolverError,
    interpolation_matrix,
    quadrature_points,
)
from .optimizers import Optimizer

logger = logging.getLogger(__name__)


class MeasurementError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    points: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float)).reshape(-1, 2)
        vals = np.asarray(self.values, dtype=np.complex128).ravel()
        if len(pts) != len(vals):
            raise MeasurementError(f"{len(pts)} points but {len(vals)} values")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class LossWeights:
    w_mag: float = 0.5
    w_phase: float = 0.1
    w_rel: float = 5.0

    def __post_init__(self):
        if min(self.w_mag, self.w_phase, self.w_rel) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class EstimationConfig:
    problem: HelmholtzProblem
    initial_admittance: complex = 3.0 + 0.05j
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "sgd"
    step_size: float = 0.1
    iterations: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


@dataclass
class EstimationTrace:
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    beta_r: list[float] = field(default_factory=list)
    beta_i: list[float] = field(default_factory=list)
    grad_r: list[float] = field(default_factory=list)
    grad_i: list[float] = field(default_factory=list)
    final_admittance: complex | None = None
    failed: bool = False
    failure: str | None = None

    def __len__(self):
        return len(self.iteration)

    def to_csv(self) -> str:
        lines = ["iter,loss,beta_r,beta_i,grad_r,grad_i"]
        for row in zip(self.iteration, self.loss, self.beta_r, self.beta_i, self.grad_r, self.grad_i):
            lines.append(",".join([str(row[0])] + [repr(float(x)) for x in row[1:]]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())


def wrap_phase(x):
    """Map angles to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(y == -np.pi, np.pi, y)


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.complex128).ravel()


def admittance_loss(pred, meas, weights: LossWeights) -> float:
    p = _values(pred)
    m = _values(meas)
    if p.shape != m.shape:
        raise MeasurementError(f"prediction has {p.size} values, measurements {m.size}")
    norm_m = np.linalg.norm(m)
    if norm_m == 0:
        raise MeasurementError("measurement vector has zero norm")
    mag = np.sum((np.abs(p) - np.abs(m)) ** 2)
    phase = np.sum(wrap_phase(np.angle(p) - np.angle(m)) ** 2)
    rel = (np.linalg.norm(p - m) / norm_m) ** 2
    return float(weights.w_mag * mag + weights.w_phase * phase + weights.w_rel * rel)


def loss_sensitivity(pred, meas, weights: LossWeights) -> np.ndarray:
    """dJ/dRe(p) + i dJ/dIm(p) for each predicted value."""
    p = _values(pred)
    m = _values(meas)
    ap = np.abs(p)
    # |p| and arg(p) are not differentiable at p = 0; use the zero subgradient there
    safe = np.where(ap > 0, ap, 1.0)
    unit = np.where(ap > 0, p / safe, 0.0)
    g = 2 * weights.w_mag * (ap - np.abs(m)) * unit
    dphase = wrap_phase(np.angle(p) - np.angle(m))
    g = g + 2 * weights.w_phase * dphase * 1j * unit / safe
    g = g + 2 * weights.w_rel * (p - m) / np.linalg.norm(m) ** 2
    return g


def sample_measurements(field: PressureField, cluster_centers, radius: float) -> MeasurementSet:
    """All quadrature points within ``radius`` of any cluster center, with interpolated pressures."""
    mesh = field.mesh
    pts, _ = quadrature_points(mesh)
    centers = np.atleast_2d(np.asarray(cluster_centers, dtype=float))
    d = np.linalg.norm(pts[:, None, :] - centers[None], axis=2)
    sel = np.any(d <= radius, axis=1) if radius > 0 else np.zeros(len(pts), dtype=bool)
    if not sel.any():
        raise MeasurementError(
            f"no quadrature points within {radius} m of the cluster centers; mesh too coarse"
        )
    chosen = pts[sel]
    return MeasurementSet(chosen, interpolation_matrix(mesh, chosen) @ field.nodal)


def cluster_counts(meas: MeasurementSet, cluster_centers, radius: float) -> list[int]:
    centers = np.atleast_2d(np.asarray(cluster_centers, dtype=float))
    d = np.linalg.norm(meas.points[:, None, :] - centers[None], axis=2)
    return [int(np.sum(d[:, c] <= radius)) for c in range(len(centers))]


def add_noise(meas: MeasurementSet, level: float, seed: int) -> MeasurementSet:
    """Independent Gaussian noise on real and imaginary parts, std = level * RMS(|p|)."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    if level == 0:
        return MeasurementSet(meas.points.copy(), meas.values.copy())
    rng = np.random.default_rng(seed)
    sigma = level * np.sqrt(np.mean(np.abs(meas.values) ** 2))
    noise = rng.normal(0.0, sigma, size=(len(meas), 2))
    return MeasurementSet(meas.points.copy(), meas.values + noise[:, 0] + 1j * noise[:, 1])


class AdmittanceObjective:
    """Measurement misfit as a function of the admittance, with adjoint gradient.

    Mesh operators, load vector and the interpolation onto measurement points are
    built once; each evaluation costs one factorization plus, for the gradient,
    one extra back-substitution.
    """

    def __init__(self, mesh: Mesh, problem: HelmholtzProblem, meas: MeasurementSet, weights: LossWeights):
        self.model = ForwardModel(mesh, problem)
        self.meas = meas
        self.weights = weights
        self.interp = interpolation_matrix(mesh, meas.points)
        self.n_solves = 0

    def _forward(self, beta: complex):
        system = self.model.system(beta)
        lu = Factorization(system.matrix)
        p = lu.solve(system.rhs)
        self.n_solves += 1
        return lu, p

    def value(self, beta: complex) -> float:
        _, p = self._forward(beta)
        return admittance_loss(self.interp @ p, self.meas, self.weights)

    def value_and_gradient(self, beta: complex) -> tuple[float, np.ndarray]:
        lu, p = self._forward(beta)
        pred = self.interp @ p
        loss = admittance_loss(pred, self.meas, self.weights)
        g = loss_sensitivity(pred, self.meas, self.weights)
        if not np.any(g):
            return loss, np.zeros(2)
        # dJ = Re(conj(g)^T P dp) and K dp = -dK p; K is complex symmetric so K^T lam = K lam
        lam = lu.solve(self.interp.T @ np.conj(g), trans="T")
        k = self.model.problem.wavenumber
        Bp = self.model.operators.boundary_mass @ p
        lam_Bp = lam @ Bp
        # dK/dbeta_r = i k B, dK/dbeta_i = -k B
        d_r = float(np.real(-1j * k * lam_Bp))
        d_i = float(np.real(k * lam_Bp))
        return loss, np.array([d_r, d_i])

    def fd_gradient(self, beta: complex, step: float = 1e-6) -> np.ndarray:
        """Central finite differences in (beta_r, beta_i); the verification oracle."""
        out = np.empty(2)
        for j, e in enumerate((1.0, 1j)):
            out[j] = (self.value(beta + step * e) - self.value(beta - step * e)) / (2 * step)
        return out


def loss_gradient_beta(mesh: Mesh, problem: HelmholtzProblem, meas: MeasurementSet, weights: LossWeights) -> np.ndarray:
    """(dJ/dbeta_r, dJ/dbeta_i) at ``problem.admittance``."""
    obj = AdmittanceObjective(mesh, problem, meas, weights)
    return obj.value_and_gradient(problem.admittance)[1]


def estimate_admittance(mesh: Mesh, config: EstimationConfig, meas: MeasurementSet) -> EstimationTrace:
    """Run the configured first-order optimizer on (beta_r, beta_i).

    Row i of the trace holds the iterate before update i and its loss/gradient.
    A solver failure stops the loop and returns the partial trace flagged as failed.
    """
    obj = AdmittanceObjective(mesh, config.problem, meas, config.weights)
    opt = Optimizer(config.optimizer, config.step_size, shape=(2,))
    x = np.array([config.initial_admittance.real, config.initial_admittance.imag], dtype=float)
    trace = EstimationTrace()
    for it in range(config.iterations):
        beta = complex(x[0], x[1])
        try:
            loss, g = obj.value_and_gradient(beta)
        except SolverError as exc:
            logger.warning("solve failed at iteration %d: %s", it, exc)
            trace.failed = True
            trace.failure = str(exc)
            break
        trace.iteration.append(it)
        trace.loss.append(loss)
        trace.beta_r.append(x[0])
        trace.beta_i.append(x[1])
        trace.grad_r.append(g[0])
        trace.grad_i.append(g[1])
        x = opt.step(x, g)
        if it % 50 == 0:
            logger.info("iter %d loss %.6e beta %.5f%+.5fi", it, loss, beta.real, beta.imag)
    trace.final_admittance = complex(x[0], x[1])
    return trace


def read_measurements_csv(path) -> MeasurementSet:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y", "re_p", "im_p"} <= set(reader.fieldnames):
            raise MeasurementError(f"{path}: expected columns x,y,re_p,im_p")
        rows = list(reader)
    try:
        pts = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        vals = np.array([complex(float(r["re_p"]), float(r["im_p"])) for r in rows])
    except (TypeError, ValueError) as exc:
        raise MeasurementError(f"{path}: {exc}") from None
    return MeasurementSet(pts, vals)


def write_measurements_csv(meas: MeasurementSet, path) -> None:
    lines = ["x,y,re_p,im_p"]
    for (x, y), p in zip(meas.points.tolist(), meas.values.tolist()):
        lines.append(f"{x!r},{y!r},{p.real!r},{p.imag!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
