"""Command-line entry point: ``helmopt meshgen|forward|estimate|shapeopt|gradcheck --config FILE``.

Config files are YAML mappings validated before any computation; unknown keys
are rejected. Exit codes: 0 success, 2 config or input error, 3 solver failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .geometry import (
    Mesh,
    MeshError,
    atomic_write_text,
    boundary_is_simple,
    generate_rect_mesh,
    read_mesh,
    signed_area,
    signed_areas,
    write_mesh,
    write_obj,
)
from .helmholtz import (
    DegenerateMeshError,
    Factorization,
    GaussianSource,
    HelmholtzProblem,
    PressureField,
    SolverError,
    acoustic_energy,
    assemble,
    export_field,
    interpolation_matrix,
    relative_residual,
)
from .inverse import (
    AdmittanceObjective,
    EstimationConfig,
    LossWeights,
    MeasurementError,
    MeasurementSet,
    add_noise,
    estimate_admittance,
    read_measurements_csv,
    sample_measurements,
)
from .meshqual import MeshLossWeights, mesh_loss, mesh_loss_gradient_interior
from .shapeopt import (
    BoundaryObjective,
    ObjectiveError,
    RandGradConfig,
    ShapeOptConfig,
    fd_full_mesh_gradient,
    fd_gradient,
    optimize_shape,
    randomized_boundary_gradient,
)

logger = logging.getLogger("helmopt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4

THREADS_ENV = "HELMOPT_THREADS"


class ConfigError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


# --- configuration schema -------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MeshSpec(_Strict):
    width: float = Field(2.0, gt=0)
    height: float = Field(2.0, gt=0)
    nx: int = Field(24, ge=1)
    ny: int = Field(24, ge=1)
    path: Optional[str] = None

    def build(self, base: Path) -> Mesh:
        if self.path is not None:
            return read_mesh(base / self.path)
        return generate_rect_mesh(self.width, self.height, self.nx, self.ny)


def _complex(value) -> complex:
    if isinstance(value, (list, tuple)):
        if len(value) != 2:
            raise ValueError("complex values are written as [real, imag]")
        return complex(float(value[0]), float(value[1]))
    if isinstance(value, str):
        return complex(value.replace(" ", ""))
    return complex(value)


class SourceSpec(_Strict):
    center: tuple[float, float] = (1.0, 1.0)
    sigma: float = Field(0.086, gt=0)
    amplitude: float = 1000.0


class PhysicsSpec(_Strict):
    frequency: float = Field(1000.0, gt=0)
    sound_speed: float = Field(343.0, gt=0)
    admittance: complex = 1.5 + 0.3j
    source: SourceSpec = Field(default_factory=SourceSpec)

    @field_validator("admittance", mode="before")
    @classmethod
    def _parse_admittance(cls, v):
        return _complex(v)

    def problem(self) -> HelmholtzProblem:
        src = GaussianSource(tuple(self.source.center), self.source.sigma, self.source.amplitude)
        return HelmholtzProblem(self.frequency, src, self.admittance, self.sound_speed)


class MeshgenConfig(_Strict):
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    output: str = "mesh.mesh2d"
    obj: bool = False
    seed: int = 0


class ForwardConfig(_Strict):
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    physics: PhysicsSpec = Field(default_factory=PhysicsSpec)
    field_at_quadrature: bool = False
    seed: int = 0


class SyntheticSpec(_Strict):
    clusters: list[tuple[float, float]] = Field(min_length=1)
    radius: float = Field(0.1, gt=0)
    noise_level: float = Field(0.02, ge=0)


class MeasurementSpec(_Strict):
    synthetic: Optional[SyntheticSpec] = None
    csv: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.synthetic is None) == (self.csv is None):
            raise ValueError("give exactly one of 'synthetic' or 'csv'")
        return self


class EstimationSpec(_Strict):
    initial: complex = 3.0 + 0.05j
    optimizer: Literal["sgd", "adam"] = "sgd"
    step_size: float = Field(0.1, gt=0)
    iterations: int = Field(300, ge=1)

    @field_validator("initial", mode="before")
    @classmethod
    def _parse_initial(cls, v):
        return _complex(v)


class LossWeightSpec(_Strict):
    w_mag: float = Field(0.5, ge=0)
    w_phase: float = Field(0.1, ge=0)
    w_rel: float = Field(5.0, ge=0)


class EstimateConfig(_Strict):
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    physics: PhysicsSpec = Field(default_factory=PhysicsSpec)
    measurements: MeasurementSpec
    estimation: EstimationSpec = Field(default_factory=EstimationSpec)
    weights: LossWeightSpec = Field(default_factory=LossWeightSpec)
    seed: int = 0


class MeshWeightSpec(_Strict):
    w_e: float = Field(1.0, ge=0)
    w_l: float = Field(1.0, ge=0)
    w_n: float = Field(1.0, ge=0)
    w_A: float = Field(100.0, ge=0)


class ShapeOptSpec(_Strict):
    samples: int = Field(30, ge=1)
    epsilon: float = Field(1e-3, gt=0)
    boundary_step: float = Field(0.1, gt=0)
    interior_step: float = Field(0.1, gt=0)
    m_inner: int = Field(20, ge=1)
    max_outer: int = Field(100, ge=1)
    tolerance: float = Field(0.0, ge=0)
    method: Literal["adam", "gradient-descent"] = "adam"
    normalization: Literal["initial-energy", "none"] = "initial-energy"
    area_gradient: Literal["analytic", "estimated"] = "analytic"
    morph: bool = True
    min_area_fraction: float = Field(0.1, ge=0, lt=1)
    snapshot_every: int = Field(0, ge=0)
    measure_baseline: bool = True
    baseline_step: float = Field(1e-6, gt=0)


class ShapeoptConfig(_Strict):
    mesh: MeshSpec = Field(default_factory=lambda: MeshSpec(width=4.0, height=4.0, nx=16, ny=16))
    physics: PhysicsSpec
    shapeopt: ShapeOptSpec = Field(default_factory=ShapeOptSpec)
    mesh_weights: MeshWeightSpec = Field(default_factory=MeshWeightSpec)
    seed: int = 0
    threads: int = Field(1, ge=1)


class GradcheckConfig(_Strict):
    mesh: MeshSpec = Field(default_factory=lambda: MeshSpec(width=1.0, height=1.0, nx=4, ny=4))
    physics: PhysicsSpec = Field(
        default_factory=lambda: PhysicsSpec(
            frequency=300.0, source=SourceSpec(center=(0.4, 0.6), sigma=0.2, amplitude=1000.0)
        )
    )
    measurement_points: list[tuple[float, float]] = Field(
        default_factory=lambda: [(0.3, 0.3), (0.7, 0.4), (0.5, 0.8), (0.2, 0.7)]
    )
    admittances: list[complex] = Field(default_factory=lambda: [1.5 + 0.3j, 0.8 - 0.2j, 3.0 + 0.05j])
    weights: LossWeightSpec = Field(default_factory=LossWeightSpec)
    mesh_weights: MeshWeightSpec = Field(default_factory=MeshWeightSpec)
    perturbation: float = Field(0.02, ge=0)
    randomized_samples: int = Field(200, ge=1)
    randomized_epsilon: float = Field(1e-4, gt=0)
    tol_adjoint: float = 1e-4
    tol_mesh: float = 1e-6
    min_cosine: float = 0.6
    corrupt_gradient: Optional[Literal["adjoint", "mesh", "randomized"]] = None
    seed: int = 0

    @field_validator("admittances", mode="before")
    @classmethod
    def _parse_admittances(cls, v):
        return [_complex(x) for x in v]


COMMANDS = {
    "meshgen": MeshgenConfig,
    "forward": ForwardConfig,
    "estimate": EstimateConfig,
    "shapeopt": ShapeoptConfig,
    "gradcheck": GradcheckConfig,
}


def load_config(command: str, path) -> BaseModel:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) if path.exists() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return COMMANDS[command].model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --- helpers ----------------------------------------------------------------


def _write_json(path: Path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _cplx(z: complex) -> list[float]:
    return [float(z.real), float(z.imag)]


def rel_error(approx, reference, floor: float = 1e-12) -> float:
    """max |approx - reference| / max(max |reference|, floor)."""
    a = np.asarray(approx, dtype=float).ravel()
    b = np.asarray(reference, dtype=float).ravel()
    return float(np.max(np.abs(a - b), initial=0.0) / max(np.max(np.abs(b), initial=0.0), floor))


def resolve_threads(cli_value: int | None, config_value: int = 1) -> int:
    if cli_value is not None:
        return max(1, cli_value)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return config_value


# --- commands ---------------------------------------------------------------


def cmd_meshgen(cfg: MeshgenConfig, out_dir: Path, base: Path) -> dict:
    mesh = cfg.mesh.build(base)
    out = out_dir / cfg.output
    write_mesh(mesh, out)
    if cfg.obj:
        write_obj(mesh, out.with_suffix(".obj"))
    c = mesh.counts
    report = {
        "mesh": str(out),
        "vertices": c.n_vertices,
        "boundary_vertices": c.n_boundary,
        "interior_vertices": c.n_interior,
        "triangles": c.n_triangles,
        "area": signed_area(mesh),
    }
    _write_json(out_dir / "meshgen.json", report)
    return report


def cmd_forward(cfg: ForwardConfig, out_dir: Path, base: Path) -> dict:
    mesh = cfg.mesh.build(base)
    problem = cfg.physics.problem()
    system = assemble(mesh, problem)
    lu = Factorization(system.matrix)
    field = PressureField(mesh, lu.solve(system.rhs))
    export_field(field, out_dir / "field.csv", at_quadrature=cfg.field_at_quadrature)
    report = {
        "k": problem.wavenumber,
        "energy": acoustic_energy(field),
        "residual": relative_residual(system, field),
        "vertices": mesh.counts.n_vertices,
    }
    _write_json(out_dir / "forward.json", report)
    return report


def cmd_estimate(cfg: EstimateConfig, out_dir: Path, base: Path, seed: int) -> dict:
    mesh = cfg.mesh.build(base)
    problem = cfg.physics.problem()
    truth = None
    if cfg.measurements.synthetic is not None:
        syn = cfg.measurements.synthetic
        truth = problem.admittance
        system = assemble(mesh, problem)
        field = PressureField(mesh, Factorization(system.matrix).solve(system.rhs))
        meas = add_noise(sample_measurements(field, syn.clusters, syn.radius), syn.noise_level, seed)
    else:
        meas = read_measurements_csv(base / cfg.measurements.csv)
    # points outside the mesh surface here as a validation error
    AdmittanceObjective(mesh, problem, meas, LossWeights())
    est = EstimationConfig(
        problem=problem,
        initial_admittance=cfg.estimation.initial,
        weights=LossWeights(**cfg.weights.model_dump()),
        optimizer=cfg.estimation.optimizer,
        step_size=cfg.estimation.step_size,
        iterations=cfg.estimation.iterations,
        seed=seed,
    )
    trace = estimate_admittance(mesh, est, meas)
    trace.write_csv(out_dir / "estimate_trace.csv")
    report = {
        "beta_est": _cplx(trace.final_admittance),
        "iterations": len(trace),
        "measurements": len(meas),
        "final_loss": trace.loss[-1] if trace.loss else None,
        "failed": trace.failed,
    }
    if truth is not None:
        report["beta_true"] = _cplx(truth)
        report["abs_error"] = abs(trace.final_admittance - truth)
    _write_json(out_dir / "estimate.json", report)
    if trace.failed:
        raise SolverError(f"estimation stopped early: {trace.failure}")
    return report


def cmd_shapeopt(cfg: ShapeoptConfig, out_dir: Path, base: Path, seed: int, threads: int) -> dict:
    mesh = cfg.mesh.build(base)
    problem = cfg.physics.problem()
    s = cfg.shapeopt
    weights = MeshLossWeights(**cfg.mesh_weights.model_dump())
    config = ShapeOptConfig(
        problem=problem,
        mesh=mesh,
        boundary_step=s.boundary_step,
        interior_step=s.interior_step,
        m_inner=s.m_inner,
        max_outer=s.max_outer,
        tolerance=s.tolerance,
        rand_grad=RandGradConfig(s.samples, s.epsilon, seed),
        mesh_weights=weights,
        objective_normalization=s.normalization,
        method=s.method,
        snapshot_every=s.snapshot_every,
        threads=threads,
        area_gradient=s.area_gradient,
        morph=s.morph,
        min_area_fraction=s.min_area_fraction,
    )
    trace = optimize_shape(config)
    atomic_write_text(out_dir / "shapeopt_trace.csv", trace.to_csv())
    final = trace.final_mesh
    write_mesh(final, out_dir / "final.mesh2d")
    write_obj(final, out_dir / "final.obj")
    if trace.snapshots:
        snap_dir = out_dir / "snapshots"
        snap_dir.mkdir(parents=True, exist_ok=True)
        for k, m in sorted(trace.snapshots.items()):
            write_mesh(m, snap_dir / f"iter_{k:04d}.mesh2d")
            write_obj(m, snap_dir / f"iter_{k:04d}.obj")

    per_iter = trace.solves_per_iteration
    # the last difference is the final evaluation only; exclude it from the per-iteration count
    full_iters = per_iter[:-1] if len(per_iter) > 1 else per_iter
    solves_per_iter = int(np.median(full_iters)) if full_iters else 0
    baseline = None
    if s.measure_baseline:
        norm = trace.energy[0] if s.normalization == "initial-energy" else 1.0
        objective = BoundaryObjective(mesh, problem, signed_area(mesh), weights.w_A, norm)
        _, baseline = fd_full_mesh_gradient(mesh, lambda m: objective.evaluate(m)[0], s.baseline_step)
    a0, a1 = trace.area[0], trace.area[-1]
    report = {
        "initial_energy": trace.energy[0],
        "final_energy": trace.energy[-1],
        "reduction": trace.reduction,
        "initial_area": a0,
        "final_area": a1,
        "area_drift": abs(a1 - a0) / a0,
        "iterations": trace.iteration[-1],
        "total_solves": trace.pde_solves[-1],
        "solves_per_iteration": solves_per_iter,
        "solves_per_iteration_max": max(full_iters) if full_iters else 0,
        "baseline_solves": baseline,
        "speedup_ratio": (baseline / solves_per_iter) if baseline and solves_per_iter else None,
        "rejected_boundary_steps": int(sum(h > 5 for h in trace.halvings)),
        "min_triangle_area": float(signed_areas(final).min()),
        "boundary_simple": bool(boundary_is_simple(final)),
        "reason": trace.reason,
        "error": trace.error,
        "seed": seed,
    }
    _write_json(out_dir / "shapeopt.json", report)
    if trace.reason == "error":
        raise SolverError(f"shape optimization aborted: {trace.error}")
    return report


def cmd_gradcheck(cfg: GradcheckConfig, out_dir: Path, base: Path, seed: int) -> dict:
    mesh = cfg.mesh.build(base)
    problem = cfg.physics.problem()
    rng = np.random.default_rng(seed)
    report: dict = {}
    failures = []

    # (a) adjoint admittance gradient against central differences
    system = assemble(mesh, problem)
    field = PressureField(mesh, Factorization(system.matrix).solve(system.rhs))
    pts = np.asarray(cfg.measurement_points, dtype=float)
    values = interpolation_matrix(mesh, pts) @ field.nodal
    # synthetic data off the model so the misfit and its gradient are nonzero
    meas = MeasurementSet(pts, values * (1.0 + 0.1j))
    obj = AdmittanceObjective(mesh, problem, meas, LossWeights(**cfg.weights.model_dump()))
    errs = []
    for beta in cfg.admittances:
        _, g = obj.value_and_gradient(beta)
        if cfg.corrupt_gradient == "adjoint":
            g = g * 1.01
        errs.append(rel_error(g, obj.fd_gradient(beta)))
    report["adjoint_max_rel_error"] = max(errs)
    if not max(errs) <= cfg.tol_adjoint:
        failures.append("adjoint")

    # (b) interior mesh-loss gradient on a randomly perturbed mesh
    weights = MeshLossWeights(**cfg.mesh_weights.model_dump())
    ids = mesh.interior_vertex_ids
    v = mesh.vertices.copy()
    v[ids] += cfg.perturbation * rng.uniform(-1, 1, size=(len(ids), 2))
    pmesh = mesh.with_vertices(v)
    area0 = signed_area(mesh)
    g_an = mesh_loss_gradient_interior(pmesh, weights, area0)
    if cfg.corrupt_gradient == "mesh":
        g_an = g_an * 1.01 + 1e-3
    g_fd, _ = fd_gradient(
        pmesh.interior_coords, lambda x: mesh_loss(pmesh.with_interior(x), weights, area0).total, 1e-6
    )
    report["mesh_max_rel_error"] = rel_error(g_an, g_fd, floor=1e-8)
    if not report["mesh_max_rel_error"] <= cfg.tol_mesh:
        failures.append("mesh")

    # (c) randomized boundary estimate against the coordinate-wise oracle
    norm = acoustic_energy(field)
    bobj = BoundaryObjective(mesh, problem, area0, weights.w_A, norm)
    est = randomized_boundary_gradient(
        mesh, bobj, RandGradConfig(cfg.randomized_samples, cfg.randomized_epsilon, seed)
    )
    g_rand = est.gradient
    if cfg.corrupt_gradient == "randomized":
        g_rand = -g_rand
    g_ref, _ = fd_gradient(mesh.boundary_coords, bobj, 1e-6)
    cos = float(np.sum(g_rand * g_ref) / (np.linalg.norm(g_rand) * np.linalg.norm(g_ref) + 1e-300))
    report["randomized_cosine"] = cos
    report["randomized_samples"] = cfg.randomized_samples
    report["boundary_dimension"] = int(mesh.boundary_coords.size)
    if not cos >= cfg.min_cosine:
        failures.append("randomized")

    report["failed"] = failures
    report["passed"] = not failures
    _write_json(out_dir / "gradcheck.json", report)
    if failures:
        raise VerificationError(f"gradient check failed: {', '.join(failures)}")
    return report


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="helmopt", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML config file")
    parser.add_argument("--out-dir", default=".", help="directory for outputs (created if missing)")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--threads", type=int, default=None, help=f"concurrent samples (fallback: ${THREADS_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    out_dir = Path(args.out_dir)
    try:
        cfg = load_config(args.command, args.config)
        base = Path(args.config).resolve().parent
        seed = args.seed if args.seed is not None else cfg.seed
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "meshgen":
            report = cmd_meshgen(cfg, out_dir, base)
        elif args.command == "forward":
            report = cmd_forward(cfg, out_dir, base)
        elif args.command == "estimate":
            report = cmd_estimate(cfg, out_dir, base, seed)
        elif args.command == "shapeopt":
            threads = resolve_threads(args.threads, cfg.threads)
            report = cmd_shapeopt(cfg, out_dir, base, seed, threads)
        else:
            report = cmd_gradcheck(cfg, out_dir, base, seed)
    except (ConfigError, MeshError, MeasurementError, ValueError, FileNotFoundError) as exc:
        # DegenerateMeshError is a ValueError but belongs with solver failures
        if isinstance(exc, DegenerateMeshError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ObjectiveError) as exc:
        cond = getattr(exc, "condition_estimate", None)
        extra = f" [condition estimate {cond:.3e}]" if cond is not None and math.isfinite(cond) else ""
        print(f"solver failure: {exc}{extra}", file=sys.stderr)
        return EXIT_SOLVER
    except VerificationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_VERIFY
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
