"""Shared oracles for the test modules."""

import numpy as np

from helmopt.geometry import generate_rect_mesh
from helmopt.helmholtz import (
    Factorization,
    PressureField,
    assemble_operators,
    boundary_load,
    l2_error,
    load_vector,
)


def square_normals(x, tol=1e-9):
    """Outward unit normals for points on the edges of the unit square (corners excluded)."""
    n = np.zeros_like(x)
    n[np.abs(x[:, 0]) < tol] = (-1.0, 0.0)
    n[np.abs(x[:, 0] - 1) < tol] = (1.0, 0.0)
    n[np.abs(x[:, 1]) < tol] = (0.0, -1.0)
    n[np.abs(x[:, 1] - 1) < tol] = (0.0, 1.0)
    return n


def plane_wave(k, direction):
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)

    def p(x):
        return np.exp(1j * k * (x @ d))

    def grad(x):
        return (1j * k * p(x))[:, None] * d[None, :]

    def source(x):
        return np.zeros(len(x), dtype=complex)

    return p, grad, source


def trig_poly(k):
    """p = sin(pi x) sin(pi y) + i x y, with the source f = -(lap p + k^2 p)."""

    def p(x):
        return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]) + 1j * x[:, 0] * x[:, 1]

    def grad(x):
        gx = np.pi * np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1]) + 1j * x[:, 1]
        gy = np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]) + 1j * x[:, 0]
        return np.column_stack([gx, gy])

    def source(x):
        s = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
        return (2 * np.pi**2 - k**2) * s - 1j * k**2 * x[:, 0] * x[:, 1]

    return p, grad, source


def mms_error(n, k, beta, exact):
    """L2 error of the P1 solution on an n x n unit-square mesh for a manufactured solution."""
    p, grad, source = exact
    mesh = generate_rect_mesh(1.0, 1.0, n, n)
    ops = assemble_operators(mesh)
    K = ops.system_matrix(k, beta)

    def robin(x):
        return np.sum(grad(x) * square_normals(x), axis=1) + 1j * k * beta * p(x)

    rhs = load_vector(mesh, source).astype(complex) + boundary_load(mesh, robin)
    field = PressureField(mesh, Factorization(K).solve(rhs))
    return l2_error(field, p)


def convergence_slope(levels, k, beta, exact):
    h = np.array([1.0 / n for n in levels])
    err = np.array([mms_error(n, k, beta, exact) for n in levels])
    slope = np.polyfit(np.log(h), np.log(err), 1)[0]
    return slope, err


def rel_inf_error(approx, reference, floor=1e-12):
    a = np.asarray(approx, dtype=float).ravel()
    b = np.asarray(reference, dtype=float).ravel()
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def perturbed_mesh(nx, ny, amplitude, seed, width=1.0, height=1.0):
    """Structured mesh with interior vertices jittered by up to ``amplitude`` times the spacing."""
    mesh = generate_rect_mesh(width, height, nx, ny)
    rng = np.random.default_rng(seed)
    h = min(width / nx, height / ny)
    v = mesh.vertices.copy()
    ids = mesh.interior_vertex_ids
    v[ids] += amplitude * h * rng.uniform(-1, 1, size=(len(ids), 2))
    return mesh.with_vertices(v)
