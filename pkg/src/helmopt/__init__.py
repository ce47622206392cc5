"""2D Helmholtz finite elements with admittance walls, adjoint admittance estimation and room-shape optimization."""

from .geometry import Mesh, generate_rect_mesh, read_mesh, write_mesh
from .helmholtz import GaussianSource, HelmholtzProblem, acoustic_energy, assemble, solve
from .inverse import EstimationConfig, LossWeights, estimate_admittance
from .meshqual import MeshLossWeights, interior_optimize, mesh_loss
from .shapeopt import RandGradConfig, ShapeOptConfig, optimize_shape

__version__ = "0.1.0"

__all__ = [
    "Mesh",
    "generate_rect_mesh",
    "read_mesh",
    "write_mesh",
    "GaussianSource",
    "HelmholtzProblem",
    "acoustic_energy",
    "assemble",
    "solve",
    "EstimationConfig",
    "LossWeights",
    "estimate_admittance",
    "MeshLossWeights",
    "interior_optimize",
    "mesh_loss",
    "RandGradConfig",
    "ShapeOptConfig",
    "optimize_shape",
]
