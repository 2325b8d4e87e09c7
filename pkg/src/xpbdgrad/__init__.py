"""Differentiable XPBD simulation with adjoint gradients for cloth and soft solids."""

from .collision import Capsule, HalfSpace, Sphere, TriangleMeshCollider
from .constraints import MaterialParams, build_cloth_constraints, build_distance_constraints, build_solid_constraints
from .core_model import Mesh, SimConfig, SimState, build_sim_object, grid_swatch, tet_bar
from .forward_solver import simulate, step_forward
from .inverse_opt import (CheckpointStore, ControlVector, KeyframeL2, PointCloud, compute_gradient, eval_goal,
                          finite_difference_oracle, run_optimization)
from .scene import Scene

__all__ = [
    "Capsule", "HalfSpace", "Sphere", "TriangleMeshCollider", "MaterialParams", "build_cloth_constraints",
    "build_distance_constraints", "build_solid_constraints", "Mesh", "SimConfig", "SimState", "build_sim_object",
    "grid_swatch", "tet_bar", "simulate", "step_forward", "CheckpointStore", "ControlVector", "KeyframeL2",
    "PointCloud", "compute_gradient", "eval_goal", "finite_difference_oracle", "run_optimization", "Scene",
]

__version__ = "0.1.0"
