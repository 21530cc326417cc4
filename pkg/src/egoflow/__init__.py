"""Direct camera egomotion and scaled-depth estimation from normal flow."""

from .errors import EgoflowError
from .geometry import (CameraIntrinsics, RigidMotion, axis_error_deg,
                       cap_grid, motion_field, rotation_matrix, sphere_grid,
                       translation_matrix)
from .normal_flow import (GradientFrame, NormalFlowField, compute_gradients,
                          extract_normal_flow, project_flow)
from .positivity import (MotionEstimate, SolverConfig, estimate_motion,
                         hinge, hinge_grad, objective, objective_gradient_w,
                         solve_rotation)
from .reconstruction import (DenseStructure, RefineConfig, SparseStructure,
                             inpaint, refine_loop, refine_motion_ls,
                             structure_from_normal_flow)
from .synthetic import SceneSpec, SyntheticSample, add_noise, generate_scene

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "RigidMotion", "sphere_grid", "cap_grid",
    "translation_matrix", "rotation_matrix", "motion_field", "axis_error_deg",
    "GradientFrame", "NormalFlowField", "compute_gradients",
    "extract_normal_flow", "project_flow",
    "SolverConfig", "MotionEstimate", "estimate_motion", "solve_rotation",
    "objective", "objective_gradient_w", "hinge", "hinge_grad",
    "SparseStructure", "DenseStructure", "RefineConfig",
    "structure_from_normal_flow", "inpaint", "refine_motion_ls", "refine_loop",
    "SceneSpec", "SyntheticSample", "generate_scene", "add_noise",
    "EgoflowError",
    "__version__",
]
