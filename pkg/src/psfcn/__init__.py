"""Learned photometric stereo (PS-FCN / UPS-FCN) on a from-scratch numpy autodiff core,
with a synthetic renderer, the least-squares baseline and depth integration."""

__version__ = "0.1.0"

from .classic import L2Solver, l2_solve, normalize_by_intensity
from .data import LightSet, NormalMap, Sample
from .errors import (
    CheckpointError,
    DataError,
    LightsCoplanarError,
    NumericalError,
    PSFCNError,
    ShapeError,
    ValidationError,
)
from .evaluate import EvalReport, NetworkSolver, mae, per_material_sweep, random_trial_eval
from .net import NetConfig, Network, build_psfcn, cosine_loss, forward, load_weights, save_weights
from .optim import AdamState, adam_step
from .recon import DepthMap, frankot_chellappa, normals_to_gradients
from .render import BRDFParams, RenderJob, brdf_grid, make_blobby, make_sphere, render_dataset, render_sample
from .tensor import Tape, Tensor, backward
from .train import TrainConfig, augment, train

__all__ = [
    "AdamState", "BRDFParams", "CheckpointError", "DataError", "DepthMap", "EvalReport", "L2Solver",
    "LightSet", "LightsCoplanarError", "NetConfig", "Network", "NetworkSolver", "NormalMap",
    "NumericalError", "PSFCNError", "RenderJob", "Sample", "ShapeError", "Tape", "Tensor",
    "TrainConfig", "ValidationError", "adam_step", "augment", "backward", "brdf_grid", "build_psfcn",
    "cosine_loss", "forward", "frankot_chellappa", "l2_solve", "load_weights", "mae", "make_blobby",
    "make_sphere", "normalize_by_intensity", "normals_to_gradients", "per_material_sweep",
    "random_trial_eval", "render_dataset", "render_sample", "save_weights", "train",
]
