"""Displacement fields from speckle image pairs by fitting a coordinate network."""

__version__ = "0.1.0"

from .grid import RoiMask, ScalarField, VectorField2, load_field, load_image, load_mask, save_field
from .network import MlpConfig, param_count, weight_bias_count
from .solver import SolveConfig, SolveReport, error_metrics, solve, strain
from .baseline import SubsetConfig, edge_band, subset_solve
from .simulate import Linear, Rigid, SpeckleConfig, Star, make_pair, speckle_preset

__all__ = [
    "RoiMask", "ScalarField", "VectorField2", "load_field", "load_image", "load_mask", "save_field",
    "MlpConfig", "param_count", "weight_bias_count",
    "SolveConfig", "SolveReport", "error_metrics", "solve", "strain",
    "SubsetConfig", "edge_band", "subset_solve",
    "Linear", "Rigid", "SpeckleConfig", "Star", "make_pair", "speckle_preset",
]
