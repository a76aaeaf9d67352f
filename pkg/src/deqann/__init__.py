"""Deep equilibrium image classifiers with Anderson-accelerated fixed-point solves."""

from .deq import (DeqModel, EquilibriumError, ModelFormatError, TrainConfig, deq_backward,
                  deq_cell, deq_forward, evaluate, init_model, load_model, save_model, train)
from .estimator import DEQClassifier, GraphImageTransformer
from .fixedpoint import (DivergenceError, SolverConfig, SolverTrace, anderson_solve,
                         forward_iterate, relative_residual, solve_alpha)
from .graphimage import (LabeledImage, MolecularStructure, NeighborGraph, build_neighbor_graph,
                         parse_xyz, prepare_dataset, render_graph_image)

__version__ = "0.1.0"

__all__ = [
    "DEQClassifier", "DeqModel", "DivergenceError", "EquilibriumError", "GraphImageTransformer",
    "LabeledImage", "ModelFormatError", "MolecularStructure", "NeighborGraph", "SolverConfig",
    "SolverTrace", "TrainConfig", "anderson_solve", "build_neighbor_graph", "deq_backward",
    "deq_cell", "deq_forward", "evaluate", "forward_iterate", "init_model", "load_model",
    "parse_xyz", "prepare_dataset", "relative_residual", "render_graph_image", "save_model",
    "solve_alpha", "train",
]
