"""Multi-scale DAG convolutional networks in plain numpy.

A small framework whose models are directed acyclic graphs: a convolutional
backbone whose ReLU layers feed pooled, normalized linear heads that are
summed into the class scores.
"""

__version__ = "0.1.0"

from ._kernels import ACTIVE as kernels
from .data import Dataset, SynthTaskConfig, load_idx, prepare, synth_multiscale
from .graph import (ExecContext, Graph, Kind, backward, backward_reference, forward, load_model,
                    save_model, topo_order)
from .multiscale import BackboneSpec, build_chain, build_multiscale, multiscale_feature
from .select import HeadTrainer, LayerFeatureBank, SelectionTrace, extract_feature_bank, forward_select
from .train import TrainConfig, evaluate, gradient_check, grad_trace_experiment, train

__all__ = [
    "BackboneSpec", "Dataset", "ExecContext", "Graph", "HeadTrainer", "Kind", "LayerFeatureBank",
    "SelectionTrace", "SynthTaskConfig", "TrainConfig", "backward", "backward_reference", "build_chain",
    "build_multiscale", "evaluate", "extract_feature_bank", "forward", "forward_select", "grad_trace_experiment",
    "gradient_check", "kernels", "load_idx", "load_model", "multiscale_feature", "prepare", "save_model",
    "synth_multiscale", "topo_order", "train",
]
