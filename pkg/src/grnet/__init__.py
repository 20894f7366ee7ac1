"""Graph reasoning over a similarity pyramid for query/gallery retrieval."""

from .autodiff import Parameter, Tensor, grad_check, no_grad
from .config import RunConfig
from .errors import GRNetError
from .pyramid import PyramidConfig, extract_pyramid
from .reasoning import ModelParams, ReasoningConfig, forward, loss
from .simgraph import EdgeMask, build_nodes, edge_weights

__version__ = "0.1.0"

__all__ = [
    "EdgeMask", "GRNetError", "ModelParams", "Parameter", "PyramidConfig", "ReasoningConfig",
    "RunConfig", "Tensor", "build_nodes", "edge_weights", "extract_pyramid", "forward",
    "grad_check", "loss", "no_grad",
]
