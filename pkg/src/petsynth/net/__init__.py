"""Declarative network graphs with a pure-numpy forward/backward engine."""

from .graph import (
    LayerSpec,
    NetworkGraph,
    build_network,
    count_parameters,
    graph_manifest,
    init_params,
    propagate_shapes,
)
from .model import backward, forward

__all__ = [
    "LayerSpec",
    "NetworkGraph",
    "build_network",
    "count_parameters",
    "graph_manifest",
    "init_params",
    "propagate_shapes",
    "forward",
    "backward",
]
