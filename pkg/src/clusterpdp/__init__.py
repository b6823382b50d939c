"""Cluster-aware attention policies for the single-vehicle pickup and delivery problem."""

from clusterpdp.errors import PdpError
from clusterpdp.instances import PdpInstance, NodeRole, gen_clustered, gen_uniform, distance_matrix

__all__ = [
    "PdpError",
    "PdpInstance",
    "NodeRole",
    "gen_clustered",
    "gen_uniform",
    "distance_matrix",
]

__version__ = "0.1.0"
