"""Deterministic multi-tier object store simulator.

A desk-scale storage cluster with failure-atomic distributed transactions,
erasure-coded placement, automated repair, function shipping and
hierarchical storage management, all on a discrete-event substrate with
failure injection.
"""

from .bootstrap import SageEnv
from .cluster import ClusterTopology, NetworkSpec, SageCluster
from .config import load_topology, make_topology, topology_from_json
from .ids import EntityId, EntityKind
from .layout import Layout, Replication, Striped, SubLayout, TierSpec

__all__ = [
    "SageEnv", "SageCluster", "ClusterTopology", "NetworkSpec",
    "load_topology", "make_topology", "topology_from_json",
    "EntityId", "EntityKind",
    "Layout", "SubLayout", "Replication", "Striped", "TierSpec",
]

__version__ = "0.1.0"
