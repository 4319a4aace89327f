"""Topology configuration: JSON schema, defaults, validation.

Default tier timings (overridable; all acceptance properties hold under any
monotone setting): T1 10us / 2 GiB/s, T2 80us / 1 GiB/s, T3 4ms / 200 MiB/s,
T4 12ms / 100 MiB/s. Bandwidths are binary units so the documented
integer-microsecond arithmetic is exact.
"""

from __future__ import annotations

import json
import os

from .cluster import ClusterTopology, NetworkSpec
from .errors import InvalidTopology
from .layout import TierSpec

GIB = 1 << 30
MIB = 1 << 20

TIER_DEFAULTS = {
    1: {"media": "NVME_NVRAM", "latency_us": 10, "bandwidth_bps": 2 * GIB},
    2: {"media": "SAS_SSD", "latency_us": 80, "bandwidth_bps": 1 * GIB},
    3: {"media": "PERF_DISK", "latency_us": 4_000, "bandwidth_bps": 200 * MIB},
    4: {"media": "ARCHIVE_DISK", "latency_us": 12_000, "bandwidth_bps": 100 * MIB},
}

DEFAULT_NETWORK = {"latency_us": 50, "bandwidth_bps": 4 * GIB}


def topology_from_json(doc: dict, seed_override: int | None = None) -> ClusterTopology:
    seed = doc.get("seed", 0)
    env_seed = os.environ.get("SAGE_SEED")
    if env_seed is not None:
        seed = int(env_seed)
    if seed_override is not None:
        seed = seed_override

    tiers = []
    for t in doc.get("tiers", []):
        tid = int(t["tier_id"])
        defaults = TIER_DEFAULTS.get(tid, {})
        tiers.append(TierSpec(
            tier_id=tid,
            media=t.get("media", defaults.get("media", "PERF_DISK")),
            device_count=int(t["device_count"]),
            device_capacity=int(t["device_capacity_blocks"]),
            latency_us=int(t.get("latency_us", defaults.get("latency_us", 1000))),
            bandwidth_bps=int(t.get("bandwidth_bps", defaults.get("bandwidth_bps", MIB))),
        ))

    nodes = []
    for n in doc.get("nodes", []):
        devs = tuple((int(t), int(i)) for t, i in n.get("devices", []))
        nodes.append((str(n["node_id"]), devs))

    net = doc.get("network", {})
    network = NetworkSpec(
        latency_us=int(net.get("latency_us", DEFAULT_NETWORK["latency_us"])),
        bandwidth_bps=int(net.get("bandwidth_bps", DEFAULT_NETWORK["bandwidth_bps"])),
    )
    topo = ClusterTopology(seed=seed, tiers=tuple(tiers), nodes=tuple(nodes),
                           network=network)
    topo.validate()
    return topo


def load_topology(path: str, seed_override: int | None = None) -> ClusterTopology:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidTopology(f"cannot load topology config {path}: {exc}")
    return topology_from_json(doc, seed_override)


def make_topology(seed: int = 0, nodes: int = 4, devices_per_tier: int = 4,
                  device_capacity: int = 4096,
                  tiers: tuple[int, ...] = (1, 2, 3, 4),
                  capacities: dict[int, int] | None = None) -> ClusterTopology:
    """Programmatic topology: tier devices dealt round-robin across nodes."""
    tier_specs = []
    for tid in tiers:
        d = TIER_DEFAULTS[tid]
        cap = (capacities or {}).get(tid, device_capacity)
        tier_specs.append(TierSpec(tier_id=tid, media=d["media"],
                                   device_count=devices_per_tier,
                                   device_capacity=cap,
                                   latency_us=d["latency_us"],
                                   bandwidth_bps=d["bandwidth_bps"]))
    assignment: dict[str, list[tuple[int, int]]] = {
        f"node{i}": [] for i in range(nodes)}
    for tid in tiers:
        for idx in range(devices_per_tier):
            assignment[f"node{idx % nodes}"].append((tid, idx))
    node_list = tuple((n, tuple(devs)) for n, devs in assignment.items())
    topo = ClusterTopology(
        seed=seed, tiers=tuple(tier_specs), nodes=node_list,
        network=NetworkSpec(**DEFAULT_NETWORK))
    topo.validate()
    return topo


def topology_to_json(topo: ClusterTopology) -> dict:
    return {
        "seed": topo.seed,
        "tiers": [{
            "tier_id": t.tier_id, "media": t.media,
            "device_count": t.device_count,
            "device_capacity_blocks": t.device_capacity,
            "latency_us": t.latency_us, "bandwidth_bps": t.bandwidth_bps,
        } for t in topo.tiers],
        "nodes": [{"node_id": n, "devices": [list(d) for d in devs]}
                  for n, devs in topo.nodes],
        "network": {"latency_us": topo.network.latency_us,
                    "bandwidth_bps": topo.network.bandwidth_bps},
    }
