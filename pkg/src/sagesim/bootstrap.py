"""Assemble a full environment: substrate plus every subsystem wired up."""

from __future__ import annotations

from dataclasses import dataclass

from .access import ClientContext
from .cluster import ClusterTopology, SageCluster
from .dtm import DtmEngine
from .funcship import FunctionShipping
from .ha import HaSubsystem
from .hsm import HsmEngine, HsmPolicy


@dataclass
class SageEnv:
    cluster: SageCluster
    dtm: DtmEngine
    ctx: ClientContext
    ha: HaSubsystem
    hsm: HsmEngine
    funcs: FunctionShipping

    @classmethod
    def boot(cls, topology: ClusterTopology, policy: HsmPolicy | None = None,
             keep_trace: bool = True) -> "SageEnv":
        cluster = SageCluster(topology, keep_trace=keep_trace)
        dtm = DtmEngine(cluster)
        ctx = ClientContext(cluster, dtm)
        ha = HaSubsystem(cluster, dtm, ctx)
        hsm = HsmEngine(cluster, dtm, ctx, policy)
        funcs = FunctionShipping(cluster, ctx)
        return cls(cluster=cluster, dtm=dtm, ctx=ctx, ha=ha, hsm=hsm, funcs=funcs)

    @property
    def root(self):
        return self.cluster.root_realm

    def quiesce(self, max_events: int | None = None):
        return self.cluster.run_until(quiescent=True, max_events=max_events)

    def telemetry_dump(self, subsystem_prefix: str = "", event_prefix: str = ""):
        return self.cluster.telemetry.dump(subsystem_prefix, event_prefix)
