"""Deployment harness: topology planning, launch, scenario, benchmark."""

from .topology import (  # noqa: F401
    InstitutionSpec,
    PatientSpec,
    Topology,
    TopologyPlan,
    TopologySpec,
    launch_processes,
    launch_threads,
    load_state,
    load_topology_spec,
    plan_topology,
    stop_state,
)
