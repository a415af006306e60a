"""Composable workflow middleware blocks.

Four independently usable layers sharing one state/event/error discipline:
workflow description (pipelines of stages of tasks), workload management
(resource selection, partitioning, late binding), a pilot task runtime, and
a homogeneous job layer over a real local backend and a simulated batch
cluster.
"""

from .tracking import (EntityRegistry, MonotonicClock, VirtualClock,
                       standard_registry)
from .workflow import (AdaptivityHook, Pipeline, RunReport, Stage,
                       StagingDirective, TaskDescription, Workflow,
                       import_dag, load_workflow, ready_frontier, run,
                       validate_workflow)
from .workload import (PartitionPlan, ResourceCatalogEntry, Workload,
                       WorkloadManager, derive_pilot_description, load_catalog,
                       partition, select_resources)
from .pilot import ComputeUnit, Pilot, PilotDescription, PilotRuntime, SlotMap
from .access import JobDescription, ResourceAccess
from .simcluster import QueueTimeModel, SimCluster

__version__ = "0.1.0"

__all__ = [
    "AdaptivityHook", "ComputeUnit", "EntityRegistry", "JobDescription",
    "MonotonicClock", "PartitionPlan", "Pilot", "PilotDescription",
    "PilotRuntime", "Pipeline", "QueueTimeModel", "ResourceAccess",
    "ResourceCatalogEntry", "RunReport", "SimCluster", "SlotMap", "Stage",
    "StagingDirective", "TaskDescription", "VirtualClock", "Workflow",
    "Workload", "WorkloadManager", "derive_pilot_description", "import_dag",
    "load_catalog", "load_workflow", "partition", "ready_frontier", "run",
    "select_resources", "standard_registry", "validate_workflow",
]
