import hypothesis
import pytest

from flowstack.access import ResourceAccess
from flowstack.pilot import PilotRuntime
from flowstack.simcluster import QueueTimeModel
from flowstack.tracking import VirtualClock, standard_registry
from flowstack.workflow import TaskDescription
from flowstack.workload import ResourceCatalogEntry, WorkloadManager

hypothesis.settings.register_profile(
    "suite", max_examples=60, deadline=None,
    suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.load_profile("suite")


def make_task(uid, executable="echo", arguments=(), duration=2.0, cpu=1, gpu=0,
              parallelism="serial", **kw):
    return TaskDescription(uid=uid, executable=executable,
                           arguments=tuple(str(a) for a in arguments),
                           parallelism=parallelism, cpu_count=cpu, gpu_count=gpu,
                           expected_duration_s=duration, **kw)


def local_entry(resource_id="local", nodes=2, cores_per_node=8, gpus_per_node=0,
                max_walltime_s=3600.0):
    return ResourceCatalogEntry(
        resource_id=resource_id, nodes=nodes, cores_per_node=cores_per_node,
        gpus_per_node=gpus_per_node, max_walltime_s=max_walltime_s,
        backend="local", queue_time_model=QueueTimeModel.constant(0.0))


def sim_entry(resource_id, delay_s=None, nodes=2, cores_per_node=8,
              gpus_per_node=0, max_walltime_s=3600.0, model=None):
    if model is None:
        model = (QueueTimeModel.backlog() if delay_s is None
                 else QueueTimeModel.constant(delay_s))
    return ResourceCatalogEntry(
        resource_id=resource_id, nodes=nodes, cores_per_node=cores_per_node,
        gpus_per_node=gpus_per_node, max_walltime_s=max_walltime_s,
        backend="simbatch", queue_time_model=model)


class Stack:
    """One registry + access + runtime + manager wired over a catalog."""

    def __init__(self, entries, run_dir, virtual=False, backfill=False, cap=32):
        self.entries = entries
        self.registry = standard_registry(VirtualClock() if virtual else None)
        self.access = ResourceAccess(entries, self.registry, run_dir=run_dir)
        self.runtime = PilotRuntime(self.access, self.registry, run_dir,
                                    backfill=backfill)
        self.manager = WorkloadManager(entries, self.runtime, concurrency_cap=cap)


@pytest.fixture
def local_stack(tmp_path):
    def build(entries=None, **kw):
        return Stack(entries or [local_entry()], tmp_path, virtual=False, **kw)
    return build


@pytest.fixture
def sim_stack(tmp_path):
    def build(entries, **kw):
        return Stack(entries, tmp_path, virtual=True, **kw)
    return build
