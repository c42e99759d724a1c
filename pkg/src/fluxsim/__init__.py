"""Deterministic simulator of HPC MiniClusters running on a Kubernetes-like substrate."""

from .api import ApiRequest, ApiResponse, TenancyApi
from .autoscaler import Autoscaler, ScaleMode, ScalePolicy, desired_replicas
from .burst import BurstManager, LocalPlugin, MockPlugin, burst_check
from .engine import Engine, LatencyModel, dump_log, load_log
from .harness import MetricsRecord, compare_topologies, cost_report, run_scenario
from .jobqueue import FairShareLedger, Instance, ResourceGraph, wall_time_model
from .minicluster import ClusterLatencies, ImagePolicy, MiniCluster
from .model import ClusterConfig, JobSpec, JobState, MiniClusterSpec, NodeSpec, ResourceShape
from .overlay import BrokerPhase, Overlay, RetryPolicy, Topology
from .reconciler import DesiredState, PodInstance, PodPhase, reconcile, request_resize
from .scenario import Scenario, load_scenario, parse_scenario

__version__ = "0.1.0"

__all__ = [
    "ApiRequest", "ApiResponse", "Autoscaler", "BrokerPhase", "BurstManager", "ClusterConfig", "ClusterLatencies",
    "DesiredState", "Engine", "FairShareLedger", "ImagePolicy", "Instance", "JobSpec", "JobState", "LatencyModel",
    "LocalPlugin", "MetricsRecord", "MiniCluster", "MiniClusterSpec", "MockPlugin", "NodeSpec", "Overlay",
    "PodInstance", "PodPhase", "ResourceGraph", "ResourceShape", "RetryPolicy", "ScaleMode", "ScalePolicy",
    "Scenario", "TenancyApi", "Topology", "burst_check", "compare_topologies", "cost_report", "desired_replicas",
    "dump_log", "load_log", "load_scenario", "parse_scenario", "reconcile", "request_resize", "run_scenario",
    "wall_time_model",
]
