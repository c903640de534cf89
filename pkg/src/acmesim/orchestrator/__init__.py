"""Cloud / edge / device simulation: partitioning, message exchange and traffic accounting."""

from acmesim.orchestrator.messages import Message
from acmesim.orchestrator.pipeline import RunResult, run_full_pipeline
from acmesim.orchestrator.topology import Topology, partition_devices
from acmesim.orchestrator.traffic import (
    TrafficLedger,
    account_traffic,
    compare_search_space,
    declared_accounting,
)

__all__ = ["Message", "RunResult", "Topology", "TrafficLedger", "account_traffic",
           "compare_search_space", "declared_accounting", "partition_devices",
           "run_full_pipeline"]
