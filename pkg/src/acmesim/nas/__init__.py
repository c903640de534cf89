"""Header architecture search: space, executable headers, controller, search loop."""

from acmesim.nas.controller import Controller, update_controller
from acmesim.nas.header import HeaderDims, HeaderNet, SharedWeights, instantiate_header
from acmesim.nas.search import NASConfig, run_phase2_stage1, train_shared_weights
from acmesim.nas.space import (BlockSpec, HeaderDAG, OperationSet, enumerate_dags,
                               search_space_size)

__all__ = ["BlockSpec", "Controller", "HeaderDAG", "HeaderDims", "HeaderNet", "NASConfig",
           "OperationSet", "SharedWeights", "enumerate_dags", "instantiate_header",
           "run_phase2_stage1", "search_space_size", "train_shared_weights",
           "update_controller"]
