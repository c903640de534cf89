"""Deterministic float64 network substrate with hand-derived gradients."""

from acmesim.nn.network import (
    GradCheckReport,
    GradientStore,
    Network,
    backward,
    dump_params,
    forward,
    grad_check,
    load_params,
    parse_params,
    save_params,
    sgd_step,
    tensor_grads,
)
from acmesim.nn.tensor import Tensor, no_grad
from acmesim.nn.transformer import (
    BackboneOutputs,
    Classifier,
    LinearHeader,
    TransformerConfig,
    ViTBackbone,
)

__all__ = [
    "BackboneOutputs", "Classifier", "GradCheckReport", "GradientStore", "LinearHeader",
    "Network", "Tensor", "TransformerConfig", "ViTBackbone", "backward", "dump_params",
    "forward", "grad_check", "load_params", "no_grad", "parse_params", "save_params",
    "sgd_step", "tensor_grads",
]
