"""Finite-difference checks for every layer type the substrate provides.

Each case wraps one layer in a small :class:`FunctionNet` whose input passes
through a learnable additive offset, so parameter-free layers (pooling,
softmax, losses) are still probed through their input gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from acmesim.nn import tensor as T
from acmesim.nn.layers import attention_heads, dense, lstm_cell, merge_heads
from acmesim.nn.network import GradCheckReport, Network, grad_check
from acmesim.nn.tensor import Tensor


class FunctionNet(Network):
    """A network defined by a dict of parameter shapes and a graph callable."""

    def __init__(self, shapes: dict[str, tuple], fn: Callable[[dict, Tensor], Tensor],
                 input_shape: tuple, seed: int = 0, std: float = 0.5):
        super().__init__(seed)
        self.fn = fn
        self.input_shape = tuple(input_shape)
        for name, shape in shapes.items():
            self.new_param(name, shape, std=std)

    def graph(self, x: Tensor) -> Tensor:
        return self.fn(self.params, x)


@dataclass
class SuiteCase:
    name: str
    net: Network
    batch: np.ndarray
    loss_fn: Callable[[Tensor], Tensor] | None = None


def _with_offset(shape, extra: dict, fn) -> tuple[dict, Callable]:
    shapes = {"offset": tuple(shape), **extra}
    return shapes, lambda P, x: fn(P, x + P["offset"])


def build_cases(seed: int = 0) -> list[SuiteCase]:
    rng = np.random.default_rng(seed)
    cases: list[SuiteCase] = []

    def add(name, in_shape, extra, fn, batch_size=3, loss_fn=None):
        shapes, g = _with_offset(in_shape, extra, fn)
        net = FunctionNet(shapes, g, in_shape, seed=seed)
        cases.append(SuiteCase(name, net, rng.standard_normal((batch_size,) + tuple(in_shape)),
                               loss_fn))

    add("dense", (6,), {"w": (6, 5), "b": (5,)}, lambda P, x: dense(x, P["w"], P["b"]))
    add("layer_norm", (4, 6), {"g": (6,), "b": (6,)},
        lambda P, x: T.layer_norm(x, P["g"], P["b"]))
    add("gelu", (8,), {}, lambda P, x: T.gelu(x))
    add("softmax", (5, 7), {}, lambda P, x: T.softmax(x, axis=-1))
    add("log_softmax", (5, 7), {}, lambda P, x: T.log_softmax(x, axis=-1))

    d, h, hd = 6, 2, 3
    mhsa = {"wq": (h, d, hd), "bq": (h, 1, hd), "wk": (h, d, hd), "bk": (h, 1, hd),
            "wv": (h, d, hd), "bv": (h, 1, hd), "wo": (h, hd, d), "bo": (d,)}

    def attn(P, x):
        heads, _ = attention_heads(x, P["wq"], P["bq"], P["wk"], P["bk"], P["wv"], P["bv"])
        return merge_heads(heads, P["wo"], P["bo"])

    add("mhsa", (4, d), mhsa, attn)

    def mlp(P, x):
        return dense(T.gelu(dense(x, P["w1"], P["b1"])), P["w2"], P["b2"])

    add("mlp", (4, d), {"w1": (d, 10), "b1": (10,), "w2": (10, d), "b2": (d,)}, mlp)

    def block(P, x):
        a = T.layer_norm(x, P["g1"], P["c1"])
        x = x + attn(P, a)
        m = T.layer_norm(x, P["g2"], P["c2"])
        return x + mlp(P, m)

    add("transformer_block", (4, d),
        {**mhsa, "g1": (d,), "c1": (d,), "g2": (d,), "c2": (d,),
         "w1": (d, 10), "b1": (10,), "w2": (10, d), "b2": (d,)}, block)

    nh, nx = 4, 5

    def lstm(P, x):
        hs, cs = P["h0"], P["c0"]
        outs = []
        for t in range(x.shape[1]):
            hs, cs = lstm_cell(x[:, t, :], hs, cs, P["wx"], P["wh"], P["b"])
            outs.append(hs)
        return T.concat(outs, axis=-1)

    add("lstm_cell", (3, nx), {"wx": (nx, 4 * nh), "wh": (nh, 4 * nh), "b": (4 * nh,),
                               "h0": (1, nh), "c0": (1, nh)}, lstm)

    cin, cout, g = 3, 4, 5
    for k, stride in ((1, 1), (3, 1), (5, 1), (3, 2)):
        add(f"conv{k}x{k}_s{stride}", (cin, g, g), {"w": (cout, cin, k, k), "b": (cout,)},
            lambda P, x, s=stride: T.conv2d(x, P["w"], P["b"], stride=s), batch_size=2)
    add("downsample", (cin, g, g), {}, lambda P, x: x[:, :, ::2, ::2], batch_size=2)
    add("avg_pool", (cin, g, g), {}, lambda P, x: T.avg_pool2d(x, 3, 1), batch_size=2)
    add("max_pool", (cin, g, g), {}, lambda P, x: T.max_pool2d(x, 3, 1), batch_size=2)

    labels = rng.integers(0, 5, size=4)
    add("cross_entropy", (5,), {}, lambda P, x: x, batch_size=4,
        loss_fn=lambda out: T.cross_entropy(out, labels))
    target = rng.standard_normal((4, 5))
    add("mse", (5,), {}, lambda P, x: x, batch_size=4, loss_fn=lambda out: T.mse(out, target))
    return cases


@dataclass
class SuiteResult:
    reports: dict[str, GradCheckReport]
    seconds: float

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.reports.values())

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports.values())


def run_suite(probes: int = 100, tol: float = 1e-4, seed: int = 0) -> SuiteResult:
    start = time.perf_counter()
    reports = {}
    for case in build_cases(seed):
        reports[case.name] = grad_check(case.net, case.batch, tol=tol, probes=probes, seed=seed,
                                        loss_fn=case.loss_fn)
    return SuiteResult(reports, time.perf_counter() - start)
