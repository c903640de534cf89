"""Executable headers built from a block DAG over the backbone's patch grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from acmesim.errors import ShapeError
from acmesim.nas.space import HeaderDAG
from acmesim.nn import tensor as T
from acmesim.nn.layers import dense
from acmesim.nn.network import Network
from acmesim.nn.tensor import Tensor
from acmesim.nn.transformer import BackboneOutputs

CONV_KERNELS = {"conv1x1": 1, "conv3x3": 3, "conv5x5": 5}


@dataclass(frozen=True)
class HeaderDims:
    embed_dim: int  # backbone token width
    grid: int  # patch grid side
    channels: int  # header feature channels
    mlp_hidden: int = 32

    @classmethod
    def for_backbone(cls, cfg, channels: int | None = None, mlp_hidden: int = 32) -> "HeaderDims":
        return cls(cfg.hidden_dim, cfg.grid, channels or cfg.hidden_dim, mlp_hidden)


class SharedWeights(Network):
    """Parameter bundles keyed by (repeat, block, branch, op) path, created on demand.

    Initial values depend only on the path, so creation order is irrelevant.
    """

    def __init__(self, seed: int = 0):
        super().__init__(seed)

    def get(self, name: str, shape, kind: str = "weight") -> Tensor:
        t = self.params.get(name)
        if t is None:
            return self.new_param(name, shape, kind)
        if t.shape != tuple(shape):
            raise ShapeError(name, tuple(shape), t.shape)
        return t


def _spatial(t: Tensor) -> int:
    return t.shape[-1]


def _halve(x: Tensor) -> Tensor:
    return x[:, :, ::2, ::2]


def _match(a: Tensor, size: int, where: str) -> Tensor:
    s = _spatial(a)
    while s > size:
        a = _halve(a)
        s = _spatial(a)
    if s != size:
        raise ShapeError(where, size, s)
    return a


def bridge(ts: list[Tensor], where: str) -> list[Tensor]:
    """Downsample larger maps until every map has the smallest spatial size."""
    size = min(_spatial(t) for t in ts)
    return [_match(t, size, where) for t in ts]


class HeaderNet(Network):
    """Repeated block modules, then pooled loose ends + CLS into an MLP.

    Parameters come from ``store`` when given (weight sharing across sampled
    children) or are owned by the header otherwise. Masks cover conv output
    channels (``<op path>.channels``) and MLP hidden units (``tail.neurons``).
    """

    def __init__(self, dag: HeaderDAG, dims: HeaderDims, num_classes: int,
                 store: SharedWeights | None = None, seed: int = 0):
        super().__init__(seed)
        self.dag = dag
        self.dims = dims
        self.num_classes = num_classes
        self.store = store
        self.sections: list[list[str]] = [[] for _ in range(dag.repeats)]
        self.adapters: list[str] = []
        self.convs: list[str] = []
        self._branch: dict[tuple[int, int, int], str] = {}
        self._build()

    # -- parameters
    def _param(self, name: str, shape, kind: str = "weight") -> Tensor:
        if self.store is not None:
            t = self.store.get(name, shape, kind)
            self.params[name] = t
            return t
        return self.new_param(name, shape, kind)

    def _input_channels(self, u: int, idx: int) -> int:
        # repeat 0 reads backbone maps; later repeats read earlier repeat outputs
        if idx >= 2:
            return self.dims.channels
        if u == 0 or u + idx - 2 < 0:
            return self.dims.embed_dim
        return self.dims.channels

    def _build(self) -> None:
        dag, dims = self.dag, self.dims
        C = dims.channels
        loose = dag.loose_ends()
        for u in range(dag.repeats):
            for b, blk in enumerate(dag.blocks):
                for j, (i, o) in enumerate(((blk.i1, blk.o1), (blk.i2, blk.o2))):
                    op = dag.opset[o]
                    cin = self._input_channels(u, i)
                    pre = f"r{u}.b{b}.j{j}"
                    # the input width joins the key only when it differs from C
                    key = f"{pre}.{op}" if cin == C else f"{pre}.{op}_c{cin}"
                    self._branch[(u, b, j)] = key
                    if op in CONV_KERNELS:
                        k = CONV_KERNELS[op]
                        self._param(f"{key}.w", (C, cin, k, k))
                        self._param(f"{key}.b", (C,), "zeros")
                        self.sections[u] += [f"{key}.w", f"{key}.b"]
                        self.convs.append(key)
                        self.masks[f"{key}.channels"] = np.ones(C)
                    elif cin != C:
                        self._param(f"{key}.adapt.w", (C, cin, 1, 1))
                        self._param(f"{key}.adapt.b", (C,), "zeros")
                        self.adapters += [f"{key}.adapt.w", f"{key}.adapt.b"]
            if u < dag.repeats - 1 and len(loose) > 1:
                n = len(loose)
                self._param(f"r{u}.reduce_n{n}.w", (C, n * C, 1, 1))
                self._param(f"r{u}.reduce_n{n}.b", (C,), "zeros")
        n = len(loose)
        fin = n * C + dims.embed_dim
        self._param(f"tail.fc1_n{n}.w", (fin, dims.mlp_hidden))
        self._param(f"tail.fc1_n{n}.b", (dims.mlp_hidden,), "zeros")
        self._param("tail.fc2.w", (dims.mlp_hidden, self.num_classes))
        self._param("tail.fc2.b", (self.num_classes,), "zeros")
        self.masks["tail.neurons"] = np.ones(dims.mlp_hidden)
        self.fc1 = f"tail.fc1_n{n}"

    def section_param_count(self, u: int) -> int:
        return int(sum(self.params[p].data.size for p in self.sections[u]))

    def adapter_param_count(self) -> int:
        return int(sum(self.params[p].data.size for p in self.adapters))

    # -- graph
    def _to_grid(self, t: Tensor) -> Tensor:
        b, n, d = t.shape
        g = self.dims.grid
        if n - 1 != g * g:
            raise ShapeError("header.input", 1 + g * g, n)
        x = T.reshape(t[:, 1:, :], (b, g, g, d))
        return T.transpose(x, (0, 3, 1, 2))

    def _op(self, op: str, x: Tensor, key: str) -> Tensor:
        P = self.params
        if op in CONV_KERNELS:
            y = T.gelu(T.conv2d(x, P[f"{key}.w"], P[f"{key}.b"]))
            return y * self.masks[f"{key}.channels"].reshape(1, -1, 1, 1)
        if f"{key}.adapt.w" in P:
            x = T.conv2d(x, P[f"{key}.adapt.w"], P[f"{key}.adapt.b"])
        if op == "identity":
            return x
        if op == "downsample":
            return _halve(x)
        if op == "avgpool3x3":
            return T.avg_pool2d(x, 3, 1)
        if op == "maxpool3x3":
            return T.max_pool2d(x, 3, 1)
        raise ValueError(f"unknown op {op}")

    def _module(self, u: int, prev2: Tensor, prev1: Tensor) -> list[Tensor]:
        dag = self.dag
        nodes = [prev2, prev1]
        for b, blk in enumerate(dag.blocks):
            ys = []
            for j, (i, o) in enumerate(((blk.i1, blk.o1), (blk.i2, blk.o2))):
                ys.append(self._op(dag.opset[o], nodes[i], self._branch[(u, b, j)]))
            y1, y2 = bridge(ys, f"r{u}.b{b}.combine")
            nodes.append(y1 + y2)
        return [nodes[2 + b] for b in dag.loose_ends()]

    def head(self, out: BackboneOutputs) -> Tensor:
        P = self.params
        prev2 = self._to_grid(out.penultimate)
        prev1 = self._to_grid(out.final)
        cls = out.final[:, 0, :]
        dag = self.dag
        for u in range(dag.repeats):
            loose = bridge(self._module(u, prev2, prev1), f"r{u}.concat")
            if u == dag.repeats - 1:
                feat = T.concat(loose, axis=1) if len(loose) > 1 else loose[0]
                pooled = T.mean(feat, axis=(2, 3))
                z = T.concat([pooled, cls], axis=1)
                hdn = T.gelu(dense(z, P[f"{self.fc1}.w"], P[f"{self.fc1}.b"]))
                self.record("tail.neurons", hdn)
                hdn = hdn * self.masks["tail.neurons"]
                return dense(hdn, P["tail.fc2.w"], P["tail.fc2.b"])
            if len(loose) > 1:
                n = len(loose)
                cur = T.conv2d(T.concat(loose, axis=1), P[f"r{u}.reduce_n{n}.w"],
                               P[f"r{u}.reduce_n{n}.b"])
            else:
                cur = loose[0]
            prev2, prev1 = prev1, cur
        raise AssertionError("unreachable")

    # -- copies
    def detached(self) -> "HeaderNet":
        """A standalone header owning copies of the current parameter values."""
        new = HeaderNet(self.dag, self.dims, self.num_classes, None, self.seed)
        for k, t in self.params.items():
            new.params[k].data = t.data.copy()
        for k, m in self.masks.items():
            new.masks[k] = m.copy()
        return new

    def copy(self) -> "HeaderNet":
        return self.detached()


def instantiate_header(dag: HeaderDAG, dims: HeaderDims, num_classes: int,
                       store: SharedWeights | None = None, seed: int = 0) -> HeaderNet:
    return HeaderNet(dag, dims, num_classes, store, seed)
