"""A tiny pre-LN vision transformer over pre-patched inputs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from acmesim.nn import tensor as T
from acmesim.nn.layers import attention_heads, dense, merge_heads
from acmesim.nn.network import Network
from acmesim.nn.tensor import Tensor


def scaled(w: float, n: int) -> int:
    """ceil(w * n), tolerant of float noise such as 0.3 * 10 = 3.0000000000000004."""
    return max(0, math.ceil(w * n - 1e-9))


@dataclass(frozen=True)
class TransformerConfig:
    depth: int
    num_heads: int
    hidden_dim: int
    ffn_dim: int
    num_patches: int
    num_classes: int
    patch_dim: int
    width_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.width_fraction <= 1.0:
            raise ValueError(f"width_fraction must lie in (0, 1], got {self.width_fraction}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.heads < 1:
            raise ValueError("width fraction leaves no attention heads")
        if self.ffn < 1:
            raise ValueError("width fraction leaves no MLP neurons")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def heads(self) -> int:
        return scaled(self.width_fraction, self.num_heads)

    @property
    def ffn(self) -> int:
        return scaled(self.width_fraction, self.ffn_dim)

    @property
    def attn_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def grid(self) -> int:
        g = int(round(math.sqrt(self.num_patches)))
        if g * g != self.num_patches:
            raise ValueError("num_patches must be a perfect square for the patch grid")
        return g

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BackboneOutputs:
    embeddings: Tensor
    hidden: list[Tensor]
    final: Tensor
    penultimate: Tensor = field(repr=False, default=None)


class ViTBackbone(Network):
    """Patch embedding, CLS token, ``depth`` pre-LN blocks, final layer norm.

    Attention weights are stored head-major (``wq`` is (h, D, hd)) so heads
    can be reordered or sliced without reshaping. Per-layer head and neuron
    counts may differ from the config after physical pruning.
    """

    def __init__(self, cfg: TransformerConfig, layer_heads: list[int] | None = None,
                 layer_ffn: list[int] | None = None):
        super().__init__(cfg.seed)
        self.cfg = cfg
        self.layer_heads = list(layer_heads or [cfg.heads] * cfg.depth)
        self.layer_ffn = list(layer_ffn or [cfg.ffn] * cfg.depth)
        self.input_shape = (cfg.num_patches, cfg.patch_dim)
        d, hd = cfg.hidden_dim, cfg.head_dim
        self.new_param("embed.w", (cfg.patch_dim, d))
        self.new_param("embed.b", (d,), "zeros")
        self.new_param("cls", (1, 1, d))
        self.new_param("pos", (1, cfg.num_patches + 1, d))
        for i, (h, f) in enumerate(zip(self.layer_heads, self.layer_ffn)):
            p = f"layers.{i}"
            self.new_param(f"{p}.ln1.g", (d,), "ones")
            self.new_param(f"{p}.ln1.b", (d,), "zeros")
            for n in ("q", "k", "v"):
                self.new_param(f"{p}.attn.w{n}", (h, d, hd))
                self.new_param(f"{p}.attn.b{n}", (h, 1, hd), "zeros")
            self.new_param(f"{p}.attn.wo", (h, hd, d))
            self.new_param(f"{p}.attn.bo", (d,), "zeros")
            self.new_param(f"{p}.ln2.g", (d,), "ones")
            self.new_param(f"{p}.ln2.b", (d,), "zeros")
            self.new_param(f"{p}.mlp.w1", (d, f))
            self.new_param(f"{p}.mlp.b1", (f,), "zeros")
            self.new_param(f"{p}.mlp.w2", (f, d))
            self.new_param(f"{p}.mlp.b2", (d,), "zeros")
            self.masks[f"{p}.attn.heads"] = np.ones(h)
            self.masks[f"{p}.mlp.neurons"] = np.ones(f)
        self.new_param("final_ln.g", (d,), "ones")
        self.new_param("final_ln.b", (d,), "zeros")

    @property
    def depth(self) -> int:
        return len(self.layer_heads)

    def encode(self, x: Tensor) -> BackboneOutputs:
        P = self.params
        b = x.shape[0]
        tok = dense(x, P["embed.w"], P["embed.b"])
        cls = T.matmul(Tensor(np.ones((b, 1, 1))), P["cls"])
        h = T.concat([cls, tok], axis=1) + P["pos"]
        emb = self.record("embeddings", h)
        hidden = []
        for i in range(self.depth):
            p = f"layers.{i}"
            a_in = T.layer_norm(h, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
            heads, probs = attention_heads(a_in, P[f"{p}.attn.wq"], P[f"{p}.attn.bq"],
                                           P[f"{p}.attn.wk"], P[f"{p}.attn.bk"],
                                           P[f"{p}.attn.wv"], P[f"{p}.attn.bv"])
            self.record(f"{p}.attn.heads", heads)
            self.record(f"{p}.attn.probs", probs)
            hmask = self.masks[f"{p}.attn.heads"].reshape(1, -1, 1, 1)
            h = h + merge_heads(heads * hmask, P[f"{p}.attn.wo"], P[f"{p}.attn.bo"])
            m_in = T.layer_norm(h, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
            act = T.gelu(dense(m_in, P[f"{p}.mlp.w1"], P[f"{p}.mlp.b1"]))
            self.record(f"{p}.mlp.neurons", act)
            act = act * self.masks[f"{p}.mlp.neurons"]
            h = h + dense(act, P[f"{p}.mlp.w2"], P[f"{p}.mlp.b2"])
            self.record(f"hidden.{i}", h)
            hidden.append(h)
        g, beta = P["final_ln.g"], P["final_ln.b"]
        final = T.layer_norm(h, g, beta)
        prev = hidden[-2] if len(hidden) > 1 else emb
        penult = T.layer_norm(prev, g, beta)
        return BackboneOutputs(embeddings=emb, hidden=hidden, final=final, penultimate=penult)

    def graph(self, x: Tensor) -> Tensor:
        return self.encode(x).final

    # -- structural edits
    def head_masks(self) -> list[np.ndarray]:
        return [self.masks[f"layers.{i}.attn.heads"] for i in range(self.depth)]

    def neuron_masks(self) -> list[np.ndarray]:
        return [self.masks[f"layers.{i}.mlp.neurons"] for i in range(self.depth)]

    def select(self, heads: list[list[int]], neurons: list[list[int]],
               depth: int | None = None) -> "ViTBackbone":
        """A physically smaller copy keeping the listed heads/neurons (in that order)."""
        depth = self.depth if depth is None else depth
        heads, neurons = heads[:depth], neurons[:depth]
        new = ViTBackbone(replace(self.cfg, depth=depth), [len(h) for h in heads],
                          [len(n) for n in neurons])
        src = self.params
        for name in ("embed.w", "embed.b", "cls", "pos", "final_ln.g", "final_ln.b"):
            new.params[name].data = src[name].data.copy()
        for i in range(depth):
            p = f"layers.{i}"
            hi, ni = np.asarray(heads[i], int), np.asarray(neurons[i], int)
            for n in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "attn.bo", "mlp.b2"):
                new.params[f"{p}.{n}"].data = src[f"{p}.{n}"].data.copy()
            for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo"):
                new.params[f"{p}.attn.{n}"].data = src[f"{p}.attn.{n}"].data[hi].copy()
            new.params[f"{p}.mlp.w1"].data = src[f"{p}.mlp.w1"].data[:, ni].copy()
            new.params[f"{p}.mlp.b1"].data = src[f"{p}.mlp.b1"].data[ni].copy()
            new.params[f"{p}.mlp.w2"].data = src[f"{p}.mlp.w2"].data[ni].copy()
            new.masks[f"{p}.attn.heads"] = self.masks[f"{p}.attn.heads"][hi].copy()
            new.masks[f"{p}.mlp.neurons"] = self.masks[f"{p}.mlp.neurons"][ni].copy()
        return new

    def copy(self) -> "ViTBackbone":
        return self.select([list(range(h)) for h in self.layer_heads],
                           [list(range(f)) for f in self.layer_ffn])

    def architecture(self) -> dict:
        return {"depth": self.depth, "heads": list(self.layer_heads),
                "ffn": list(self.layer_ffn), "embed_dim": self.cfg.hidden_dim,
                "head_dim": self.cfg.head_dim}


class LinearHeader(Network):
    """Reference header: a single affine map from the CLS token to logits."""

    def __init__(self, hidden_dim: int, num_classes: int, seed: int = 0):
        super().__init__(seed)
        self.new_param("w", (hidden_dim, num_classes))
        self.new_param("b", (num_classes,), "zeros")

    def head(self, out: BackboneOutputs) -> Tensor:
        return dense(out.final[:, 0, :], self.params["w"], self.params["b"])

    def copy(self) -> "LinearHeader":
        w = self.params["w"]
        new = LinearHeader(w.shape[0], w.shape[1], self.seed)
        new.load_state_dict(self.state_dict())
        return new


class Classifier(Network):
    """Backbone plus header; parameters live under ``backbone.`` and ``header.``."""

    def __init__(self, backbone: ViTBackbone, header: Network):
        super().__init__(backbone.seed)
        self.add_child("backbone", backbone)
        self.add_child("header", header)
        self.input_shape = backbone.input_shape
        self.last: BackboneOutputs | None = None

    @property
    def backbone(self) -> ViTBackbone:
        return self.children["backbone"]

    @property
    def header(self) -> Network:
        return self.children["header"]

    def graph(self, x: Tensor) -> Tensor:
        out = self.backbone.encode(x)
        self.last = out
        return self.header.head(out)
