"""Backbone family: importance ranking, width-adjustable backbone, distillation
into a width x depth grid, the architecture transform and parameter counts."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from acmesim.data import Dataset
from acmesim.errors import NumericError
from acmesim.nn import tensor as T
from acmesim.nn.network import backward, forward, save_params, tensor_grads
from acmesim.nn.tensor import Tensor, no_grad
from acmesim.nn.transformer import (BackboneOutputs, Classifier, LinearHeader,
                                    TransformerConfig, ViTBackbone, scaled)
from acmesim.training import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class WidthDepthSpec:
    w: float
    d: int

    def __post_init__(self):
        if not 0.0 < self.w <= 1.0:
            raise ValueError(f"width must lie in (0, 1], got {self.w}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"depth must be a positive integer, got {self.d}")

    def label(self) -> str:
        return f"w{self.w:g}_d{self.d}"

    def to_dict(self) -> dict:
        return {"w": self.w, "d": self.d}


@dataclass
class ReferenceModel:
    backbone: ViTBackbone
    header: LinearHeader

    def __post_init__(self):
        cfg = self.backbone.cfg
        if cfg.width_fraction != 1.0 or self.backbone.layer_heads != [cfg.num_heads] * cfg.depth \
                or self.backbone.layer_ffn != [cfg.ffn_dim] * cfg.depth:
            raise ValueError("a reference model must be the full-width, full-depth backbone")
        nb, nh = self.backbone.param_count(), self.header.param_count()
        if nb < 10 * nh:
            raise ValueError(f"backbone ({nb}) must be at least 10x the header ({nh})")

    @classmethod
    def build(cls, cfg: TransformerConfig) -> "ReferenceModel":
        return cls(ViTBackbone(cfg), LinearHeader(cfg.hidden_dim, cfg.num_classes, cfg.seed + 1))

    @property
    def cfg(self) -> TransformerConfig:
        return self.backbone.cfg

    def classifier(self) -> Classifier:
        return Classifier(self.backbone, self.header)


# ---------------------------------------------------------------- importance


@dataclass
class HeadImportanceTable:
    heads: list[np.ndarray]
    neurons: list[np.ndarray]

    @staticmethod
    def _rank(scores: np.ndarray) -> np.ndarray:
        # descending score; ties keep index order
        return np.argsort(-scores, kind="stable")

    def head_ranking(self, layer: int) -> np.ndarray:
        return self._rank(self.heads[layer])

    def neuron_ranking(self, layer: int) -> np.ndarray:
        return self._rank(self.neurons[layer])

    def to_dict(self) -> dict:
        return {"heads": [h.tolist() for h in self.heads],
                "neurons": [n.tolist() for n in self.neurons]}


def head_importance(model: ReferenceModel | Classifier, probe_data: Dataset,
                    batch_size: int = 64) -> HeadImportanceTable:
    """First-order Taylor scores |<dF/dO, O>| per head and per MLP neuron.

    F is the mean cross-entropy of a probe batch; per-batch absolute values
    are summed over batches.
    """
    if len(probe_data) == 0:
        raise ValueError("probe set is empty")
    net = model.classifier() if isinstance(model, ReferenceModel) else model
    bb = net.backbone
    heads = [np.zeros(h) for h in bb.layer_heads]
    neurons = [np.zeros(f) for f in bb.layer_ffn]
    for xb, yb in probe_data.batches(batch_size):
        forward(net, xb, cache=True)
        logits = net._output.data
        grad = _ce_grad(logits, yb)
        g = backward(net, grad)
        for i in range(bb.depth):
            o = bb.intermediates[f"layers.{i}.attn.heads"].data
            go = g.intermediates[f"backbone.layers.{i}.attn.heads"]
            heads[i] += np.abs((o * go).sum(axis=(0, 2, 3)))
            a = bb.intermediates[f"layers.{i}.mlp.neurons"].data
            ga = g.intermediates[f"backbone.layers.{i}.mlp.neurons"]
            neurons[i] += np.abs((a * ga).sum(axis=(0, 1)))
        net.clear_cache()
    return HeadImportanceTable(heads, neurons)


def _ce_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d mean-cross-entropy / d logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    return p / len(labels)


# ---------------------------------------------------------------- variable width


class VariableWidthBackbone:
    """A backbone whose heads and neurons are sorted by descending importance,
    so every width ``w`` is the leading ``ceil(w * count)`` slice."""

    def __init__(self, base: ViTBackbone, importance: HeadImportanceTable,
                 keep_fractions: list[float]):
        self.importance = importance
        self.keep_fractions = list(keep_fractions)
        self.head_order = [importance.head_ranking(i) for i in range(base.depth)]
        self.neuron_order = [importance.neuron_ranking(i) for i in range(base.depth)]
        self.backbone = base.select([o.tolist() for o in self.head_order],
                                    [o.tolist() for o in self.neuron_order])

    @property
    def cfg(self) -> TransformerConfig:
        return self.backbone.cfg

    def counts(self, w: float) -> tuple[list[int], list[int]]:
        hs = [scaled(w, h) for h in self.backbone.layer_heads]
        fs = [scaled(w, f) for f in self.backbone.layer_ffn]
        if min(hs) < 1 or min(fs) < 1:
            raise ValueError(f"width {w} leaves a layer with no heads or neurons")
        return hs, fs

    def kept_sets(self, w: float) -> list[set[int]]:
        """Original head indices kept per layer at width ``w``."""
        hs, _ = self.counts(w)
        return [set(o[:h].tolist()) for o, h in zip(self.head_order, hs)]

    def kept_neuron_sets(self, w: float) -> list[set[int]]:
        _, fs = self.counts(w)
        return [set(o[:f].tolist()) for o, f in zip(self.neuron_order, fs)]

    def at(self, w: float, d: int | None = None) -> ViTBackbone:
        """Physical copy at width ``w`` keeping the first ``d`` layers."""
        d = self.backbone.depth if d is None else d
        hs, fs = self.counts(w)
        sub = self.backbone.select([list(range(h)) for h in hs], [list(range(f)) for f in fs], d)
        sub.cfg = replace(sub.cfg, width_fraction=w)
        return sub


def derive_variable_width(model: ReferenceModel, keep_fractions: list[float],
                          probe_data: Dataset | None = None,
                          importance: HeadImportanceTable | None = None) -> VariableWidthBackbone:
    fr = list(keep_fractions)
    if not fr or any(not 0.0 < f <= 1.0 for f in fr):
        raise ValueError("keep fractions must lie in (0, 1]")
    if fr != sorted(fr):
        raise ValueError("keep fractions must be sorted ascending")
    if importance is None:
        if probe_data is None:
            raise ValueError("need probe data or a precomputed importance table")
        importance = head_importance(model, probe_data)
    vw = VariableWidthBackbone(model.backbone, importance, fr)
    for f in fr:
        vw.counts(f)
    return vw


# ---------------------------------------------------------------- distillation


@dataclass(frozen=True)
class DistillationConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    steps: int = 100
    lr: float = 3e-3
    batch_size: int = 32

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("distillation weights must be non-negative")


@dataclass
class DistillResult:
    student: ViTBackbone
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")


def layer_pairing(d_student: int, d_teacher: int) -> list[int]:
    """0-based teacher layer for each student layer: ceil(i * d_t / d_s) in 1-based terms."""
    return [math.ceil(i * d_teacher / d_student) - 1 for i in range(1, d_student + 1)]


def distill_loss(s: BackboneOutputs, t: BackboneOutputs, header: LinearHeader,
                 cfg: DistillationConfig) -> Tensor:
    """lambda1 * MSE(logits) + lambda2 * MSE(embeddings) + MSE(paired hidden states).

    Teacher outputs are treated as constants; the hidden-state term is the MSE
    over all paired layers stacked together.
    """
    pairs = layer_pairing(len(s.hidden), len(t.hidden))
    hs = T.concat([T.reshape(h, (1,) + h.shape) for h in s.hidden], axis=0)
    ht = np.stack([t.hidden[j].data for j in pairs])
    total = T.mse(hs, ht)
    if cfg.lambda1:
        total = total + T.mse(header.head(s), header.head(t).data) * cfg.lambda1
    if cfg.lambda2:
        total = total + T.mse(s.embeddings, t.embeddings.data) * cfg.lambda2
    return total


def distill(teacher: VariableWidthBackbone, spec: WidthDepthSpec, cfg: DistillationConfig,
            data: Dataset, header: LinearHeader, rng: np.random.Generator) -> DistillResult:
    """Train the ``spec`` student against the full width-adjustable backbone.

    The student starts as the leading width-``w`` slice truncated to
    ``spec.d`` layers. The reference header is frozen and only maps both
    sides to logits.
    """
    if spec.d > teacher.backbone.depth:
        raise ValueError(f"depth {spec.d} exceeds the teacher depth {teacher.backbone.depth}")
    t_net = teacher.at(1.0)
    student = teacher.at(spec.w, spec.d)
    header_frozen = header.copy()
    header_frozen.freeze()
    t_net.freeze()
    opt = Adam(cfg.lr)
    losses: list[float] = []
    for step in range(cfg.steps + 1):
        xb, _ = data.sample_batch(cfg.batch_size, rng)
        x = Tensor(xb)
        with no_grad():
            t_out = t_net.encode(x)
        student.zero_grad()
        s_out = student.encode(x)
        loss = distill_loss(s_out, t_out, header_frozen, cfg)
        value = float(loss.data)
        losses.append(value)
        if not np.isfinite(value):
            raise NumericError(f"non-finite distillation loss at step {step}", losses)
        if step == cfg.steps:
            break
        loss.backward()
        opt.step(student, tensor_grads(student))
        student.clear_cache()
    student.clear_cache()
    return DistillResult(student, losses)


# ---------------------------------------------------------------- transform / size


@dataclass(frozen=True)
class BackboneArchitecture:
    depth: int
    heads: int
    hidden_dim: int  # attention width: heads * head_dim
    ffn_dim: int
    embed_dim: int

    def to_dict(self) -> dict:
        return {"depth": self.depth, "heads": self.heads, "hidden_dim": self.hidden_dim,
                "ffn_dim": self.ffn_dim, "embed_dim": self.embed_dim}


def reference_architecture(cfg: TransformerConfig) -> BackboneArchitecture:
    return BackboneArchitecture(cfg.depth, cfg.num_heads, cfg.hidden_dim, cfg.ffn_dim,
                                cfg.hidden_dim)


def delta_transform(reference: ReferenceModel, spec: WidthDepthSpec) -> BackboneArchitecture:
    """Architecture of the first ``spec.d`` layers at width ``spec.w``.

    Only defined from the full reference model; derived backbones are rejected.
    """
    if not isinstance(reference, ReferenceModel):
        raise TypeError("the transform is defined only from the reference model")
    cfg = reference.cfg
    if spec.d > cfg.depth:
        raise ValueError(f"depth {spec.d} exceeds reference depth {cfg.depth}")
    heads = scaled(spec.w, cfg.num_heads)
    if heads < 1:
        raise ValueError("width leaves no attention heads")
    return BackboneArchitecture(spec.d, heads, heads * cfg.head_dim, scaled(spec.w, cfg.ffn_dim),
                                cfg.hidden_dim)


@dataclass(frozen=True)
class ModelDims:
    """Per-layer size terms: H (attention weight count), hidden and MLP widths."""
    H: float
    xi_h: float
    xi_f: float
    config: TransformerConfig | None = None

    @classmethod
    def from_config(cls, cfg: TransformerConfig) -> "ModelDims":
        d = cfg.hidden_dim
        return cls(H=4 * d * d, xi_h=d, xi_f=cfg.ffn_dim, config=cfg)


@dataclass
class ParamCount:
    analytic: float
    exact: int | None
    discrepancy: dict[str, int | float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"analytic": self.analytic, "exact": self.exact, "discrepancy": self.discrepancy}


def analytic_param_count(spec: WidthDepthSpec, dims: ModelDims) -> float:
    return spec.d * spec.w * (dims.H + 2 * dims.xi_h * dims.xi_f)


def exact_param_count(cfg: TransformerConfig, spec: WidthDepthSpec) -> dict[str, int]:
    """Parameter count of the instantiated backbone at ``spec``, by term."""
    d, hd = cfg.hidden_dim, cfg.head_dim
    h, f = scaled(spec.w, cfg.num_heads), scaled(spec.w, cfg.ffn_dim)
    a = h * hd
    L = spec.d
    return {
        "attn_weights": L * 4 * d * a,
        "mlp_weights": L * 2 * d * f,
        "attn_biases": L * (3 * a + d),
        "mlp_biases": L * (f + d),
        "layer_norms": L * 4 * d,
        "embedding": cfg.patch_dim * d + d + d + (cfg.num_patches + 1) * d,
        "final_norm": 2 * d,
    }


def param_count(spec: WidthDepthSpec, dims: ModelDims) -> ParamCount:
    """Analytic size plus, when ``dims`` carries a config, the exact count.

    ``discrepancy`` lists every term the analytic formula leaves out, with
    ``rounding`` covering the gap between ``w * n`` and ``ceil(w * n)``, so
    ``analytic + sum(discrepancy) == exact``.
    """
    analytic = analytic_param_count(spec, dims)
    if dims.config is None:
        return ParamCount(analytic, None, {})
    terms = exact_param_count(dims.config, spec)
    exact = int(sum(terms.values()))
    modeled = terms["attn_weights"] + terms["mlp_weights"]
    disc: dict[str, int | float] = {"rounding": modeled - analytic}
    for k in ("attn_biases", "mlp_biases", "layer_norms", "embedding", "final_norm"):
        disc[k] = terms[k]
    return ParamCount(analytic, exact, disc)


# ---------------------------------------------------------------- family


@dataclass
class FamilyMember:
    spec: WidthDepthSpec
    backbone: ViTBackbone
    size: ParamCount
    distill_loss: float | None = None
    weights_path: str | None = None


@dataclass
class BackboneFamily:
    reference: ReferenceModel
    variable: VariableWidthBackbone
    members: dict[WidthDepthSpec, FamilyMember]

    @property
    def specs(self) -> list[WidthDepthSpec]:
        return sorted(self.members)

    def manifest(self) -> dict:
        rows = []
        for spec in self.specs:
            m = self.members[spec]
            rows.append({"w": spec.w, "d": spec.d, "zeta_analytic": m.size.analytic,
                         "zeta_exact": m.size.exact, "zeta_discrepancy": m.size.discrepancy,
                         "distill_final_loss": m.distill_loss, "weights": m.weights_path})
        return {"reference": self.reference.cfg.to_dict(), "members": rows}

    def write_manifest(self, path: str | Path, weights_dir: str | Path | None = None) -> dict:
        path = Path(path)
        if weights_dir is not None:
            wdir = Path(weights_dir)
            wdir.mkdir(parents=True, exist_ok=True)
            for spec in self.specs:
                m = self.members[spec]
                fname = f"backbone_{spec.label()}.acmew"
                save_params(wdir / fname, m.backbone,
                            {"spec": spec.to_dict(), **self.reference.cfg.to_dict()})
                m.weights_path = str(Path(wdir.name) / fname)
        man = self.manifest()
        path.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
        return man


def build_family(reference: ReferenceModel, widths: list[float], depths: list[int],
                 probe_data: Dataset, train_data: Dataset, cfg: DistillationConfig,
                 rng: np.random.Generator) -> BackboneFamily:
    """Rank, reorder and distill every (w, d) in ``widths x depths``."""
    widths = sorted(widths)
    vw = derive_variable_width(reference, widths, probe_data)
    dims = ModelDims.from_config(reference.cfg)
    members = {}
    for w in widths:
        for d in sorted(depths):
            spec = WidthDepthSpec(w, d)
            if w == 1.0 and d == reference.cfg.depth:
                student, final = vw.at(w), 0.0
            else:
                res = distill(vw, spec, cfg, train_data, reference.header, rng)
                student, final = res.student, res.final_loss
            members[spec] = FamilyMember(spec, student, param_count(spec, dims), final)
            log.info("family member %s: zeta=%.0f loss=%.4g", spec.label(),
                     members[spec].size.analytic, final)
    return BackboneFamily(reference, vw, members)
