"""Weight-shared header search: alternating child training and controller updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from acmesim.data import Dataset
from acmesim.nas.controller import Controller
from acmesim.nas.header import HeaderDims, HeaderNet, SharedWeights
from acmesim.nas.space import HeaderDAG, OperationSet, random_dag
from acmesim.nn import tensor as T
from acmesim.nn.network import forward, tensor_grads
from acmesim.nn.tensor import Tensor
from acmesim.nn.transformer import Classifier, ViTBackbone
from acmesim.training import train_classifier

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NASConfig:
    B: int = 2
    repeats: int = 1
    num_ops: int = 7
    M: int = 4
    budget: int = 10  # alternations of (shared steps, controller update)
    shared_steps: int = 10
    controller_samples: int = 8
    batch_size: int = 32
    lr_shared: float = 0.05
    lr_controller: float = 0.5
    lr_value: float = 0.1
    controller_hidden: int = 100
    baseline_momentum: float = 0.05
    channels: int | None = None
    mlp_hidden: int = 32
    val_fraction: float = 0.25
    finetune_steps: int = 0  # Adam steps on the derived child after the search
    finetune_lr: float = 3e-3

    @property
    def opset(self) -> OperationSet:
        return OperationSet.first(self.num_ops)


@dataclass
class SearchState:
    backbone: ViTBackbone
    shared: SharedWeights
    controller: Controller
    dims: HeaderDims
    num_classes: int
    repeats: int = 1

    def child(self, dag: HeaderDAG) -> Classifier:
        return Classifier(self.backbone, HeaderNet(dag, self.dims, self.num_classes, self.shared))


@dataclass
class StepStats:
    loss: float
    used: int
    skipped: int


def mc_gradient(state: SearchState, dags: list[HeaderDAG], xb: np.ndarray, yb: np.ndarray
                ) -> tuple[dict[str, np.ndarray], StepStats]:
    """Mean over children of the loss gradient, keyed by backbone and shared paths.

    A child whose loss is non-finite is skipped and the mean is taken over the
    remaining ones.
    """
    acc: dict[str, np.ndarray] = {}
    losses = []
    skipped = 0
    x = np.asarray(xb, dtype=np.float64)
    for dag in dags:
        net = state.child(dag)
        net.zero_grad()
        loss = T.cross_entropy(net(Tensor(x)), yb)
        value = float(loss.data)
        if not np.isfinite(value):
            skipped += 1
            log.warning("skipping child with non-finite loss: %s", dag.describe())
            net.clear_cache()
            continue
        loss.backward()
        g = tensor_grads(net)
        net.clear_cache()
        for k, v in g.items():
            key = "shared." + k[len("header."):] if k.startswith("header.") else k
            acc[key] = acc.get(key, 0.0) + v
        losses.append(value)
    n = len(losses)
    if n:
        acc = {k: v / n for k, v in acc.items()}
    return acc, StepStats(float(np.mean(losses)) if n else float("nan"), n, skipped)


def apply_gradients(state: SearchState, grads: dict[str, np.ndarray], lr: float) -> None:
    bb = state.backbone.named_parameters(trainable_only=True)
    for k, g in grads.items():
        if k.startswith("shared."):
            t = state.shared.params[k[len("shared."):]]
        else:
            t = bb.get(k[len("backbone."):])
            if t is None:
                continue
        t.data = t.data - lr * g


def train_shared_weights(state: SearchState, data: Dataset, M: int, steps: int, lr: float,
                         batch_size: int, rng: np.random.Generator) -> list[StepStats]:
    """Per step: sample M children from the fixed policy and descend their mean loss."""
    if M < 1:
        raise ValueError("M must be >= 1")
    stats = []
    for _ in range(steps):
        sample = state.controller.sample(M, rng)
        dags = [state.controller.to_dag(a, state.repeats) for a in sample.actions]
        xb, yb = data.sample_batch(batch_size, rng)
        grads, st = mc_gradient(state, dags, xb, yb)
        if st.used:
            apply_gradients(state, grads, lr)
        stats.append(st)
    return stats


def child_accuracy(state: SearchState, dag: HeaderDAG, data: Dataset) -> float:
    net = state.child(dag)
    logits = forward(net, data.x)
    return float((logits.argmax(axis=1) == data.y).mean())


def child_loss(state: SearchState, dag: HeaderDAG, data: Dataset) -> float:
    net = state.child(dag)
    logits = forward(net, data.x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(data)), data.y].mean())


@dataclass
class Stage1Result:
    dag: HeaderDAG
    state: SearchState
    history: list[dict] = field(default_factory=list)
    best_sampled: tuple[float, HeaderDAG] | None = None

    def coarse_header(self) -> HeaderNet:
        return HeaderNet(self.dag, self.state.dims, self.state.num_classes,
                         self.state.shared).detached()


def init_search(backbone: ViTBackbone, num_classes: int, cfg: NASConfig, seed: int
                ) -> SearchState:
    dims = HeaderDims.for_backbone(backbone.cfg, cfg.channels, cfg.mlp_hidden)
    ctrl = Controller.for_space(cfg.B, cfg.opset, cfg.controller_hidden, seed,
                                cfg.baseline_momentum)
    return SearchState(backbone, SharedWeights(seed), ctrl, dims, num_classes, cfg.repeats)


def run_phase2_stage1(backbone: ViTBackbone, data: Dataset, num_classes: int, cfg: NASConfig,
                      rng: np.random.Generator, seed: int = 0) -> Stage1Result:
    """Alternate shared-weight training and REINFORCE updates for ``cfg.budget`` rounds.

    The backbone is trained together with the shared header weights. Rewards
    are child accuracies on a held-out slice of ``data``. The returned
    architecture is the controller's argmax decode.
    """
    train, val = data.split(1.0 - cfg.val_fraction, rng)
    if len(val) == 0:
        val = train
    state = init_search(backbone, num_classes, cfg, seed)
    ctrl = state.controller
    history = []
    best = None
    for rnd in range(cfg.budget):
        st = train_shared_weights(state, train, cfg.M, cfg.shared_steps, cfg.lr_shared,
                                  cfg.batch_size, rng)
        sample = ctrl.sample(cfg.controller_samples, rng)
        dags = [ctrl.to_dag(a, cfg.repeats) for a in sample.actions]
        rewards = np.array([child_accuracy(state, d, val) for d in dags])
        ctrl.update(sample.actions, rewards, cfg.lr_controller)
        vloss = ctrl.fit_value(sample.actions, rewards, cfg.lr_value)
        i = int(np.argmax(rewards))
        if best is None or rewards[i] > best[0]:
            best = (float(rewards[i]), dags[i])
        losses = [s.loss for s in st if np.isfinite(s.loss)]
        history.append({"round": rnd, "shared_loss": float(np.mean(losses)) if losses else None,
                        "mean_reward": float(rewards.mean()), "baseline": ctrl.baseline,
                        "value_mse": vloss})
    dag = ctrl.to_dag(ctrl.argmax(), cfg.repeats)
    if cfg.finetune_steps:
        train_classifier(state.child(dag), train, cfg.finetune_steps, cfg.finetune_lr,
                         cfg.batch_size, rng)
    return Stage1Result(dag, state, history, best)


def random_baseline(state: SearchState, data: Dataset, n: int, B: int, repeats: int,
                    opset: OperationSet, rng: np.random.Generator) -> list[float]:
    """Accuracies of ``n`` uniformly random architectures under the current shared weights."""
    return [child_accuracy(state, random_dag(B, rng, repeats, opset), data) for _ in range(n)]
