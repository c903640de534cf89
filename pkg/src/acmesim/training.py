"""SGD training and evaluation loops shared by every stage."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from acmesim.data import Dataset
from acmesim.errors import NumericError
from acmesim.nn import tensor as T
from acmesim.nn.network import Network, forward, sgd_step, tensor_grads
from acmesim.nn.tensor import Tensor


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    n: int


@dataclass
class TrainTrace:
    losses: list[float] = field(default_factory=list)
    skipped: int = 0


def evaluate(net: Network, data: Dataset, batch_size: int = 256) -> Evaluation:
    """Mean cross-entropy and accuracy without recording a graph."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for xb, yb in data.batches(batch_size):
        logits = forward(net, xb)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total_loss += float(-logp[np.arange(len(yb)), yb].sum())
        correct += int((logits.argmax(axis=1) == yb).sum())
    n = len(data)
    loss = total_loss / n
    if not np.isfinite(loss):
        raise NumericError("non-finite evaluation loss")
    return Evaluation(loss, correct / n, n)


class Adam:
    """Adam over a network's trainable parameters, keyed by path."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, net: Network, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        trainable = net.named_parameters(trainable_only=True)
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m = b1 * m + (1 - b1) * g
            v = b2 * self.v[k] + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            t = trainable[k]
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def loss_and_grads(net: Network, xb: np.ndarray, yb: np.ndarray) -> tuple[float, dict]:
    net.zero_grad()
    loss = T.cross_entropy(net(Tensor(np.asarray(xb, dtype=np.float64))), yb)
    value = float(loss.data)
    if not np.isfinite(value):
        net.clear_cache()
        raise NumericError("non-finite training loss", [value])
    loss.backward()
    grads = tensor_grads(net)
    net.clear_cache()
    return value, grads


def train_classifier(net: Network, data: Dataset, steps: int, lr: float, batch_size: int,
                     rng: np.random.Generator, optimizer: str = "adam") -> TrainTrace:
    """Minibatch cross-entropy training of the trainable parameters.

    ``optimizer`` is ``"adam"`` or ``"sgd"``.
    """
    trace = TrainTrace()
    if steps <= 0 or len(data) == 0:
        return trace
    adam = Adam(lr) if optimizer == "adam" else None
    for _ in range(steps):
        xb, yb = data.sample_batch(batch_size, rng)
        value, grads = loss_and_grads(net, xb, yb)
        if adam is None:
            sgd_step(net, grads, lr)
        else:
            adam.step(net, grads)
        trace.losses.append(value)
    return trace
