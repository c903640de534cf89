"""Recurrent architecture controller trained with REINFORCE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from acmesim.nas.space import HeaderDAG, OperationSet, decision_supports
from acmesim.nn import tensor as T
from acmesim.nn.layers import lstm_cell
from acmesim.nn.network import Network, sgd_step, tensor_grads
from acmesim.nn.tensor import Tensor, no_grad


@dataclass
class Sample:
    actions: np.ndarray  # (N, n_decisions) ints
    log_probs: np.ndarray  # (N,) sum of decision log-probabilities


class Controller(Network):
    """Single-layer LSTM emitting one categorical decision per step.

    Step t reads the embedding of decision t-1 (a learned start vector for
    t = 0). Output layers start at zero, so the initial policy is uniform.
    A sigmoid value head reads the final hidden state; it is fitted to the
    rewards for logging and never feeds the policy gradient.
    """

    def __init__(self, supports: list[int], hidden: int = 100, seed: int = 0,
                 baseline_momentum: float = 0.05):
        super().__init__(seed)
        self.supports = [int(s) for s in supports]
        if not self.supports or min(self.supports) < 1:
            raise ValueError("every decision needs at least one option")
        self.hidden = hidden
        self.baseline = 0.0
        self.baseline_momentum = baseline_momentum
        H = hidden
        self.new_param("lstm.wx", (H, 4 * H), std=0.1)
        self.new_param("lstm.wh", (H, 4 * H), std=0.1)
        self.new_param("lstm.b", (4 * H,), "zeros")
        self.new_param("start", (1, H), std=0.1)
        for t, n in enumerate(self.supports):
            if t + 1 < len(self.supports):
                self.new_param(f"embed.{t}", (n, H), std=0.1)
            self.new_param(f"out.{t}.w", (H, n), "zeros")
            self.new_param(f"out.{t}.b", (n,), "zeros")
        self.new_param("value.w", (H, 1), std=0.1)
        self.new_param("value.b", (1,), "zeros")

    @classmethod
    def for_space(cls, B: int, opset: OperationSet, hidden: int = 100, seed: int = 0,
                  baseline_momentum: float = 0.05) -> "Controller":
        c = cls(decision_supports(B, len(opset)), hidden, seed, baseline_momentum)
        c.B, c.opset = B, opset
        return c

    @property
    def policy_params(self) -> dict:
        return {k: t for k, t in self.params.items() if not k.startswith("value.")}

    # -- rollout
    def _steps(self, n: int, actions: np.ndarray | None, rng, temperature: float,
               greedy: bool):
        P = self.params
        H = self.hidden
        h = Tensor(np.zeros((n, H)))
        c = Tensor(np.zeros((n, H)))
        x = T.matmul(Tensor(np.ones((n, 1))), P["start"])
        chosen = np.zeros((n, len(self.supports)), dtype=np.int64)
        logps = []
        for t, k in enumerate(self.supports):
            h, c = lstm_cell(x, h, c, P["lstm.wx"], P["lstm.wh"], P["lstm.b"])
            logits = T.matmul(h, P[f"out.{t}.w"]) + P[f"out.{t}.b"]
            if actions is None:
                z = logits.data / (temperature if temperature > 0 else 1.0)
                if greedy or temperature <= 0:
                    a = z.argmax(axis=1)
                else:
                    z = z - z.max(axis=1, keepdims=True)
                    p = np.exp(z)
                    p /= p.sum(axis=1, keepdims=True)
                    u = rng.random((n, 1))
                    a = np.minimum((np.cumsum(p, axis=1) < u).sum(axis=1), k - 1)
            else:
                a = actions[:, t]
            chosen[:, t] = a
            lp = T.log_softmax(logits, axis=1)
            onehot = np.zeros((n, k))
            onehot[np.arange(n), a] = 1.0
            logps.append(T.tsum(lp * onehot, axis=1))
            if t + 1 < len(self.supports):
                x = T.matmul(Tensor(onehot), P[f"embed.{t}"])
        total = logps[0]
        for lp in logps[1:]:
            total = total + lp
        return chosen, total, h

    def sample(self, n: int, rng: np.random.Generator, temperature: float = 1.0,
               greedy: bool = False) -> Sample:
        with no_grad():
            acts, lp, _ = self._steps(n, None, rng, temperature, greedy)
        return Sample(acts, lp.data.copy())

    def log_prob(self, actions: np.ndarray) -> Tensor:
        """Differentiable sum of log-probabilities for given decision rows."""
        actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
        _, lp, _ = self._steps(len(actions), actions, None, 1.0, False)
        return lp

    def probabilities(self, actions: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.exp(self.log_prob(actions).data)

    def argmax(self) -> np.ndarray:
        return self.sample(1, None, greedy=True).actions[0]

    def value(self, actions: np.ndarray) -> np.ndarray:
        with no_grad():
            _, _, h = self._steps(len(actions), np.atleast_2d(actions), None, 1.0, False)
            z = T.matmul(h, self.params["value.w"]) + self.params["value.b"]
            return T.sigmoid(z).data[:, 0]

    def to_dag(self, actions, repeats: int = 1) -> HeaderDAG:
        return HeaderDAG.from_decisions(actions, repeats, self.opset)

    # -- learning
    def policy_gradient(self, actions: np.ndarray, rewards: np.ndarray,
                        weights: np.ndarray | None = None, baseline: float | None = None
                        ) -> dict[str, np.ndarray]:
        """Ascent direction sum_i w_i (R_i - b) grad log pi(a_i).

        Without ``weights`` the rows are averaged, which is the REINFORCE
        estimate; with ``weights = pi(a)`` over an enumerated space it is the
        exact gradient of the expected reward.
        """
        actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
        r = np.asarray(rewards, dtype=np.float64)
        b = self.baseline if baseline is None else baseline
        w = np.full(len(r), 1.0 / len(r)) if weights is None else np.asarray(weights, float)
        self.zero_grad()
        lp = self.log_prob(actions)
        objective = T.tsum(lp * ((r - b) * w))
        objective.backward()
        grads = tensor_grads(self)
        self.clear_cache()
        return {k: grads[k] for k in self.policy_params}

    def update(self, actions: np.ndarray, rewards: np.ndarray, lr: float) -> dict:
        """One REINFORCE ascent step, then the moving-average baseline update."""
        grads = self.policy_gradient(actions, rewards)
        step = {k: -g for k, g in grads.items()}
        for k in self.params:
            if k not in step:
                step[k] = np.zeros_like(self.params[k].data)
        sgd_step(self, step, lr)
        m = self.baseline_momentum
        self.baseline = (1 - m) * self.baseline + m * float(np.mean(rewards))
        return grads

    def fit_value(self, actions: np.ndarray, rewards: np.ndarray, lr: float) -> float:
        """MSE step on the value head only; the LSTM state is treated as constant."""
        actions = np.atleast_2d(np.asarray(actions, dtype=np.int64))
        with no_grad():
            _, _, h = self._steps(len(actions), actions, None, 1.0, False)
        self.zero_grad()
        z = T.matmul(Tensor(h.data), self.params["value.w"]) + self.params["value.b"]
        pred = T.sigmoid(z)
        loss = T.mse(pred, np.asarray(rewards, float).reshape(-1, 1))
        loss.backward()
        for k in ("value.w", "value.b"):
            t = self.params[k]
            t.data = t.data - lr * t.grad
        self.zero_grad()
        return float(loss.data)


def update_controller(controller: Controller, rewards, actions, lr: float = 0.1) -> dict:
    return controller.update(np.asarray(actions), np.asarray(rewards, dtype=np.float64), lr)
