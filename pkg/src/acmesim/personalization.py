"""Per-device header refinement driven by similarity-weighted importance sets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from acmesim.data import Dataset
from acmesim.errors import AlignmentError
from acmesim.nas.header import HeaderNet
from acmesim.nn import tensor as T
from acmesim.nn.network import forward
from acmesim.nn.tensor import Tensor
from acmesim.nn.transformer import Classifier, ViTBackbone
from acmesim.training import evaluate, train_classifier

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- importance sets


@dataclass
class ImportanceSet:
    device_id: str
    round: int
    scores: dict[str, np.ndarray]

    def paths(self) -> set[str]:
        return set(self.scores)

    def to_wire(self) -> dict:
        """JSON-ready form with one ``"path[i]"`` entry per flattened element."""
        flat = {}
        for path in sorted(self.scores):
            for i, v in enumerate(np.asarray(self.scores[path]).reshape(-1)):
                flat[f"{path}[{i}]"] = float(v)
        return {"device_id": self.device_id, "round": self.round, "scores": flat}

    def to_json(self) -> str:
        return json.dumps(self.to_wire(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_wire(cls, d: dict, shapes: dict[str, tuple]) -> "ImportanceSet":
        buf = {p: np.zeros(int(np.prod(s))) for p, s in shapes.items()}
        for key, v in d["scores"].items():
            path, _, idx = key.rpartition("[")
            if path not in buf:
                raise AlignmentError(f"unknown parameter path {path!r}", [path])
            buf[path][int(idx[:-1])] = float(v)
        return cls(str(d["device_id"]), int(d["round"]),
                   {p: buf[p].reshape(shapes[p]) for p in shapes})


def param_importance(model: Classifier, data: Dataset, accumulation_steps: int,
                     batch_size: int, rng: np.random.Generator, device_id: str = "",
                     round_index: int = 0) -> ImportanceSet:
    """Per header parameter, (gradient * value)^2 averaged over ``accumulation_steps`` batches."""
    if len(data) == 0:
        raise ValueError("local dataset is empty")
    if accumulation_steps < 1:
        raise ValueError("need at least one accumulation step")
    header = model.header
    acc = {k: np.zeros_like(t.data) for k, t in header.params.items()}
    for _ in range(accumulation_steps):
        xb, yb = data.sample_batch(batch_size, rng)
        model.zero_grad()
        loss = T.cross_entropy(model(Tensor(xb)), yb)
        loss.backward()
        for k, t in header.params.items():
            g = t.grad if t.grad is not None else 0.0
            acc[k] += (g * t.data) ** 2
        model.clear_cache()
    model.zero_grad()
    return ImportanceSet(device_id, round_index,
                         {k: v / accumulation_steps for k, v in acc.items()})


# ---------------------------------------------------------------- sketches and distance


@dataclass
class DataSketch:
    device_id: str
    features: np.ndarray  # (m, feature_dim)

    @property
    def size(self) -> int:
        return len(self.features)


def make_sketch(extractor: ViTBackbone, data: Dataset, size: int, rng: np.random.Generator,
                device_id: str = "") -> DataSketch:
    """Final-layer CLS features of a random slice of ``data`` under the shared extractor."""
    if len(data) == 0:
        raise ValueError("cannot sketch an empty dataset")
    idx = rng.choice(len(data), size=min(size, len(data)), replace=False)
    feats = forward(extractor, data.x[np.sort(idx)])[:, 0, :]
    return DataSketch(device_id, feats)


def _cost(x: np.ndarray, y: np.ndarray, p: float) -> np.ndarray:
    return np.abs(x[:, None, :] - y[None, :, :]).sum(axis=-1) ** p


def wasserstein_distance(a, b, p: float = 1.0) -> float:
    """p-Wasserstein distance between uniform empirical measures, L1 ground cost.

    Equal sizes are solved as an assignment problem; unequal sizes as the
    transportation linear program.
    """
    x = np.asarray(a.features if isinstance(a, DataSketch) else a, dtype=np.float64)
    y = np.asarray(b.features if isinstance(b, DataSketch) else b, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if len(x) == 0 or len(y) == 0:
        raise ValueError("sketches must be nonempty")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"feature dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    if p < 1:
        raise ValueError("p must be >= 1")
    C = _cost(x, y, p)
    n, m = C.shape
    if n == m:
        rows, cols = linear_sum_assignment(C)
        total = float(C[rows, cols].sum()) / n
    else:
        A_eq = np.zeros((n + m, n * m))
        for i in range(n):
            A_eq[i, i * m:(i + 1) * m] = 1.0
        for j in range(m):
            A_eq[n + j, j::m] = 1.0
        b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
        res = linprog(C.reshape(-1), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        if not res.success:
            raise ArithmeticError(f"transport LP failed: {res.message}")
        total = float(res.fun)
    return max(total, 0.0) ** (1.0 / p)


# ---------------------------------------------------------------- similarity


@dataclass
class SimilarityMatrix:
    W: np.ndarray
    W_bar: np.ndarray
    W_hat: np.ndarray
    device_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"device_ids": self.device_ids, "W": self.W.tolist(),
                "W_bar": self.W_bar.tolist(), "W_hat": self.W_hat.tolist()}


def similarity_matrix(sketches: Sequence[DataSketch], p: float = 1.0) -> np.ndarray:
    """Raw weights 1 / (1 + distance); the diagonal is exactly 1."""
    n = len(sketches)
    if n < 1:
        raise ValueError("need at least one device")
    W = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                W[i, j] = 1.0 / (1.0 + wasserstein_distance(sketches[i], sketches[j], p))
    return W


def normalize_similarity(W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Element-wise geometric-mean symmetrization, then a row softmax."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("similarity matrix must be square")
    W_bar = np.sqrt(W * W.T)
    z = W_bar - W_bar.max(axis=1, keepdims=True)
    e = np.exp(z)
    return W_bar, e / e.sum(axis=1, keepdims=True)


def build_similarity(sketches: Sequence[DataSketch], p: float = 1.0) -> SimilarityMatrix:
    W = similarity_matrix(sketches, p)
    W_bar, W_hat = normalize_similarity(W)
    return SimilarityMatrix(W, W_bar, W_hat, [s.device_id for s in sketches])


# ---------------------------------------------------------------- aggregation and refinement


def aggregate_importance(sets: Sequence[ImportanceSet], weights, device_id: str = "",
                         round_index: int | None = None) -> ImportanceSet:
    """Convex combination sum_i weights[i] * Q_i, per parameter element."""
    if not sets:
        raise ValueError("no importance sets to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(sets),):
        raise ValueError("one weight per importance set is required")
    ref = sets[0].paths()
    bad = set()
    for s in sets[1:]:
        bad |= ref ^ s.paths()
    if bad:
        raise AlignmentError(f"importance sets disagree on {len(bad)} paths", bad)
    for s in sets[1:]:
        for k in ref:
            if np.shape(s.scores[k]) != np.shape(sets[0].scores[k]):
                raise AlignmentError(f"shape mismatch at {k}", [k])
    out = {}
    for k in sorted(ref):
        acc = np.zeros_like(np.asarray(sets[0].scores[k], dtype=np.float64))
        for wi, s in zip(w, sets):
            if wi != 0.0:
                acc = acc + wi * s.scores[k]
        out[k] = acc
    rnd = sets[0].round if round_index is None else round_index
    return ImportanceSet(device_id, rnd, out)


@dataclass(frozen=True)
class Neuron:
    kind: str  # "channel" or "tail"
    key: str  # conv key or fc1 prefix
    index: int

    @property
    def mask_key(self) -> str:
        return f"{self.key}.channels" if self.kind == "channel" else "tail.neurons"


def header_neurons(header: HeaderNet) -> list[Neuron]:
    out = [Neuron("channel", k, c) for k in header.convs
           for c in range(header.masks[f"{k}.channels"].size)]
    out += [Neuron("tail", header.fc1, i) for i in range(header.masks["tail.neurons"].size)]
    return out


def joint_importance(header: HeaderNet, q: ImportanceSet, neuron: Neuron) -> float:
    """Summed score of the parameters feeding into and out of ``neuron``."""
    s = q.scores
    i = neuron.index
    if neuron.kind == "channel":
        return float(s[f"{neuron.key}.w"][i].sum() + s[f"{neuron.key}.b"][i])
    return float(s[f"{neuron.key}.w"][:, i].sum() + s[f"{neuron.key}.b"][i]
                 + s["tail.fc2.w"][i].sum())


def is_masked(header: HeaderNet, neuron: Neuron) -> bool:
    return header.masks[neuron.mask_key][neuron.index] == 0.0


def refine_header(header: HeaderNet, q: ImportanceSet, discard_count: int) -> list[Neuron]:
    """Mask the ``discard_count`` live neurons with the lowest joint importance.

    Already-masked neurons are not candidates. Ties keep neuron order.
    Returns the newly masked neurons.
    """
    if discard_count < 0:
        raise ValueError("discard count must be non-negative")
    live = [n for n in header_neurons(header) if not is_masked(header, n)]
    if discard_count >= len(live):
        raise ValueError(f"cannot discard {discard_count} of {len(live)} live neurons")
    if discard_count == 0:
        return []
    if set(q.scores) != set(header.params):
        raise AlignmentError("importance set does not match the header parameters",
                             set(q.scores) ^ set(header.params))
    scores = np.array([joint_importance(header, q, n) for n in live])
    order = np.argsort(scores, kind="stable")[:discard_count]
    dropped = [live[i] for i in order]
    for n in dropped:
        header.masks[n.mask_key][n.index] = 0.0
    return dropped


# ---------------------------------------------------------------- stage driver


@dataclass
class DeviceState:
    device_id: str
    train: Dataset
    test: Dataset
    header: HeaderNet
    rng: np.random.Generator

    def masks(self) -> dict[str, list[float]]:
        return {k: v.tolist() for k, v in sorted(self.header.masks.items())}


@dataclass(frozen=True)
class PersonalizationConfig:
    rounds: int = 2
    discard_per_round: int = 2
    p_order: float = 1.0
    sketch_size: int = 24
    local_steps: int = 20
    lr: float = 3e-3
    batch_size: int = 32
    accumulation_steps: int = 2
    dropout: float = 0.0


@dataclass
class Stage2Result:
    similarity: SimilarityMatrix
    devices: dict[str, DeviceState]
    coarse_accuracy: dict[str, float]
    final_accuracy: dict[str, float]
    rounds: list[dict]


MessageHook = Callable[[str, str, str, dict], None]


def run_phase2_stage2(backbone: ViTBackbone, coarse: HeaderNet, device_data: dict,
                      extractor: ViTBackbone, cfg: PersonalizationConfig, seed: int = 0,
                      edge_id: str = "edge", send: MessageHook | None = None) -> Stage2Result:
    """Rounds of local training, importance upload, weighted aggregation and masking.

    ``device_data`` maps device id to (train, test) datasets. The backbone is
    frozen; every device starts from a copy of ``coarse``. The similarity
    weights are computed once before the first round; a device that drops out
    of a round is left out and the remaining weights of each row renormalized.
    ``send(kind, sender, receiver, payload)`` observes every exchanged payload.
    """
    send = send or (lambda *a: None)
    frozen = backbone.copy()
    frozen.freeze()
    ids = sorted(device_data)
    devices = {}
    for k, did in enumerate(ids):
        tr, te = device_data[did]
        devices[did] = DeviceState(did, tr, te, coarse.detached(),
                                   np.random.default_rng([seed, 7, k]))
    sketches = [make_sketch(extractor, devices[d].train, cfg.sketch_size, devices[d].rng, d)
                for d in ids]
    for sk in sketches:
        send("AttributeStats", sk.device_id, edge_id,
             {"device_id": sk.device_id, "sketch": sk.features.tolist()})
    sim = build_similarity(sketches, cfg.p_order)
    coarse_acc = {d: evaluate(Classifier(frozen, devices[d].header), devices[d].test).accuracy
                  for d in ids}
    drop_rng = np.random.default_rng([seed, 11])
    history = []
    for t in range(cfg.rounds):
        present = [d for d in ids if not (cfg.dropout > 0 and drop_rng.random() < cfg.dropout)]
        if not present:
            log.warning("round %d: every device dropped out; skipping", t)
            history.append({"round": t, "present": [], "discarded": {}})
            continue
        uploads: dict[str, ImportanceSet] = {}
        for d in present:
            dev = devices[d]
            model = Classifier(frozen, dev.header)
            train_classifier(model, dev.train, cfg.local_steps, cfg.lr, cfg.batch_size, dev.rng)
            q = param_importance(model, dev.train, cfg.accumulation_steps, cfg.batch_size,
                                 dev.rng, d, t)
            uploads[d] = q
            send("ImportanceUpload", d, edge_id, q.to_wire())
        discarded = {}
        idx = {d: i for i, d in enumerate(ids)}
        for d in present:
            row = np.array([sim.W_hat[idx[d], idx[o]] for o in present])
            row = row / row.sum()
            agg = aggregate_importance([uploads[o] for o in present], row, d, t)
            send("AggregatedImportance", edge_id, d, agg.to_wire())
            dropped = refine_header(devices[d].header, agg, cfg.discard_per_round)
            discarded[d] = [f"{n.mask_key}[{n.index}]" for n in dropped]
        if len(present) < len(ids):
            log.info("round %d: %d of %d devices present", t, len(present), len(ids))
        history.append({"round": t, "present": present, "discarded": discarded})
    final_acc = {d: evaluate(Classifier(frozen, devices[d].header), devices[d].test).accuracy
                 for d in ids}
    return Stage2Result(sim, devices, coarse_acc, final_acc, history)
