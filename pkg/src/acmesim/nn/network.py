"""Parameter stores and the forward / backward / update / check entry points."""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from acmesim.errors import AlignmentError, NumericError, ShapeError, StateError
from acmesim.nn.tensor import Tensor, grad_enabled, no_grad

INIT_STD = 0.02
MAGIC = b"ACMEW1"


def path_rng(seed: int, path: str) -> np.random.Generator:
    """Counter-based generator keyed on (seed, path).

    Keying on the path means inserting a new layer never shifts the draws of
    existing ones.
    """
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(path.encode())], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Network:
    """A parameter store plus a forward graph built from ``acmesim.nn.tensor`` ops.

    Subclasses implement :meth:`graph`. Children are addressed by dotted
    prefixes so every parameter has a stable path such as
    ``"layers.0.attn.wq"``.
    """

    input_shape: tuple[int, ...] | None = None

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.children: dict[str, Network] = {}
        self.masks: dict[str, np.ndarray] = {}
        self.intermediates: dict[str, Tensor] = {}
        self.frozen = False
        self._output: Tensor | None = None

    # -- construction
    def new_param(self, name: str, shape, kind: str = "weight", std: float = INIT_STD) -> Tensor:
        shape = tuple(int(s) for s in shape)
        if kind == "weight":
            data = truncated_normal(path_rng(self.seed, name), shape, std)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init kind {kind!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_child(self, name: str, net: "Network") -> "Network":
        self.children[name] = net
        return net

    # -- introspection
    def named_parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if not (trainable_only and self.frozen):
            out.update(self.params)
        for cname, child in self.children.items():
            for p, t in child.named_parameters(trainable_only).items():
                out[f"{cname}.{p}"] = t
        return out

    def named_masks(self) -> dict[str, np.ndarray]:
        out = dict(self.masks)
        for cname, child in self.children.items():
            for p, m in child.named_masks().items():
                out[f"{cname}.{p}"] = m
        return out

    def named_intermediates(self) -> dict[str, Tensor]:
        out = dict(self.intermediates)
        for cname, child in self.children.items():
            for p, t in child.named_intermediates().items():
                out[f"{cname}.{p}"] = t
        return out

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.named_parameters().values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict and set(state) != set(params):
            raise AlignmentError("state dict keys differ from parameter paths",
                                 set(state) ^ set(params))
        for k, v in state.items():
            if k in params:
                if params[k].shape != np.shape(v):
                    raise ShapeError(k, params[k].shape, np.shape(v))
                params[k].data = np.array(v, dtype=np.float64)

    def freeze(self) -> None:
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
        for c in self.children.values():
            c.freeze()

    def unfreeze(self) -> None:
        self.frozen = False
        for t in self.params.values():
            t.requires_grad = True
        for c in self.children.values():
            c.unfreeze()

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # -- graph
    def record(self, name: str, t: Tensor) -> Tensor:
        """Keep ``t`` so its gradient can be read after backward."""
        if grad_enabled():
            self.intermediates[name] = t
        return t

    def clear_cache(self) -> None:
        self.intermediates = {}
        self._output = None
        for c in self.children.values():
            c.clear_cache()

    def check_input(self, x: np.ndarray) -> None:
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(type(self).__name__ + ".input", ("batch",) + tuple(self.input_shape),
                             x.shape)

    def graph(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.graph(x)


@dataclass
class GradientStore:
    params: dict[str, np.ndarray]
    intermediates: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.params[key]

    def scaled(self, c: float) -> "GradientStore":
        return GradientStore({k: v * c for k, v in self.params.items()},
                             {k: v * c for k, v in self.intermediates.items()})


def forward(net: Network, batch, cache: bool = False) -> np.ndarray:
    """Run ``net`` on ``batch``; with ``cache=True`` keep the graph for :func:`backward`."""
    x = np.asarray(batch, dtype=np.float64)
    net.check_input(x)
    if cache:
        net.clear_cache()
        out = net(Tensor(x))
        net._output = out
    else:
        with no_grad():
            out = net(Tensor(x))
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite network output")
    return out.data


def backward(net: Network, loss_grad) -> GradientStore:
    """Backpropagate ``loss_grad`` (d loss / d output) through the cached graph."""
    out = net._output
    if out is None:
        raise StateError("backward() called before forward(cache=True)")
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.shape != out.shape:
        raise ShapeError("output", out.shape, g.shape)
    params = net.named_parameters()
    inter = net.named_intermediates()
    for t in params.values():
        t.grad = None
    for t in inter.values():
        t.grad = None
    out.backward(g)
    pg = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
          for k, t in params.items() if not _is_frozen(net, k)}
    ig = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
          for k, t in inter.items()}
    for name, arr in list(pg.items()) + list(ig.items()):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite gradient at {name}")
    return GradientStore(pg, ig)


def _is_frozen(net: Network, path: str) -> bool:
    node = net
    parts = path.split(".")
    if node.frozen:
        return True
    for part in parts[:-1]:
        if part not in node.children:
            break
        node = node.children[part]
        if node.frozen:
            return True
    return False


def sgd_step(net: Network, grads: GradientStore | dict, lr: float) -> Network:
    """In-place ``theta <- theta - lr * g`` over unfrozen parameters."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    gp = grads.params if isinstance(grads, GradientStore) else grads
    trainable = net.named_parameters(trainable_only=True)
    if set(gp) != set(trainable):
        raise AlignmentError("gradient store does not match trainable parameters",
                             set(gp) ^ set(trainable))
    for k, t in trainable.items():
        g = gp[k]
        if g.shape != t.shape:
            raise ShapeError(k, t.shape, g.shape)
        if lr:
            t.data = t.data - lr * g
    return net


def tensor_grads(net: Network, trainable_only: bool = True) -> dict[str, np.ndarray]:
    """Collect ``.grad`` from the parameter tensors after a direct ``loss.backward()``."""
    out = {}
    for k, t in net.named_parameters(trainable_only).items():
        out[k] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    probes: int
    tol: float
    failures: list[tuple[str, int, float, float, float]]
    per_path: dict[str, float]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def flagged_paths(self) -> set[str]:
        return {f[0] for f in self.failures}


def _projection_loss(shape, seed: int) -> Callable[[Tensor], Tensor]:
    r = np.random.default_rng(seed).standard_normal(shape) / np.sqrt(np.prod(shape))
    return lambda out: (out * r).sum()


def grad_check(net: Network, batch, tol: float = 1e-4, probes: int = 100, seed: int = 0,
               h: float = 1e-5, loss_fn: Callable[[Tensor], Tensor] | None = None,
               grads: dict[str, np.ndarray] | None = None, floor: float = 1e-5
               ) -> GradCheckReport:
    """Compare analytic gradients against central differences on sampled entries.

    ``grads`` overrides the analytic side (fault injection); otherwise the
    gradients come from one recorded forward/backward pass. The relative
    error uses ``max(|a|, |n|, floor)`` as denominator.
    """
    x = np.asarray(batch, dtype=np.float64)
    net.check_input(x)
    if loss_fn is None:
        with no_grad():
            shape = net(Tensor(x)).shape
        loss_fn = _projection_loss(shape, seed + 7919)
    params = net.named_parameters(trainable_only=True)
    if grads is None:
        net.zero_grad()
        loss = loss_fn(net(Tensor(x)))
        loss.backward()
        grads = tensor_grads(net)
        net.clear_cache()

    def value() -> float:
        with no_grad():
            return float(loss_fn(net(Tensor(x))).data)

    slots = [(k, i) for k, t in params.items() for i in range(t.data.size)]
    rng = np.random.default_rng(seed)
    replace = len(slots) < probes
    picks = rng.choice(len(slots), size=probes, replace=replace)
    failures = []
    per_path: dict[str, float] = {}
    worst = 0.0
    for pi in picks:
        k, i = slots[pi]
        t = params[k]
        flat = t.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        lp = value()
        flat[i] = orig - h
        lm = value()
        flat[i] = orig
        num = (lp - lm) / (2 * h)
        ana = float(grads[k].reshape(-1)[i])
        rel = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, rel)
        per_path[k] = max(per_path.get(k, 0.0), rel)
        if rel > tol:
            failures.append((k, int(i), ana, num, rel))
    return GradCheckReport(worst, int(probes), tol, failures, per_path)


# ---------------------------------------------------------------- weights file


def config_hash(config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def dump_params(params: dict[str, np.ndarray], cfg_hash: bytes) -> bytes:
    """Serialize to: magic, 32-byte config hash, record count, then records.

    Each record is (u32 name length, utf-8 name, u32 ndim, u64 extents,
    float64 payload), all little-endian.
    """
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    parts = [MAGIC, cfg_hash, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def parse_params(blob: bytes) -> tuple[bytes, dict[str, np.ndarray]]:
    if blob[:6] != MAGIC:
        raise ValueError("not an ACMEW1 weights file")
    pos = 6
    cfg_hash = blob[pos:pos + 32]
    pos += 32
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        out[name] = arr.astype(np.float64)
    if pos != len(blob):
        raise ValueError("trailing bytes in weights file")
    return cfg_hash, out


def save_params(path: str | Path, net: Network, config: dict) -> bytes:
    blob = dump_params(net.state_dict(), config_hash(config))
    Path(path).write_bytes(blob)
    return blob


def load_params(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    return parse_params(Path(path).read_bytes())
