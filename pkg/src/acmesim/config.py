"""Experiment configuration: typed sections loaded from TOML with path-precise errors."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli
import tomli_w

from acmesim.energy import DeviceProfile
from acmesim.errors import ConfigError
from acmesim.family import DistillationConfig
from acmesim.nas.search import NASConfig
from acmesim.nn.transformer import TransformerConfig
from acmesim.personalization import PersonalizationConfig


@dataclass
class ModelSection:
    depth: int = 4
    num_heads: int = 4
    hidden_dim: int = 12
    ffn_dim: int = 48
    num_patches: int = 16
    patch_dim: int = 8
    num_classes: int = 10
    train_steps: int = 300
    lr: float = 3e-3
    batch_size: int = 32

    def transformer(self, seed: int) -> TransformerConfig:
        return TransformerConfig(self.depth, self.num_heads, self.hidden_dim, self.ffn_dim,
                                 self.num_patches, self.num_classes, self.patch_dim, seed=seed)


@dataclass
class FamilySection:
    widths: list = field(default_factory=lambda: [0.25, 0.5, 1.0])
    depths: list = field(default_factory=lambda: [2, 3, 4])
    probe_size: int = 128
    lambda1: float = 1.0
    lambda2: float = 1.0
    distill_steps: int = 40
    distill_lr: float = 3e-3
    distill_batch_size: int = 32

    def distillation(self) -> DistillationConfig:
        return DistillationConfig(self.lambda1, self.lambda2, self.distill_steps,
                                  self.distill_lr, self.distill_batch_size)


@dataclass
class DevicesSection:
    count: int = 6
    budget_divisor: float = 12000.0
    k: int = 1
    p: int = 0
    alpha_G: float = 0.1
    alpha_beta: float = 0.05
    alpha_L: float = 0.25
    profiles: list = field(default_factory=list)  # explicit profiles override the generator


@dataclass
class TopologySection:
    clusters: int = 2


@dataclass
class ParetoSection:
    gamma_p: float = 0.25
    sigma: float | None = None


@dataclass
class NASSection:
    B: int = 2
    repeats: int = 1
    num_ops: int = 7
    M: int = 2
    budget: int = 6
    shared_steps: int = 6
    controller_samples: int = 6
    batch_size: int = 32
    lr_shared: float = 0.05
    lr_controller: float = 0.5
    lr_value: float = 0.1
    controller_hidden: int = 100
    baseline_momentum: float = 0.05
    channels: int | None = None
    mlp_hidden: int = 32
    val_fraction: float = 0.25
    finetune_steps: int = 60
    finetune_lr: float = 3e-3
    edge_samples: int = 256

    def nas(self) -> NASConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(NASConfig)}
        return NASConfig(**kw)


@dataclass
class PersonalizationSection:
    rounds: int = 2
    discard_per_round: int = 2
    p_order: float = 1.0
    sketch_size: int = 24
    local_steps: int = 20
    lr: float = 3e-3
    batch_size: int = 32
    accumulation_steps: int = 2
    dropout: float = 0.0

    def personalization(self) -> PersonalizationConfig:
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(PersonalizationConfig)}
        return PersonalizationConfig(**kw)


@dataclass
class DataSection:
    signal: float = 0.9
    noise: float = 1.0
    public_size: int = 512
    public_val_size: int = 256
    classes_per_device: int = 3
    train_per_device: int = 160
    test_per_device: int = 96
    npz_path: str | None = None  # optional external images, patched with ``npz_patch``
    npz_patch: int = 4


@dataclass
class TrafficSection:
    centralized_search_space: int = 1695000
    # declared sizes for an accounting-only report at a scale we cannot simulate
    declared_devices: int | None = None
    declared_raw_mb_per_device: float | None = None
    declared_upload_mb_per_device: float | None = None


SECTIONS = {
    "model": ModelSection,
    "family": FamilySection,
    "devices": DevicesSection,
    "topology": TopologySection,
    "pareto": ParetoSection,
    "nas": NASSection,
    "personalization": PersonalizationSection,
    "data": DataSection,
    "traffic": TrafficSection,
}


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    family: FamilySection = field(default_factory=FamilySection)
    devices: DevicesSection = field(default_factory=DevicesSection)
    topology: TopologySection = field(default_factory=TopologySection)
    pareto: ParetoSection = field(default_factory=ParetoSection)
    nas: NASSection = field(default_factory=NASSection)
    personalization: PersonalizationSection = field(default_factory=PersonalizationSection)
    data: DataSection = field(default_factory=DataSection)
    traffic: TrafficSection = field(default_factory=TrafficSection)
    seed: int = 0

    def device_profiles(self) -> list[DeviceProfile]:
        """Explicit profiles from the config; empty when they are to be generated."""
        return [DeviceProfile(**p) for p in self.devices.profiles]

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        return self if seed is None else dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            sec = {k: v for k, v in dataclasses.asdict(getattr(self, name)).items()
                   if v is not None}
            out[name] = sec
        return out

    def to_toml(self) -> str:
        d = self.to_dict()
        if not d["devices"]["profiles"]:
            del d["devices"]["profiles"]
        return tomli_w.dumps(d)


# ---------------------------------------------------------------- validation


def _check_type(path: str, value, hint):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return _check_type(path, value, args[0])
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if hint is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    return value


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a table")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kw = {k: _check_type(f"{name}.{k}", v, hints[k]) for k, v in raw.items()}
    return cls(**kw)


def _positive(path: str, v, strict: bool = True) -> None:
    if v is None:
        return
    if (v <= 0) if strict else (v < 0):
        raise ConfigError(path, f"must be {'> 0' if strict else '>= 0'}, got {v!r}")


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    m = cfg.model
    for k in ("depth", "num_heads", "hidden_dim", "ffn_dim", "num_patches", "patch_dim",
              "num_classes", "batch_size", "lr"):
        _positive(f"model.{k}", getattr(m, k))
    _positive("model.train_steps", m.train_steps, strict=False)
    if m.hidden_dim % m.num_heads:
        raise ConfigError("model.hidden_dim", "must be divisible by model.num_heads")
    g = int(round(m.num_patches ** 0.5))
    if g * g != m.num_patches:
        raise ConfigError("model.num_patches", "must be a perfect square")

    f = cfg.family
    if not f.widths:
        raise ConfigError("family.widths", "menu is empty")
    if not f.depths:
        raise ConfigError("family.depths", "menu is empty")
    for i, w in enumerate(f.widths):
        if isinstance(w, bool) or not isinstance(w, (int, float)) or not 0 < w <= 1:
            raise ConfigError(f"family.widths[{i}]", f"must lie in (0, 1], got {w!r}")
    for i, d in enumerate(f.depths):
        if isinstance(d, bool) or not isinstance(d, int) or not 1 <= d <= m.depth:
            raise ConfigError(f"family.depths[{i}]", f"must be an integer in [1, {m.depth}]")
    f.widths = [float(w) for w in f.widths]
    if 1.0 not in f.widths:
        raise ConfigError("family.widths", "must include the full width 1.0")
    _positive("family.probe_size", f.probe_size)
    _positive("family.distill_steps", f.distill_steps, strict=False)
    _positive("family.lambda1", f.lambda1, strict=False)
    _positive("family.lambda2", f.lambda2, strict=False)

    dv = cfg.devices
    _positive("devices.budget_divisor", dv.budget_divisor)
    for i, p in enumerate(dv.profiles):
        if not isinstance(p, dict):
            raise ConfigError(f"devices.profiles[{i}]", "expected a table")
        try:
            DeviceProfile(**p)
        except TypeError as e:
            raise ConfigError(f"devices.profiles[{i}]", str(e)) from None
        except ValueError as e:
            raise ConfigError(f"devices.profiles[{i}]", str(e)) from None
    if dv.profiles:
        ids = [p["device_id"] for p in dv.profiles]
        if len(set(ids)) != len(ids):
            raise ConfigError("devices.profiles", "duplicate device_id")
        dv.count = len(dv.profiles)
    _positive("devices.count", dv.count)
    _positive("topology.clusters", cfg.topology.clusters)
    if cfg.topology.clusters > dv.count:
        raise ConfigError("topology.clusters",
                          f"{cfg.topology.clusters} clusters for {dv.count} devices")

    _positive("pareto.gamma_p", cfg.pareto.gamma_p)
    _positive("pareto.sigma", cfg.pareto.sigma)

    n = cfg.nas
    _positive("nas.B", n.B)
    _positive("nas.repeats", n.repeats)
    if not 1 <= n.num_ops <= 7:
        raise ConfigError("nas.num_ops", "must lie in [1, 7]")
    _positive("nas.M", n.M)
    _positive("nas.budget", n.budget, strict=False)
    _positive("nas.shared_steps", n.shared_steps, strict=False)
    _positive("nas.controller_samples", n.controller_samples)
    _positive("nas.channels", n.channels)
    _positive("nas.edge_samples", n.edge_samples)
    _positive("nas.finetune_steps", n.finetune_steps, strict=False)
    _positive("nas.finetune_lr", n.finetune_lr)
    if not 0 <= n.val_fraction < 1:
        raise ConfigError("nas.val_fraction", "must lie in [0, 1)")

    pz = cfg.personalization
    _positive("personalization.rounds", pz.rounds, strict=False)
    _positive("personalization.discard_per_round", pz.discard_per_round, strict=False)
    _positive("personalization.p_order", pz.p_order)
    _positive("personalization.sketch_size", pz.sketch_size)
    _positive("personalization.accumulation_steps", pz.accumulation_steps)
    if not 0 <= pz.dropout < 1:
        raise ConfigError("personalization.dropout", "must lie in [0, 1)")

    d = cfg.data
    if not 1 <= d.classes_per_device <= m.num_classes:
        raise ConfigError("data.classes_per_device", f"must lie in [1, {m.num_classes}]")
    for k in ("public_size", "public_val_size", "train_per_device", "test_per_device"):
        _positive(f"data.{k}", getattr(d, k))

    t = cfg.traffic
    _positive("traffic.centralized_search_space", t.centralized_search_space)
    declared = [t.declared_devices, t.declared_raw_mb_per_device, t.declared_upload_mb_per_device]
    if any(v is not None for v in declared) and not all(v is not None for v in declared):
        raise ConfigError("traffic", "declared_* sizes must be given together")
    for k in ("declared_devices", "declared_raw_mb_per_device", "declared_upload_mb_per_device"):
        _positive(f"traffic.{k}", getattr(t, k))
    return cfg


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a table")
    for key in raw:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(key, "unknown section")
    kw = {name: _build_section(name, cls, raw.get(name, {})) for name, cls in SECTIONS.items()}
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", f"expected a non-negative integer, got {seed!r}")
    return validate(ExperimentConfig(seed=seed, **kw))


def loads(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(source, f"invalid TOML: {e}") from None
    return from_dict(raw)


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(str(path), f"cannot read config: {e.strerror}") from None
    return loads(text, str(path))


def bundled(name: str = "default") -> ExperimentConfig:
    """One of the configs shipped inside the package (``default`` or ``minimal``)."""
    text = resources.files("acmesim.configs").joinpath(f"{name}.toml").read_text()
    return loads(text, f"acmesim/configs/{name}.toml")
