"""End-to-end simulation: partition, backbone selection, header search, refinement.

Every byte that crosses a link travels inside a :class:`Message`; the
receiving side rebuilds its objects from the payload and attachment alone.
The scheduler is single threaded. With ``threads > 1`` per-cluster work runs
on a worker pool, and its outgoing messages are ledgered afterwards in edge
order, so the report never depends on completion order.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from acmesim.config import ExperimentConfig
from acmesim.data import Dataset, SyntheticTask, class_subsets, load_npz
from acmesim.energy import DeviceProfile, generate_profiles
from acmesim.errors import AcmeError, StageError
from acmesim.family import BackboneFamily, ReferenceModel, WidthDepthSpec, build_family
from acmesim.nas.header import HeaderDims, HeaderNet
from acmesim.nas.search import Stage1Result, child_accuracy, run_phase2_stage1
from acmesim.nas.space import HeaderDAG
from acmesim.nn.network import config_hash, dump_params, parse_params
from acmesim.nn.transformer import TransformerConfig, ViTBackbone
from acmesim.orchestrator.messages import Message
from acmesim.orchestrator.topology import Topology, partition_devices
from acmesim.orchestrator.traffic import (
    TrafficLedger,
    account_traffic,
    compare_search_space,
    declared_accounting,
)
from acmesim.pareto import ClusterAudit, run_phase1
from acmesim.personalization import Stage2Result, run_phase2_stage2
from acmesim.training import evaluate, train_classifier

log = logging.getLogger(__name__)

# stream tags for default_rng([seed, tag, ...])
RNG_PROFILES, RNG_PUBLIC, RNG_CLASSES, RNG_DEVICE, RNG_REFERENCE, RNG_FAMILY = 1, 2, 3, 4, 5, 6
RNG_EDGE_DATA, RNG_NAS = 7, 8


class PoolTask:
    """Samples with replacement from a fixed labelled pool, optionally per class subset."""

    def __init__(self, pool: Dataset):
        self.pool = pool

    def sample(self, n: int, rng: np.random.Generator, classes=None) -> Dataset:
        idx = np.arange(len(self.pool)) if classes is None else \
            np.flatnonzero(np.isin(self.pool.y, classes))
        if len(idx) == 0:
            raise ValueError(f"no pool samples for classes {classes}")
        return self.pool.take(idx[rng.integers(0, len(idx), size=n)])


@dataclass
class Context:
    """Everything derived from (config, seed) before any node computes."""
    cfg: ExperimentConfig
    profiles: list[DeviceProfile]
    topology: Topology
    public_train: Dataset
    public_val: Dataset
    device_classes: dict[str, list[int]]
    device_data: dict[str, tuple[Dataset, Dataset]]
    edge_data: dict[str, Dataset]
    ledger: TrafficLedger = field(default_factory=TrafficLedger)

    @property
    def seed(self) -> int:
        return self.cfg.seed

    def rng(self, *tags) -> np.random.Generator:
        return np.random.default_rng([self.seed, *tags])

    def send(self, msg: Message) -> Message:
        self.ledger.record(msg)
        return msg

    def profile(self, device_id: str) -> DeviceProfile:
        return next(p for p in self.profiles if p.device_id == device_id)


def _task(cfg: ExperimentConfig):
    m, d = cfg.model, cfg.data
    if d.npz_path:
        pool = load_npz(d.npz_path, d.npz_patch)
        if pool.x.shape[1:] != (m.num_patches, m.patch_dim):
            raise ValueError(f"patched images have shape {pool.x.shape[1:]}, model expects "
                             f"{(m.num_patches, m.patch_dim)}")
        return PoolTask(pool)
    return SyntheticTask(m.num_classes, m.num_patches, m.patch_dim, d.signal, d.noise,
                         seed=cfg.seed)


def prepare(cfg: ExperimentConfig) -> Context:
    dcfg = cfg.devices
    seed = cfg.seed
    profiles = cfg.device_profiles()
    if not profiles:
        alphas = {"alpha_G": dcfg.alpha_G, "alpha_beta": dcfg.alpha_beta,
                  "alpha_L": dcfg.alpha_L}
        profiles = generate_profiles(dcfg.count, np.random.default_rng([seed, RNG_PROFILES]),
                                     dcfg.budget_divisor, "dev", dcfg.k, dcfg.p, alphas)
    topo = partition_devices(profiles, cfg.topology.clusters, seed)
    task = _task(cfg)
    d = cfg.data
    pub_rng = np.random.default_rng([seed, RNG_PUBLIC])
    public_train = task.sample(d.public_size, pub_rng)
    public_val = task.sample(d.public_val_size, pub_rng)
    ids = [p.device_id for p in profiles]
    subsets = class_subsets(len(ids), cfg.model.num_classes, d.classes_per_device,
                            np.random.default_rng([seed, RNG_CLASSES]))
    device_classes = dict(zip(ids, subsets))
    device_data = {}
    for k, did in enumerate(ids):
        r = np.random.default_rng([seed, RNG_DEVICE, k])
        device_data[did] = (task.sample(d.train_per_device, r, device_classes[did]),
                            task.sample(d.test_per_device, r, device_classes[did]))
    # edges hold their own proxy data over every class; they never see device data
    edge_data = {e: task.sample(cfg.nas.edge_samples,
                                np.random.default_rng([seed, RNG_EDGE_DATA, i]))
                 for i, e in enumerate(topo.edges)}
    ctx = Context(cfg, profiles, topo, public_train, public_val, device_classes, device_data,
                  edge_data)
    for did, (tr, _) in device_data.items():
        ctx.ledger.set_raw_size(did, tr.x.nbytes + tr.y.nbytes)
    return ctx


# ---------------------------------------------------------------- stage: statistics


def _profile_payload(p: DeviceProfile) -> dict:
    return {"device_id": p.device_id, "vcpus": p.vcpus, "C": p.C, "G": p.G, "L": p.L,
            "k": p.k, "p": p.p, "alpha_G": p.alpha_G, "alpha_beta": p.alpha_beta,
            "alpha_L": p.alpha_L}


def stage_statistics(ctx: Context) -> dict[str, list[DeviceProfile]]:
    """Devices report capabilities to their edge; each edge summarizes for the cloud.

    Returns the per-cluster profiles as the cloud reconstructs them.
    """
    topo = ctx.topology
    clusters = {}
    for e in topo.edges:
        rows = []
        for did in topo.clusters[e]:
            msg = ctx.send(Message("AttributeStats", did, e, _profile_payload(ctx.profile(did))))
            rows.append(msg.payload)
        vc = [r["vcpus"] for r in rows]
        summary = {"cluster": e, "min_C": min(r["C"] for r in rows), "devices": rows,
                   "vcpus": {"min": min(vc), "max": max(vc), "mean": float(np.mean(vc))}}
        msg = ctx.send(Message("AttributeStats", e, topo.cloud, summary))
        clusters[e] = [DeviceProfile(**r) for r in msg.payload["devices"]]
    return clusters


# ---------------------------------------------------------------- stage: backbone


@dataclass
class BackboneStage:
    reference: ReferenceModel
    reference_eval: dict
    family: BackboneFamily
    audits: dict[str, ClusterAudit]
    assignments: dict[str, Message]

    def summary(self) -> dict:
        man = self.family.manifest()
        return {"reference": self.reference_eval, "family": man["members"],
                "clusters": {e: a.to_dict() for e, a in sorted(self.audits.items())}}


def train_reference(ctx: Context) -> tuple[ReferenceModel, dict]:
    m = ctx.cfg.model
    ref = ReferenceModel.build(m.transformer(ctx.seed))
    net = ref.classifier()
    if m.train_steps:
        train_classifier(net, ctx.public_train, m.train_steps, m.lr, m.batch_size,
                         ctx.rng(RNG_REFERENCE))
    ev = evaluate(net, ctx.public_val)
    return ref, {"val_loss": ev.loss, "val_accuracy": ev.accuracy}


def backbone_config(cfg: TransformerConfig, spec: WidthDepthSpec) -> TransformerConfig:
    return replace(cfg, depth=spec.d, width_fraction=spec.w)


def stage_backbone(ctx: Context, clusters: dict[str, list[DeviceProfile]]) -> BackboneStage:
    cfg = ctx.cfg
    ref, ref_eval = train_reference(ctx)
    probe = ctx.public_train.take(np.arange(min(cfg.family.probe_size, len(ctx.public_train))))
    family = build_family(ref, cfg.family.widths, cfg.family.depths, probe, ctx.public_train,
                          cfg.family.distillation(), ctx.rng(RNG_FAMILY))
    audits = run_phase1(family, clusters, ctx.public_val, cfg.pareto.gamma_p, cfg.pareto.sigma)
    assignments = {}
    for e in ctx.topology.edges:
        spec = audits[e].selected
        member = family.members[spec]
        bcfg = backbone_config(ref.cfg, spec).to_dict()
        blob = dump_params(member.backbone.state_dict(), config_hash(bcfg))
        payload = {"cluster": e, "spec": spec.to_dict(), "zeta": member.size.analytic,
                   "config": bcfg}
        assignments[e] = ctx.send(Message.with_weights("BackboneAssignment", ctx.topology.cloud,
                                                       e, payload, blob))
    return BackboneStage(ref, ref_eval, family, audits, assignments)


def decode_backbone(msg: Message) -> ViTBackbone:
    """Rebuild the assigned backbone from a BackboneAssignment message."""
    cfg = TransformerConfig(**msg.payload["config"])
    h, state = parse_params(msg.attachment)
    if h != config_hash(msg.payload["config"]):
        raise ValueError("weights were produced for a different backbone configuration")
    net = ViTBackbone(cfg)
    net.load_state_dict(state)
    return net


# ---------------------------------------------------------------- stage: header search


def header_dims(ctx: Context, backbone: ViTBackbone) -> HeaderDims:
    return HeaderDims.for_backbone(backbone.cfg, ctx.cfg.nas.channels, ctx.cfg.nas.mlp_hidden)


def encode_model(backbone: ViTBackbone, header: HeaderNet) -> bytes:
    state = {f"backbone.{k}": v for k, v in backbone.state_dict().items()}
    state.update({f"header.{k}": v for k, v in header.state_dict().items()})
    return dump_params(state, config_hash({"backbone": backbone.cfg.to_dict(),
                                           "dag": header.dag.to_dict()}))


def decode_model(msg: Message, backbone_cfg: dict, dims: HeaderDims, num_classes: int
                 ) -> tuple[ViTBackbone, HeaderNet]:
    """Rebuild (backbone, coarse header) from a HeaderDistribution message."""
    cfg = TransformerConfig(**backbone_cfg)
    dag = HeaderDAG.from_dict(msg.payload["dag"])
    h, state = parse_params(msg.attachment)
    if h != config_hash({"backbone": backbone_cfg, "dag": dag.to_dict()}):
        raise ValueError("header weights do not match the distributed architecture")
    bb = ViTBackbone(cfg)
    bb.load_state_dict({k[9:]: v for k, v in state.items() if k.startswith("backbone.")})
    header = HeaderNet(dag, dims, num_classes)
    header.load_state_dict({k[7:]: v for k, v in state.items() if k.startswith("header.")})
    return bb, header


@dataclass
class EdgeOutcome:
    edge: str
    stage1: Stage1Result
    coarse_val_accuracy: float
    distribution: Message
    stage2: Stage2Result | None = None
    outbox: list[Message] = field(default_factory=list)


def search_header(ctx: Context, edge: str, assignment: Message) -> EdgeOutcome:
    cfg = ctx.cfg
    idx = ctx.topology.edges.index(edge)
    backbone = decode_backbone(assignment)
    data = ctx.edge_data[edge]
    nas_seed = int(ctx.rng(RNG_NAS, idx, 0).integers(2 ** 31))
    res = run_phase2_stage1(backbone, data, cfg.model.num_classes, cfg.nas.nas(),
                            ctx.rng(RNG_NAS, idx, 1), seed=nas_seed)
    coarse = res.coarse_header()
    val_acc = child_accuracy(res.state, res.dag, data)
    blob = encode_model(res.state.backbone, coarse)
    outbox = []
    dist = None
    for did in ctx.topology.clusters[edge]:
        msg = Message.with_weights("HeaderDistribution", edge, did,
                                   {"cluster": edge, "dag": res.dag.to_dict()}, blob)
        outbox.append(msg)
        dist = dist or msg
    return EdgeOutcome(edge, res, val_acc, dist, outbox=outbox)


# ---------------------------------------------------------------- stage: personalization


def personalize(ctx: Context, edge: str, distribution: Message, backbone_cfg: dict
                ) -> tuple[Stage2Result, list[Message]]:
    cfg = ctx.cfg
    dims = HeaderDims.for_backbone(TransformerConfig(**backbone_cfg), cfg.nas.channels,
                                   cfg.nas.mlp_hidden)
    backbone, coarse = decode_model(distribution, backbone_cfg, dims, cfg.model.num_classes)
    outbox: list[Message] = []

    def send(kind, sender, receiver, payload):
        outbox.append(Message(kind, sender, receiver, payload))

    devices = {d: ctx.device_data[d] for d in ctx.topology.clusters[edge]}
    idx = ctx.topology.edges.index(edge)
    res = run_phase2_stage2(backbone, coarse, devices, backbone,
                            cfg.personalization.personalization(), seed=ctx.seed * 1000 + idx,
                            edge_id=edge, send=send)
    return res, outbox


def _edge_job(ctx: Context, edge: str, assignment: Message, do_personalize: bool) -> EdgeOutcome:
    out = _stage("header_search", search_header, ctx, edge, assignment)
    if do_personalize:
        out.stage2, msgs = _stage("personalization", personalize, ctx, edge, out.distribution,
                                  assignment.payload["config"])
        out.outbox.extend(msgs)
    return out


# ---------------------------------------------------------------- full run


@dataclass
class RunResult:
    report: dict
    ctx: Context
    backbone: BackboneStage
    edges: dict[str, EdgeOutcome]

    def report_json(self) -> str:
        return report_json(self.report)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _stage(name: str, fn: Callable, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except (AcmeError, ValueError, ArithmeticError, KeyError) as e:
        raise StageError(name, e) from e


def run_edges(ctx: Context, assignments: dict[str, Message], threads: int = 1,
              do_personalize: bool = True) -> dict[str, EdgeOutcome]:
    edges = list(ctx.topology.edges)
    if threads > 1 and len(edges) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_edge_job, ctx, e, assignments[e], do_personalize)
                       for e in edges]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_edge_job(ctx, e, assignments[e], do_personalize) for e in edges]
    for out in outcomes:  # edge order, not completion order
        for msg in out.outbox:
            ctx.send(msg)
    return {o.edge: o for o in outcomes}


def edge_report(out: EdgeOutcome) -> dict:
    s1 = out.stage1
    d = {"dag": s1.dag.to_dict(), "dag_text": s1.dag.describe(), "history": s1.history,
         "best_sampled_reward": s1.best_sampled[0] if s1.best_sampled else None,
         "best_sampled_dag": s1.best_sampled[1].to_dict() if s1.best_sampled else None,
         "coarse_val_accuracy": out.coarse_val_accuracy,
         "header_params": int(sum(t.data.size for t in s1.coarse_header().params.values()))}
    return d


def personalization_report(out: EdgeOutcome) -> dict:
    s2 = out.stage2
    return {"similarity": s2.similarity.to_dict(), "rounds": s2.rounds,
            "coarse_accuracy": s2.coarse_accuracy, "final_accuracy": s2.final_accuracy}


def evaluation_report(edges: dict[str, EdgeOutcome]) -> dict:
    devices = {}
    for e, out in sorted(edges.items()):
        if out.stage2 is None:
            continue
        for d in sorted(out.stage2.final_accuracy):
            devices[d] = {"cluster": e, "coarse_accuracy": out.stage2.coarse_accuracy[d],
                          "final_accuracy": out.stage2.final_accuracy[d]}
    coarse = [v["coarse_accuracy"] for v in devices.values()]
    final = [v["final_accuracy"] for v in devices.values()]
    mc = float(np.mean(coarse)) if coarse else None
    mf = float(np.mean(final)) if final else None
    return {"devices": devices, "mean_coarse_accuracy": mc, "mean_final_accuracy": mf,
            "improved": (mf >= mc) if devices else None}


def traffic_report(ctx: Context) -> dict:
    led = ctx.ledger
    led.check_conservation()
    t = ctx.cfg.traffic
    summary = account_traffic(led)
    out = {"summary": summary, "by_kind": led.by_kind(), "by_link": led.by_link(),
           "messages": {k: led.count(k) for k in sorted({e.kind for e in led.entries})},
           "search_space": compare_search_space(ctx.cfg.nas.B, ctx.cfg.nas.num_ops,
                                                t.centralized_search_space)}
    if t.declared_devices is not None:
        out["declared"] = declared_accounting(t.declared_devices, t.declared_raw_mb_per_device,
                                              t.declared_upload_mb_per_device)
    return out


def run_full_pipeline(cfg: ExperimentConfig, threads: int = 1) -> RunResult:
    """Run every stage; the report is a pure function of ``cfg`` (seed included)."""
    ctx = _stage("partition", prepare, cfg)
    ctx.topology.validate([p.device_id for p in ctx.profiles])
    clusters = _stage("statistics", stage_statistics, ctx)
    bstage = _stage("backbone", stage_backbone, ctx, clusters)
    edges = run_edges(ctx, bstage.assignments, threads, True)
    report = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "topology": ctx.topology.to_dict(),
        "profiles": [p.to_dict() for p in ctx.profiles],
        "device_classes": ctx.device_classes,
        "stages": {
            "backbone": bstage.summary(),
            "header_search": {e: edge_report(o) for e, o in sorted(edges.items())},
            "personalization": {e: personalization_report(o) for e, o in sorted(edges.items())
                                if o.stage2 is not None and o.stage2.rounds},
            "evaluation": evaluation_report(edges),
        },
        "traffic": traffic_report(ctx),
    }
    ev = report["stages"]["evaluation"]
    if ev["improved"] is False:
        log.warning("mean device accuracy fell after personalization: %.4f -> %.4f",
                    ev["mean_coarse_accuracy"], ev["mean_final_accuracy"])
    return RunResult(report, ctx, bstage, edges)
