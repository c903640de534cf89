"""Backbone selection over a gridded three-objective front.

Objectives are (loss, energy, size), all minimized. Each objective range
between the ideal and nadir points is cut into K intervals sized from the
loss range and a performance window; candidates are compared by their
integer grid coordinates.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from acmesim.data import Dataset
from acmesim.energy import DeviceProfile, cluster_max_energy
from acmesim.errors import InfeasibleError
from acmesim.family import BackboneFamily, WidthDepthSpec
from acmesim.nn.transformer import Classifier
from acmesim.training import evaluate

log = logging.getLogger(__name__)

OBJECTIVES = ("loss", "energy", "size")


@dataclass(frozen=True)
class ObjectiveTriple:
    loss: float
    energy: float
    size: float

    def as_array(self) -> np.ndarray:
        return np.array([self.loss, self.energy, self.size], dtype=np.float64)

    def scaled(self, loss: float = 1.0, energy: float = 1.0, size: float = 1.0) -> "ObjectiveTriple":
        return ObjectiveTriple(self.loss * loss, self.energy * energy, self.size * size)


@dataclass(frozen=True)
class Candidate:
    spec: WidthDepthSpec
    objectives: ObjectiveTriple

    @property
    def f(self) -> np.ndarray:
        return self.objectives.as_array()


def _sorted(cands: Iterable[Candidate]) -> list[Candidate]:
    return sorted(cands, key=lambda c: (c.spec, tuple(c.f)))


# ---------------------------------------------------------------- evaluation


def evaluate_menu(family: BackboneFamily, profiles: Sequence[DeviceProfile],
                  public_data: Dataset) -> list[Candidate]:
    """One objective triple per family member; non-finite losses are dropped."""
    if not family.members:
        raise ValueError("backbone family is empty")
    if len(public_data) == 0:
        raise ValueError("public dataset is empty")
    header = family.reference.header
    out = []
    for spec in family.specs:
        member = family.members[spec]
        try:
            loss = evaluate(Classifier(member.backbone, header), public_data).loss
        except ArithmeticError:
            loss = float("nan")
        if not np.isfinite(loss):
            log.warning("candidate %s produced a non-finite loss; excluded", spec.label())
            continue
        out.append(Candidate(spec, ObjectiveTriple(loss, cluster_max_energy(profiles, spec),
                                                   member.size.analytic)))
    return out


def ideal_nadir(cands: Sequence[Candidate]) -> tuple[np.ndarray, np.ndarray]:
    if not cands:
        raise ValueError("need at least one candidate")
    F = np.stack([c.f for c in cands])
    return F.min(axis=0), F.max(axis=0)


# ---------------------------------------------------------------- grid


@dataclass(frozen=True)
class GridSpec:
    K: int
    sigma: float
    r: tuple[float, float, float]
    ideal: tuple[float, float, float]
    nadir: tuple[float, float, float]
    gamma_p: float

    def to_dict(self) -> dict:
        return {"K": self.K, "sigma": self.sigma, "r": list(self.r), "ideal": list(self.ideal),
                "nadir": list(self.nadir), "gamma_p": self.gamma_p}


def default_sigma(ideal: np.ndarray, nadir: np.ndarray) -> float:
    rng = nadir - ideal
    pos = rng[rng > 0]
    return 1e-6 * float(pos.min()) if pos.size else 1e-6


def make_grid(cands: Sequence[Candidate], gamma_p: float, sigma: float | None = None,
              K: int | None = None) -> GridSpec:
    if not gamma_p > 0:
        raise ValueError("performance window must be positive")
    ideal, nadir = ideal_nadir(cands)
    if sigma is None:
        sigma = default_sigma(ideal, nadir)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if K is None:
        K = max(1, math.ceil(abs(nadir[0] - ideal[0]) / gamma_p - 1e-9))
    r = (nadir - ideal + 2 * sigma) / K
    return GridSpec(int(K), float(sigma), tuple(float(v) for v in r),
                    tuple(float(v) for v in ideal), tuple(float(v) for v in nadir), float(gamma_p))


def grid_coordinates(f, grid: GridSpec) -> tuple[int, int, int]:
    f = f.as_array() if isinstance(f, ObjectiveTriple) else np.asarray(f, dtype=np.float64)
    psi = np.ceil((f - np.asarray(grid.ideal) + grid.sigma) / np.asarray(grid.r))
    return tuple(int(v) for v in psi)


def grid_dominates(a: Sequence[int], b: Sequence[int]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


# ---------------------------------------------------------------- front


@dataclass
class GridMember:
    candidate: Candidate
    psi: tuple[int, int, int]

    @property
    def spec(self) -> WidthDepthSpec:
        return self.candidate.spec


@dataclass
class ParetoFrontGrid:
    members: list[GridMember]
    provenance: dict[tuple[int, int], list[WidthDepthSpec]] = field(default_factory=dict)

    @property
    def specs(self) -> list[WidthDepthSpec]:
        return [m.spec for m in self.members]

    def __len__(self) -> int:
        return len(self.members)


def build_pfg(cands: Sequence[Candidate], grid: GridSpec) -> ParetoFrontGrid:
    """Union over (objective l, interval k) of the interval-optimal sets.

    For each interval the solution set holds the candidates whose objective-l
    coordinate equals k; its optimal members are those whose remaining two
    coordinates are not dominated inside that set. The union is finally
    filtered by plain grid dominance.
    """
    gm = [GridMember(c, grid_coordinates(c.objectives, grid)) for c in _sorted(cands)]
    by_spec: dict[WidthDepthSpec, GridMember] = {}
    provenance: dict[tuple[int, int], list[WidthDepthSpec]] = {}
    for l in range(3):
        rest = [j for j in range(3) if j != l]
        for k in sorted({m.psi[l] for m in gm}):
            S = [m for m in gm if m.psi[l] == k]
            phi = [m for m in S
                   if not any(grid_dominates([o.psi[j] for j in rest], [m.psi[j] for j in rest])
                              for o in S)]
            provenance[(l + 1, k)] = [m.spec for m in phi]
            for m in phi:
                by_spec.setdefault(m.spec, m)
    union = list(by_spec.values())
    front = [m for m in union if not any(grid_dominates(o.psi, m.psi) for o in union)]
    return ParetoFrontGrid(sorted(front, key=lambda m: m.spec), provenance)


def truncate_by_storage(pfg: ParetoFrontGrid, profiles: Sequence[DeviceProfile],
                        cluster: str = "cluster") -> ParetoFrontGrid:
    """Keep members with size strictly below the cluster's smallest storage budget."""
    if not profiles:
        raise ValueError("cluster has no devices")
    binding = min(profiles, key=lambda p: (p.C, p.device_id))
    kept = [m for m in pfg.members if m.candidate.objectives.size < binding.C]
    if not kept:
        smallest = min((m.candidate.objectives.size for m in pfg.members), default=float("nan"))
        raise InfeasibleError(
            f"no feasible backbone for cluster {cluster}: storage budget {binding.C:g} of device "
            f"{binding.device_id} is not above the smallest front size {smallest:g}")
    return ParetoFrontGrid(kept, pfg.provenance)


@dataclass
class Selection:
    spec: WidthDepthSpec
    phi_h: list[WidthDepthSpec]
    distances: dict[WidthDepthSpec, float]


def _tie_key(m: GridMember, ideal_psi) -> tuple:
    d2 = sum((a - b) ** 2 for a, b in zip(m.psi, ideal_psi))
    o = m.candidate.objectives
    return (d2, o.size, o.energy, m.spec)


def select_backbone(pfg: ParetoFrontGrid, grid: GridSpec) -> Selection:
    """Closest grid point to the ideal among members in the best-loss interval.

    The best-loss member fixes a loss interval; every member sharing it forms
    the candidate pool. Ties on distance go to smaller size, then smaller
    energy, then the smaller spec.
    """
    if not pfg.members:
        raise InfeasibleError("empty front")
    ideal_psi = grid_coordinates(grid.ideal, grid)
    best = min(pfg.members, key=lambda m: (m.candidate.objectives.loss,
                                           m.candidate.objectives.size,
                                           m.candidate.objectives.energy, m.spec))
    pool = [m for m in pfg.members if m.psi[0] == best.psi[0]]
    chosen = min(pool, key=lambda m: _tie_key(m, ideal_psi))
    dist = {m.spec: math.sqrt(_tie_key(m, ideal_psi)[0]) for m in pool}
    return Selection(chosen.spec, sorted(m.spec for m in pool), dist)


# ---------------------------------------------------------------- phase 1


@dataclass
class ClusterAudit:
    cluster: str
    candidates: list[Candidate]
    grid: GridSpec
    coords: dict[WidthDepthSpec, tuple[int, int, int]]
    pfg: list[WidthDepthSpec]
    feasible: list[WidthDepthSpec]
    selected: WidthDepthSpec
    phi_h: list[WidthDepthSpec]
    min_storage: float

    def rows(self) -> list[dict]:
        out = []
        pfg, feas = set(self.pfg), set(self.feasible)
        for c in _sorted(self.candidates):
            psi = self.coords[c.spec]
            out.append({"cluster": self.cluster, "w": c.spec.w, "d": c.spec.d,
                        "loss": c.objectives.loss, "energy": c.objectives.energy,
                        "size": c.objectives.size, "psi1": psi[0], "psi2": psi[1],
                        "psi3": psi[2], "in_pfg": int(c.spec in pfg),
                        "feasible": int(c.spec in feas), "selected": int(c.spec == self.selected)})
        return out

    def to_dict(self) -> dict:
        return {"cluster": self.cluster, "grid": self.grid.to_dict(), "rows": self.rows(),
                "selected": self.selected.to_dict(), "phi_h": [s.to_dict() for s in self.phi_h],
                "min_storage": self.min_storage}


def select_for_cluster(cands: Sequence[Candidate], profiles: Sequence[DeviceProfile],
                       gamma_p: float, sigma: float | None = None,
                       cluster: str = "cluster") -> ClusterAudit:
    if not cands:
        raise InfeasibleError(f"no valid candidates for cluster {cluster}")
    grid = make_grid(cands, gamma_p, sigma)
    pfg = build_pfg(cands, grid)
    trunc = truncate_by_storage(pfg, profiles, cluster)
    sel = select_backbone(trunc, grid)
    min_c = min(p.C for p in profiles)
    size = {c.spec: c.objectives.size for c in cands}
    if not size[sel.spec] < min_c:
        raise AssertionError("selected backbone violates the storage constraint")
    return ClusterAudit(cluster, list(cands),
                        grid, {c.spec: grid_coordinates(c.objectives, grid) for c in cands},
                        pfg.specs, sorted(s for s in size if size[s] < min_c), sel.spec,
                        sel.phi_h, min_c)


def run_phase1(family: BackboneFamily, clusters: Mapping[str, Sequence[DeviceProfile]],
               public_data: Dataset, gamma_p: float, sigma: float | None = None
               ) -> dict[str, ClusterAudit]:
    """Evaluate, grid, truncate and select independently for every cluster."""
    out = {}
    for cid in sorted(clusters):
        cands = evaluate_menu(family, clusters[cid], public_data)
        out[cid] = select_for_cluster(cands, clusters[cid], gamma_p, sigma, cid)
    return out


PARETO_FIELDS = ["cluster", "w", "d", "loss", "energy", "size", "psi1", "psi2", "psi3",
                 "in_pfg", "feasible", "selected"]


def write_pareto_csv(path: str | Path, audits: Mapping[str, ClusterAudit]) -> int:
    rows = [r for cid in sorted(audits) for r in audits[cid].rows()]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=PARETO_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return len(rows)
