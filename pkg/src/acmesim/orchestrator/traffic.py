"""Byte accounting for every message, against a raw-data-upload baseline."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from acmesim.nas.space import search_space_size
from acmesim.orchestrator.messages import Message

UPLOAD_KINDS = ("AttributeStats", "ImportanceUpload")
MB = 1e6


def tier(node: str) -> int:
    """0 for the cloud, 1 for edges, 2 for devices."""
    if node == "cloud":
        return 0
    return 1 if node.startswith("edge") else 2


def direction(sender: str, receiver: str) -> str:
    return "up" if tier(receiver) < tier(sender) else "down"


@dataclass
class LedgerEntry:
    seq: int
    kind: str
    sender: str
    receiver: str
    link: str
    direction: str
    nbytes: int


@dataclass
class TrafficLedger:
    entries: list[LedgerEntry] = field(default_factory=list)
    raw_bytes: dict[str, int] = field(default_factory=dict)  # device -> size of its dataset

    def record(self, msg: Message) -> LedgerEntry:
        e = LedgerEntry(len(self.entries), msg.kind, msg.sender, msg.receiver, msg.link,
                        direction(msg.sender, msg.receiver), msg.byte_size)
        self.entries.append(e)
        return e

    def set_raw_size(self, device_id: str, nbytes: int) -> None:
        self.raw_bytes[device_id] = int(nbytes)

    @property
    def total(self) -> int:
        return sum(e.nbytes for e in self.entries)

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for e in self.entries:
            out[e.kind] += e.nbytes
        return dict(sorted(out.items()))

    def by_link(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for e in self.entries:
            d = out.setdefault(e.link, {"up": 0, "down": 0})
            d[e.direction] += e.nbytes
        return dict(sorted(out.items()))

    def count(self, kind: str) -> int:
        return sum(1 for e in self.entries if e.kind == kind)

    def check_conservation(self) -> None:
        total = self.total
        kinds = sum(self.by_kind().values())
        links = sum(v["up"] + v["down"] for v in self.by_link().values())
        if not total == kinds == links:
            raise AssertionError(f"ledger totals disagree: {total} {kinds} {links}")

    @property
    def counterfactual(self) -> int:
        """Bytes a centralized scheme would move: every device's raw dataset."""
        return sum(self.raw_bytes.values())

    def rows(self) -> list[dict]:
        acc: dict[tuple, int] = defaultdict(int)
        for e in self.entries:
            acc[(e.link, e.kind, e.direction)] += e.nbytes
        return [{"link": k[0], "kind": k[1], "bytes": v, "direction": k[2]}
                for k, v in sorted(acc.items())]

    def write_csv(self, path: str | Path) -> int:
        rows = self.rows()
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["link", "kind", "bytes", "direction"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return len(rows)


def upload_ratio(upload: float, counterfactual: float) -> float:
    return float(upload) / float(counterfactual) if counterfactual else float("nan")


def account_traffic(ledger: TrafficLedger) -> dict:
    """Uploads of statistics and importance sets versus the raw-data counterfactual."""
    up = sum(e.nbytes for e in ledger.entries
             if e.direction == "up" and e.kind in UPLOAD_KINDS)
    per_kind = {k: sum(e.nbytes for e in ledger.entries
                       if e.direction == "up" and e.kind == k) for k in UPLOAD_KINDS}
    cf = ledger.counterfactual
    return {"upload_bytes": up, "upload_by_kind": per_kind, "counterfactual_bytes": cf,
            "ratio": upload_ratio(up, cf), "total_bytes": ledger.total}


def declared_accounting(devices: int, raw_mb_per_device: float,
                        upload_mb_per_device: float) -> dict:
    """The same ratio computed from declared per-device sizes instead of measured ones."""
    up = devices * upload_mb_per_device
    raw = devices * raw_mb_per_device
    return {"devices": devices, "upload_mb": up, "counterfactual_mb": raw,
            "ratio": upload_ratio(up, raw)}


def compare_search_space(B: int, n_ops: int, centralized: int, ours: int | None = None) -> dict:
    """Header-only search space size against a whole-model space of given size."""
    if centralized <= 0:
        raise ValueError("centralized search space must be positive")
    ours = search_space_size(B, n_ops) if ours is None else int(ours)
    return {"ours": ours, "centralized": int(centralized), "ratio": ours / centralized}
