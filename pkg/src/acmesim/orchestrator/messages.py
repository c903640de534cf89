"""Typed inter-node messages with per-kind payload schemas.

A payload is a JSON object; its size on the wire is the length of its
canonical encoding (sorted keys, no whitespace) plus the length of an
optional binary attachment (ACMEW1 weights). Schemas list the exact keys a
payload may carry, which is how raw samples and labels are kept off every
link: there is no key that could hold them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

KINDS = ("AttributeStats", "BackboneAssignment", "HeaderDistribution", "ImportanceUpload",
         "AggregatedImportance")

# each kind may take one of several shapes, told apart by their key sets
SCHEMAS: dict[str, list[frozenset]] = {
    "AttributeStats": [
        # device -> edge: capability profile
        frozenset({"device_id", "vcpus", "C", "G", "L", "k", "p", "alpha_G", "alpha_beta",
                   "alpha_L"}),
        # edge -> cloud: what backbone selection needs about the cluster
        frozenset({"cluster", "min_C", "devices", "vcpus"}),
        # device -> edge: backbone feature sketch of the local data
        frozenset({"device_id", "sketch"}),
    ],
    "BackboneAssignment": [
        frozenset({"cluster", "spec", "zeta", "config", "weights_sha256", "weights_nbytes"}),
    ],
    "HeaderDistribution": [
        frozenset({"cluster", "dag", "weights_sha256", "weights_nbytes"}),
    ],
    "ImportanceUpload": [frozenset({"device_id", "round", "scores"})],
    "AggregatedImportance": [frozenset({"device_id", "round", "scores"})],
}
ATTACHMENT_KINDS = {"BackboneAssignment", "HeaderDistribution"}


class SchemaError(ValueError):
    """A payload does not match any schema of its kind."""


def canonical_json(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode()


def _check_numbers(value, path: str) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise SchemaError(f"{path}: non-string key {k!r}")
            _check_numbers(v, f"{path}.{k}")
    elif isinstance(value, list):
        for i, v in enumerate(value):
            _check_numbers(v, f"{path}[{i}]")
    elif not isinstance(value, (str, int, float, bool)) and value is not None:
        raise SchemaError(f"{path}: {type(value).__name__} is not a wire type")


def validate_payload(kind: str, payload: dict, attachment: bytes = b"") -> None:
    if kind not in SCHEMAS:
        raise SchemaError(f"unknown message kind {kind!r}")
    if not isinstance(payload, dict):
        raise SchemaError(f"{kind}: payload must be an object")
    keys = frozenset(payload)
    if keys not in SCHEMAS[kind]:
        raise SchemaError(f"{kind}: unexpected key set {sorted(keys)}")
    _check_numbers(payload, kind)
    if kind == "AttributeStats" and "devices" in payload:
        for i, d in enumerate(payload["devices"]):
            if frozenset(d) != SCHEMAS[kind][0]:
                raise SchemaError(f"{kind}.devices[{i}]: unexpected key set {sorted(d)}")
    if kind in ATTACHMENT_KINDS:
        if payload["weights_nbytes"] != len(attachment):
            raise SchemaError(f"{kind}: attachment length disagrees with weights_nbytes")
        if payload["weights_sha256"] != hashlib.sha256(attachment).hexdigest():
            raise SchemaError(f"{kind}: attachment digest mismatch")
    elif attachment:
        raise SchemaError(f"{kind}: carries no attachment")
    if kind in ("ImportanceUpload", "AggregatedImportance"):
        for k, v in payload["scores"].items():
            if not isinstance(v, float) and not isinstance(v, int):
                raise SchemaError(f"{kind}.scores[{k!r}]: expected a number")


@dataclass(frozen=True)
class Message:
    kind: str
    sender: str
    receiver: str
    payload: dict
    attachment: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        validate_payload(self.kind, self.payload, self.attachment)

    @property
    def body(self) -> bytes:
        return canonical_json(self.payload)

    @property
    def byte_size(self) -> int:
        return len(self.body) + len(self.attachment)

    @property
    def link(self) -> str:
        return "-".join(sorted((self.sender, self.receiver)))

    @classmethod
    def with_weights(cls, kind: str, sender: str, receiver: str, payload: dict,
                     blob: bytes) -> "Message":
        """Attach a weights blob, filling in its digest and length."""
        full = dict(payload, weights_sha256=hashlib.sha256(blob).hexdigest(),
                    weights_nbytes=len(blob))
        return cls(kind, sender, receiver, full, blob)


def save_message(msg: Message, stem: str | Path) -> None:
    """Write ``stem.json`` (envelope and payload) and, if any, ``stem.acmew``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    env = {"kind": msg.kind, "sender": msg.sender, "receiver": msg.receiver,
           "payload": msg.payload}
    stem.with_suffix(".json").write_text(json.dumps(env, indent=1, sort_keys=True) + "\n")
    if msg.attachment:
        stem.with_suffix(".acmew").write_bytes(msg.attachment)


def load_message(stem: str | Path) -> Message:
    stem = Path(stem)
    env = json.loads(stem.with_suffix(".json").read_text())
    blob_path = stem.with_suffix(".acmew")
    blob = blob_path.read_bytes() if blob_path.exists() else b""
    return Message(env["kind"], env["sender"], env["receiver"], env["payload"], blob)
