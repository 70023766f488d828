"""Agent identity, snapshots, and their canonical marshalled form.

A snapshot is everything an agent carries between stations: identity,
the behavior it runs, a reference to its signed code bundle, its owner's
certificate, serialized behavior state, itinerary bookkeeping, and the
travel log. The marshalled encoding is canonical JSON (sorted keys,
state bytes base64), so equal snapshots always produce identical bytes.
"""
from __future__ import annotations

import base64
import re
import uuid
from dataclasses import dataclass, field, replace

from .errors import MeshError
from .security import BundleSignature, Certificate
from .wire import canonical_json

SERVICE = "SERVICE"
PRIVATE = "PRIVATE"

_HEX32 = re.compile(r"^[0-9a-f]{32}$")
_HEX64 = re.compile(r"^[0-9a-f]{64}$")


class SchemaMismatch(MeshError):
    code = "SCHEMA_MISMATCH"


def new_agent_id() -> str:
    """Fresh 128-bit agent identity as 32 lowercase hex chars."""
    return uuid.uuid4().hex


def new_txn_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class TravelEntry:
    station_id: str
    arrival: int
    departure: int | None = None

    def to_json(self) -> dict:
        obj = {"station_id": self.station_id, "arrival": self.arrival}
        if self.departure is not None:
            obj["departure"] = self.departure
        return obj


@dataclass(frozen=True)
class BundleRef:
    url: str
    sha256: str
    signature: BundleSignature

    def to_json(self) -> dict:
        return {
            "url": self.url,
            "sha256": self.sha256,
            "signature": self.signature.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BundleRef":
        return cls(
            url=obj["url"],
            sha256=obj["sha256"],
            signature=BundleSignature.from_json(obj["signature"]),
        )


@dataclass(frozen=True)
class AgentSnapshot:
    agent_id: str
    behavior_id: str
    bundle_ref: BundleRef
    owner_cert: Certificate
    service_kind: str
    open_access: bool
    state_blob: bytes
    itinerary: tuple[str, ...] = ()
    hop_index: int = 0
    travel_log: tuple[TravelEntry, ...] = ()

    def with_state(self, state_blob: bytes) -> "AgentSnapshot":
        return replace(self, state_blob=state_blob)


def _require_keys(obj: dict, keys: set[str], what: str) -> None:
    have = set(obj)
    if have != keys:
        missing = keys - have
        unknown = have - keys
        detail = []
        if missing:
            detail.append(f"missing {sorted(missing)}")
        if unknown:
            detail.append(f"unknown {sorted(unknown)}")
        raise SchemaMismatch(f"{what}: " + ", ".join(detail))


def marshal_snapshot(snapshot: AgentSnapshot) -> bytes:
    _validate(snapshot)
    obj = {
        "agent_id": snapshot.agent_id,
        "behavior_id": snapshot.behavior_id,
        "bundle_ref": snapshot.bundle_ref.to_json(),
        "owner_cert": snapshot.owner_cert.to_json(),
        "service_kind": snapshot.service_kind,
        "open_access": snapshot.open_access,
        "state_blob": base64.b64encode(snapshot.state_blob).decode("ascii"),
        "itinerary": list(snapshot.itinerary),
        "hop_index": snapshot.hop_index,
        "travel_log": [entry.to_json() for entry in snapshot.travel_log],
    }
    return canonical_json(obj)


def unmarshal_snapshot(data: bytes) -> AgentSnapshot:
    import json

    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise SchemaMismatch(f"not canonical JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaMismatch("snapshot must be a JSON object")
    _require_keys(
        obj,
        {
            "agent_id",
            "behavior_id",
            "bundle_ref",
            "owner_cert",
            "service_kind",
            "open_access",
            "state_blob",
            "itinerary",
            "hop_index",
            "travel_log",
        },
        "snapshot",
    )
    try:
        _require_keys(obj["bundle_ref"], {"url", "sha256", "signature"}, "bundle_ref")
        _require_keys(
            obj["bundle_ref"]["signature"], {"signer_cert", "sig"}, "bundle signature"
        )
        _require_keys(
            obj["owner_cert"], {"subject", "public_key", "fingerprint"}, "owner_cert"
        )
        entries = []
        for raw in obj["travel_log"]:
            if not isinstance(raw, dict):
                raise SchemaMismatch("travel entry must be an object")
            keys = set(raw)
            if keys == {"station_id", "arrival"}:
                entries.append(TravelEntry(raw["station_id"], int(raw["arrival"])))
            elif keys == {"station_id", "arrival", "departure"}:
                entries.append(
                    TravelEntry(
                        raw["station_id"], int(raw["arrival"]), int(raw["departure"])
                    )
                )
            else:
                raise SchemaMismatch(f"travel entry keys {sorted(keys)}")
        snapshot = AgentSnapshot(
            agent_id=obj["agent_id"],
            behavior_id=obj["behavior_id"],
            bundle_ref=BundleRef.from_json(obj["bundle_ref"]),
            owner_cert=Certificate.from_json(obj["owner_cert"]),
            service_kind=obj["service_kind"],
            open_access=bool(obj["open_access"]),
            state_blob=base64.b64decode(obj["state_blob"].encode("ascii"), validate=True),
            itinerary=tuple(str(s) for s in obj["itinerary"]),
            hop_index=int(obj["hop_index"]),
            travel_log=tuple(entries),
        )
    except SchemaMismatch:
        raise
    except (MeshError, KeyError, TypeError, ValueError, AttributeError) as exc:
        raise SchemaMismatch(f"bad snapshot field: {exc}") from exc
    _validate(snapshot)
    return snapshot


def _validate(snapshot: AgentSnapshot) -> None:
    if not _HEX32.match(snapshot.agent_id):
        raise SchemaMismatch(f"agent_id {snapshot.agent_id!r} is not 32 hex chars")
    if not snapshot.behavior_id:
        raise SchemaMismatch("behavior_id is empty")
    if snapshot.service_kind not in (SERVICE, PRIVATE):
        raise SchemaMismatch(f"service_kind {snapshot.service_kind!r}")
    if not _HEX64.match(snapshot.bundle_ref.sha256):
        raise SchemaMismatch("bundle_ref.sha256 is not 64 hex chars")
    if snapshot.hop_index < 0 or snapshot.hop_index > len(snapshot.itinerary):
        raise SchemaMismatch(
            f"hop_index {snapshot.hop_index} out of range for "
            f"{len(snapshot.itinerary)}-stop itinerary"
        )
    last_ts = 0
    for entry in snapshot.travel_log:
        if entry.arrival < last_ts:
            raise SchemaMismatch("travel_log timestamps decrease")
        last_ts = entry.arrival
        if entry.departure is not None:
            if entry.departure < entry.arrival:
                raise SchemaMismatch("departure precedes arrival")
            last_ts = entry.departure


def advance_hop_index(itinerary: tuple[str, ...], hop_index: int, dest: str) -> int:
    """Next-stop index after moving to ``dest``.

    Finds the first itinerary slot at or after hop_index (cyclically) that
    names dest and points past it; off-itinerary moves leave the index alone.
    """
    n = len(itinerary)
    if n == 0:
        return 0
    for offset in range(n):
        k = (hop_index + offset) % n
        if itinerary[k] == dest:
            return (k + 1) % n
    return hop_index % n
