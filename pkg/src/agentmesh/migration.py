"""Durable state for the atomic move protocol.

A move is a two-phase commit with the source station as coordinator and
the destination as participant. Both sides append protocol records to a
local write-ahead log, fsynced per append, and that log is the sole
authority during crash recovery:

  source log: INIT(txn, checkpoint snapshot) -> COMMIT | ABORT
  dest log:   PREPARED(txn, held snapshot)   -> COMMITTED | ABORTED

Recovery replays a station's log in order and rebuilds custody: which
agents this station must resume (aborted outgoing moves), which it must
re-activate (committed arrivals), and which prepared holds are still
in doubt and need the source's logged decision. A prepared hold is never
discarded unilaterally.
"""
from __future__ import annotations

import base64
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from .errors import MeshError
from .wire import canonical_json, MAX_FRAME_BODY

INIT = "INIT"
PREPARED = "PREPARED"
COMMITTED = "COMMITTED"
ABORTED = "ABORTED"
PENDING = "PENDING"
UNKNOWN = "UNKNOWN"

# record types; COMMIT/ABORT are the source-side spellings
REC_INIT = "INIT"
REC_PREPARED = "PREPARED"
REC_COMMIT = "COMMIT"
REC_COMMITTED = "COMMITTED"
REC_ABORT = "ABORT"
REC_ABORTED = "ABORTED"
REC_FINISHED = "FINISHED"

PREPARE_TIMEOUT_S = 10.0
COMMIT_ACK_TIMEOUT_S = 10.0
RESOLVE_BACKOFF_MIN_S = 1.0
RESOLVE_BACKOFF_MAX_S = 30.0


@dataclass(frozen=True)
class MoveTxn:
    txn_id: str
    agent_id: str
    source: str
    dest: str
    snapshot_digest: str

    def to_json(self) -> dict:
        return {
            "txn_id": self.txn_id,
            "agent_id": self.agent_id,
            "source": self.source,
            "dest": self.dest,
            "snapshot_digest": self.snapshot_digest,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MoveTxn":
        return cls(
            txn_id=obj["txn_id"],
            agent_id=obj["agent_id"],
            source=obj["source"],
            dest=obj["dest"],
            snapshot_digest=obj["snapshot_digest"],
        )


def snapshot_digest(snapshot_bytes: bytes) -> str:
    return hashlib.sha256(snapshot_bytes).hexdigest()


class TxnLog:
    """Append-only file of framed JSON records, fsync on each append.

    A truncated final record (torn write at crash) is tolerated and
    ignored on replay; appends are serialized by the owning station.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    def append(self, record: dict) -> None:
        body = canonical_json(record)
        if len(body) > MAX_FRAME_BODY:
            raise MeshError("log record too large", code="OVERSIZE")
        self._fh.write(struct.pack(">I", len(body)) + body)
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        try:
            self._fh.close()
        except OSError:
            pass

    @staticmethod
    def read_all(path: str | Path) -> list[dict]:
        import json

        records = []
        raw = Path(path).read_bytes() if Path(path).exists() else b""
        offset = 0
        while offset + 4 <= len(raw):
            (length,) = struct.unpack(">I", raw[offset : offset + 4])
            if offset + 4 + length > len(raw):
                break  # torn tail from a crash mid-append
            body = raw[offset + 4 : offset + 4 + length]
            records.append(json.loads(body.decode("utf-8")))
            offset += 4 + length
        return records


@dataclass
class RecoveredState:
    """What a station must do with its log contents after a restart."""

    # agents to bring back to life locally: agent_id -> (snapshot bytes, how)
    # how is "resume" (aborted outgoing move; no new arrival) or
    # "arrival" (committed inbound move whose live instance died with us)
    residents: dict[str, tuple[bytes, str]]
    # source-side txns found in doubt; recovery has already appended ABORT
    aborted_in_doubt: list[MoveTxn]
    # dest-side prepared holds awaiting the source's decision
    in_doubt_holds: list[tuple[MoveTxn, bytes]]
    # decision answers for peers: txn_id -> COMMITTED | ABORTED | PENDING
    txn_phase: dict[str, str]
    # dest-side holds already decided but useful for idempotent replays
    held_snapshots: dict[str, bytes]


def recover(records: list[dict], log: TxnLog | None = None) -> RecoveredState:
    """Replay a log and resolve what can be resolved locally.

    Source-side INIT without a decision is aborted here and now (the move
    never reached its commit point, so the agent belongs at the source, and
    the log gains the ABORT record when ``log`` is given). Dest-side
    PREPARED without a decision is returned as an in-doubt hold for the
    caller to settle by querying the source.
    """
    txns: dict[str, MoveTxn] = {}
    role: dict[str, str] = {}
    phase: dict[str, str] = {}
    held: dict[str, bytes] = {}
    # agent_id -> ("resident", snapshot, how) | ("outgoing", txn_id) | ("gone",)
    custody: dict[str, tuple] = {}

    for rec in records:
        rtype = rec.get("type")
        if rtype == REC_INIT:
            txn = MoveTxn.from_json(rec["txn"])
            txns[txn.txn_id] = txn
            role[txn.txn_id] = "source"
            phase[txn.txn_id] = INIT
            held[txn.txn_id] = base64.b64decode(rec["snapshot"])
            custody[txn.agent_id] = ("outgoing", txn.txn_id)
        elif rtype == REC_PREPARED:
            txn = MoveTxn.from_json(rec["txn"])
            txns[txn.txn_id] = txn
            role[txn.txn_id] = "dest"
            phase[txn.txn_id] = PREPARED
            held[txn.txn_id] = base64.b64decode(rec["snapshot"])
        elif rtype in (REC_COMMIT, REC_COMMITTED):
            txn_id = rec["txn_id"]
            phase[txn_id] = COMMITTED
            txn = txns.get(txn_id)
            if txn is None:
                continue
            if role.get(txn_id) == "source":
                custody[txn.agent_id] = ("gone",)
            else:
                custody[txn.agent_id] = ("resident", held.get(txn_id, b""), "arrival")
        elif rtype in (REC_ABORT, REC_ABORTED):
            txn_id = rec["txn_id"]
            phase[txn_id] = ABORTED
            txn = txns.get(txn_id)
            if txn is None:
                continue
            if role.get(txn_id) == "source":
                custody[txn.agent_id] = ("resident", held.get(txn_id, b""), "resume")
            # dest-side abort just drops the hold; custody never changed
        elif rtype == REC_FINISHED:
            custody[rec["agent_id"]] = ("gone",)

    aborted_in_doubt: list[MoveTxn] = []
    residents: dict[str, tuple[bytes, str]] = {}
    for agent_id, state in custody.items():
        if state[0] == "outgoing":
            txn = txns[state[1]]
            phase[txn.txn_id] = ABORTED
            if log is not None:
                log.append({"type": REC_ABORT, "txn_id": txn.txn_id})
            aborted_in_doubt.append(txn)
            residents[agent_id] = (held[txn.txn_id], "resume")
        elif state[0] == "resident":
            residents[agent_id] = (state[1], state[2])

    in_doubt_holds = [
        (txns[txn_id], held[txn_id])
        for txn_id, p in phase.items()
        if p == PREPARED and role.get(txn_id) == "dest"
    ]
    return RecoveredState(
        residents=residents,
        aborted_in_doubt=aborted_in_doubt,
        in_doubt_holds=in_doubt_holds,
        txn_phase=phase,
        held_snapshots=held,
    )
