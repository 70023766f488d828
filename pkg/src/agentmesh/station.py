"""The station daemon: runtime environment for visiting agents.

A station hosts behaviors, enforces admission security on arriving
snapshots, keeps its own lease alive in the registry (re-registering
whenever the registry forgot it, so the mesh heals itself), coordinates
atomic moves as 2PC source, participates as 2PC destination, and serves
an admin HTTP API for status, travel logs, move requests, trust-store
mutation, and a lifecycle event stream.

Behaviors are compiled into the station and resolved by behavior_id; the
signed bundle carried by the agent attests which behavior and version its
owner authorized, and admission verifies that attestation before any
instance runs. Arbitrary code loading is deliberately out of scope.
"""
from __future__ import annotations

import argparse
import base64
import json
import queue
import secrets
import signal
import socket
import socketserver
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import codeserver, migration
from .behaviors import (
    AgentContext,
    BUILTIN_BEHAVIORS,
    CONTINUE,
    Finish,
    MoveTo,
    SandboxFS,
    STREAM_TOKEN_BYTES,
    STREAM_TOKEN_TTL_S,
    TableCatalog,
    restore_behavior,
)
from .errors import Busy, MeshError, NotFound
from .lookup import AGENT, DEFAULT_LEASE_MS, RegistryClient, STATION
from .migration import (
    ABORTED,
    COMMITTED,
    INIT,
    MoveTxn,
    PENDING,
    PREPARED,
    TxnLog,
    UNKNOWN,
    snapshot_digest,
)
from .model import (
    AgentSnapshot,
    SERVICE,
    TravelEntry,
    advance_hop_index,
    marshal_snapshot,
    new_txn_id,
    unmarshal_snapshot,
    SchemaMismatch,
)
from .security import (
    ADMITTED,
    Certificate,
    NonceTable,
    NonceUnknown,
    OK,
    TrustStore,
    admit_agent,
    load_keystore,
)
from .wire import FrameConn, canonical_json, parse_endpoint

ACTIVE = "ACTIVE"
SUSPENDED = "SUSPENDED"
MOVING = "MOVING"
FINISHED = "FINISHED"
FAILED = "FAILED"

DEFAULT_STEP_INTERVAL_MS = 10
DEFAULT_STEP_BUDGET_MS = 500
EVENT_HISTORY = 10_000
EVENT_KEEPALIVE_S = 15.0


class CrashInjected(BaseException):
    """Raised by test hooks to stop a station dead at a protocol boundary.

    Derives from BaseException so ordinary error handling never swallows it.
    """


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class StationConfig:
    station_id: str
    listen: str
    registry: str
    admin_listen: str
    trust_store_path: str
    keystore_path: str
    fs_root: str
    data_dir: str
    tables: dict[str, str] = field(default_factory=dict)
    lease_ms: int = DEFAULT_LEASE_MS
    heartbeat_ms: int = 0  # 0 means lease_ms // 3
    admin_token: str = ""
    step_interval_ms: int = DEFAULT_STEP_INTERVAL_MS
    step_budget_ms: int = DEFAULT_STEP_BUDGET_MS

    def __post_init__(self):
        if self.heartbeat_ms <= 0:
            self.heartbeat_ms = max(1, self.lease_ms // 3)
        if self.heartbeat_ms >= self.lease_ms:
            raise MeshError("heartbeat_ms must be below lease_ms", code="BAD_CONFIG")
        root = Path(self.fs_root)
        if not root.is_dir():
            raise MeshError(f"fs_root {self.fs_root!r} is not a directory", code="BAD_CONFIG")

    @classmethod
    def from_file(cls, path: str | Path) -> "StationConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**obj)

    def to_json(self) -> dict:
        return {
            "station_id": self.station_id,
            "listen": self.listen,
            "registry": self.registry,
            "admin_listen": self.admin_listen,
            "trust_store_path": self.trust_store_path,
            "keystore_path": self.keystore_path,
            "fs_root": self.fs_root,
            "data_dir": self.data_dir,
            "tables": dict(self.tables),
            "lease_ms": self.lease_ms,
            "heartbeat_ms": self.heartbeat_ms,
            "admin_token": self.admin_token,
            "step_interval_ms": self.step_interval_ms,
            "step_budget_ms": self.step_budget_ms,
        }


class ResidentAgent:
    def __init__(self, snapshot: AgentSnapshot, behavior):
        self.agent_id = snapshot.agent_id
        self.behavior_id = snapshot.behavior_id
        self.bundle_ref = snapshot.bundle_ref
        self.owner_cert = snapshot.owner_cert
        self.service_kind = snapshot.service_kind
        self.open_access = snapshot.open_access
        self.itinerary = snapshot.itinerary
        self.hop_index = snapshot.hop_index
        self.travel_log: list[TravelEntry] = list(snapshot.travel_log)
        self.behavior = behavior
        self.run_state = ACTIVE
        self.inbox: queue.Queue = queue.Queue()
        self.result: bytes | None = None
        self.diagnostic = ""
        self.move_in_flight = False
        self.active_stream = False
        self.thread: threading.Thread | None = None

    def build_snapshot(self, state_blob: bytes) -> AgentSnapshot:
        return AgentSnapshot(
            agent_id=self.agent_id,
            behavior_id=self.behavior_id,
            bundle_ref=self.bundle_ref,
            owner_cert=self.owner_cert,
            service_kind=self.service_kind,
            open_access=self.open_access,
            state_blob=state_blob,
            itinerary=self.itinerary,
            hop_index=self.hop_index,
            travel_log=tuple(self.travel_log),
        )


class _Session:
    """Server side of one attach connection; writes are serialized."""

    def __init__(self, conn: FrameConn):
        self._conn = conn
        self._lock = threading.Lock()
        self.closed = False

    def send(self, frame: dict) -> None:
        with self._lock:
            if self.closed:
                return
            try:
                self._conn.send(frame)
            except OSError:
                self.closed = True


class Station:
    def __init__(self, config: StationConfig, behavior_registry=None, clock=now_ms):
        self.config = config
        self.clock = clock
        self.behaviors = dict(behavior_registry or BUILTIN_BEHAVIORS)
        self.key, self.cert = load_keystore(config.keystore_path)
        self.trust = TrustStore.load(config.trust_store_path)
        self.fs = SandboxFS(config.fs_root)
        self.catalog = TableCatalog(config.tables)
        self.nonces = NonceTable(clock=clock)
        self.registry = RegistryClient(config.registry, timeout=3.0)

        self.residents: dict[str, ResidentAgent] = {}
        self._residents_lock = threading.RLock()
        self._wal_lock = threading.Lock()
        self.txn_phase: dict[str, str] = {}
        self.pending_holds: dict[str, tuple[MoveTxn, bytes]] = {}
        self._bundle_cache: dict[str, bytes] = {}

        self._events: deque = deque(maxlen=EVENT_HISTORY)
        self._event_subs: list[queue.Queue] = []
        self._event_seq = 0
        self._event_lock = threading.Lock()

        self._stop = threading.Event()
        self._heartbeat_paused = threading.Event()
        self._serving = False
        self.crashed = False
        self.registered = False
        self.lease = None
        self.move_hook = lambda point: None  # test injection point

        host, port = parse_endpoint(config.listen)
        self._wire_host = host

        station = self

        class _WireServer(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        class _WireHandler(socketserver.BaseRequestHandler):
            def handle(self):
                station._handle_wire(FrameConn(self.request))

        self._wire_server = _WireServer((host, port), _WireHandler)
        self.endpoint = f"{host}:{self._wire_server.server_address[1]}"

        ahost, aport = parse_endpoint(config.admin_listen)
        self._admin_server = ThreadingHTTPServer((ahost, aport), _make_admin_handler(self))
        self.admin_endpoint = f"{ahost}:{self._admin_server.server_address[1]}"

        self.wal = TxnLog(Path(config.data_dir) / "txn.log")

    # lifecycle -----------------------------------------------------------

    def start(self) -> "Station":
        self._recover()
        threading.Thread(
            target=lambda: self._wire_server.serve_forever(poll_interval=0.05), daemon=True
        ).start()
        threading.Thread(
            target=lambda: self._admin_server.serve_forever(poll_interval=0.05), daemon=True
        ).start()
        self._serving = True
        threading.Thread(target=self._heartbeat_loop, daemon=True).start()
        threading.Thread(target=self._resolve_loop, daemon=True).start()
        return self

    def stop(self) -> None:
        if self.crashed:
            return
        self._stop.set()
        with self._residents_lock:
            agents = list(self.residents.values())
        for agent in agents:
            if agent.service_kind == SERVICE and agent.run_state == ACTIVE:
                try:
                    self.registry.unregister(agent.agent_id)
                except (MeshError, OSError):
                    pass
        if self.registered:
            try:
                self.registry.unregister(self.config.station_id)
            except (MeshError, OSError):
                pass
        self._shutdown_servers()
        self.wal.close()

    def crash(self) -> None:
        """Test-only hard stop: lose all in-memory state, keep the disk.

        The crashed flag flips only once the listen ports are really free,
        so a harness may rebind the same identity as soon as it sees it.
        """
        self._stop.set()
        self._shutdown_servers()
        self.wal.close()
        self.crashed = True

    def _shutdown_servers(self) -> None:
        # shutdown() blocks until the serve loop exits; only then is the
        # listen port actually free for a restarted station to rebind
        if not self._serving:
            return
        self._serving = False
        for server in (self._wire_server, self._admin_server):
            try:
                server.shutdown()
                server.server_close()
            except OSError:
                pass

    # events ----------------------------------------------------------------

    def emit(self, event: str, **fields) -> dict:
        with self._event_lock:
            self._event_seq += 1
            record = {"event": event, "seq": self._event_seq, "station_id": self.config.station_id}
            record.update(fields)
            record.setdefault("at", self.clock())
            self._events.append(record)
            for sub in list(self._event_subs):
                try:
                    sub.put_nowait(record)
                except queue.Full:
                    self._event_subs.remove(sub)
        return record

    def subscribe_events(self, replay: bool = False) -> queue.Queue:
        sub: queue.Queue = queue.Queue(4096)
        with self._event_lock:
            if replay:
                for record in self._events:
                    sub.put_nowait(record)
            self._event_subs.append(sub)
        return sub

    def unsubscribe_events(self, sub: queue.Queue) -> None:
        with self._event_lock:
            if sub in self._event_subs:
                self._event_subs.remove(sub)

    # registry heartbeat ------------------------------------------------------

    def pause_heartbeat(self) -> None:
        self._heartbeat_paused.set()

    def resume_heartbeat(self) -> None:
        self._heartbeat_paused.clear()

    def _register_all(self) -> None:
        self.lease = self.registry.register(
            self.config.station_id,
            STATION,
            self.endpoint,
            {"admin": self.admin_endpoint, "station_id": self.config.station_id},
            self.config.lease_ms,
        )
        self.registered = True
        with self._residents_lock:
            agents = [a for a in self.residents.values() if a.run_state == ACTIVE]
        for agent in agents:
            if agent.service_kind == SERVICE:
                self._register_agent(agent)

    def _register_agent(self, agent: ResidentAgent) -> None:
        self.registry.register(
            agent.agent_id,
            AGENT,
            self.endpoint,
            {
                "behavior_id": agent.behavior_id,
                "owner": agent.owner_cert.fingerprint,
                "station": self.config.station_id,
            },
            self.config.lease_ms,
        )

    def _heartbeat_loop(self) -> None:
        while not self._stop.is_set():
            if not self._heartbeat_paused.is_set():
                try:
                    if not self.registered:
                        self._register_all()
                    else:
                        try:
                            self.lease = self.registry.renew(
                                self.config.station_id, self.config.lease_ms
                            )
                        except NotFound:
                            self._register_all()
                        with self._residents_lock:
                            agents = [
                                a
                                for a in self.residents.values()
                                if a.run_state == ACTIVE and a.service_kind == SERVICE
                            ]
                        for agent in agents:
                            try:
                                self.registry.renew(agent.agent_id, self.config.lease_ms)
                            except NotFound:
                                self._register_agent(agent)
                except (MeshError, OSError):
                    self.registered = False  # registry gone; keep serving locally
            if self._stop.wait(self.config.heartbeat_ms / 1000.0):
                return

    # recovery ---------------------------------------------------------------

    def _recover(self) -> None:
        records = TxnLog.read_all(self.wal.path)
        state = migration.recover(records, log=self.wal)
        self.txn_phase = state.txn_phase
        self.pending_holds = {txn.txn_id: (txn, snap) for txn, snap in state.in_doubt_holds}
        for txn in state.aborted_in_doubt:
            self.emit("MOVE_ABORTED", txn_id=txn.txn_id, agent_id=txn.agent_id, reason="RECOVERY")
        for agent_id, (snap_bytes, how) in state.residents.items():
            try:
                self._activate(snap_bytes, how=how)
            except MeshError as exc:
                self.emit("FAILED", agent_id=agent_id, diagnostic=f"recovery: {exc}")
        # one synchronous resolution attempt before we serve anything
        for txn_id in list(self.pending_holds):
            self._try_resolve(txn_id)

    def _try_resolve(self, txn_id: str) -> bool:
        held = self.pending_holds.get(txn_id)
        if held is None:
            return True
        txn, snap_bytes = held
        if not txn.source:
            return False  # launched by a starter; nobody to ask
        try:
            with FrameConn.connect(txn.source, timeout=3.0) as conn:
                conn.settimeout(3.0)
                reply = conn.request({"type": "QUERY_TXN", "txn_id": txn_id})
        except (MeshError, OSError):
            return False
        phase = (reply.get("payload") or {}).get("phase", UNKNOWN)
        if phase == COMMITTED:
            with self._wal_lock:
                if self.txn_phase.get(txn_id) != PREPARED:
                    return True  # a racing COMMIT frame already settled it
                self.pending_holds.pop(txn_id, None)
                self.wal.append({"type": migration.REC_COMMITTED, "txn_id": txn_id})
                self.txn_phase[txn_id] = COMMITTED
            self._activate(snap_bytes, how="arrival")
            self.emit(
                "MOVE_COMMITTED",
                txn_id=txn_id,
                agent_id=txn.agent_id,
                source=txn.source,
                dest=txn.dest,
            )
            return True
        if phase == ABORTED:
            with self._wal_lock:
                if self.txn_phase.get(txn_id) != PREPARED:
                    return True
                self.pending_holds.pop(txn_id, None)
                self.wal.append({"type": migration.REC_ABORTED, "txn_id": txn_id})
                self.txn_phase[txn_id] = ABORTED
            return True
        return False  # PENDING or UNKNOWN: hold and retry

    def _resolve_loop(self) -> None:
        backoff = migration.RESOLVE_BACKOFF_MIN_S
        while not self._stop.is_set():
            if self.pending_holds:
                resolved_any = False
                for txn_id in list(self.pending_holds):
                    if self._try_resolve(txn_id):
                        resolved_any = True
                if resolved_any or not self.pending_holds:
                    backoff = migration.RESOLVE_BACKOFF_MIN_S
                else:
                    backoff = min(backoff * 2, migration.RESOLVE_BACKOFF_MAX_S)
            else:
                backoff = migration.RESOLVE_BACKOFF_MIN_S
            if self._stop.wait(backoff):
                return

    # agent activation and the step loop --------------------------------------

    def _activate(self, snapshot_bytes: bytes, how: str) -> ResidentAgent:
        snapshot = unmarshal_snapshot(snapshot_bytes)
        behavior = restore_behavior(snapshot.behavior_id, snapshot.state_blob, self.behaviors)
        agent = ResidentAgent(snapshot, behavior)
        arrival = self.clock()
        if how == "arrival":
            agent.travel_log.append(TravelEntry(self.config.station_id, arrival))
        else:
            # resuming an aborted move: the agent never left
            if agent.travel_log and agent.travel_log[-1].departure is not None:
                agent.travel_log[-1] = replace(agent.travel_log[-1], departure=None)
        with self._residents_lock:
            if agent.agent_id in self.residents:
                raise MeshError(
                    f"agent {agent.agent_id} already resident", code="ALREADY_RESIDENT"
                )
            self.residents[agent.agent_id] = agent
        ctx = self._context_for(agent)
        if how == "arrival":
            try:
                behavior.on_arrive(ctx)
            except Exception as exc:  # noqa: BLE001 - behavior isolation
                agent.run_state = FAILED
                agent.diagnostic = f"on_arrive: {exc}"
                self.emit("FAILED", agent_id=agent.agent_id, diagnostic=agent.diagnostic)
                return agent
            self.emit("ARRIVED", agent_id=agent.agent_id, at=arrival)
        else:
            self.emit("RESUMED", agent_id=agent.agent_id, at=arrival)
        if agent.service_kind == SERVICE:
            try:
                self._register_agent(agent)
            except (MeshError, OSError):
                pass  # heartbeat repairs registration later
        agent.thread = threading.Thread(
            target=self._step_loop, args=(agent,), daemon=True, name=f"agent-{agent.agent_id[:8]}"
        )
        agent.thread.start()
        return agent

    def _context_for(self, agent: ResidentAgent) -> AgentContext:
        ctx = AgentContext(
            station_id=self.config.station_id,
            station_endpoint=self.endpoint,
            fs=self.fs,
            catalog=self.catalog,
            clock=self.clock,
        )
        ctx.itinerary = tuple(agent.itinerary)
        ctx.hop_index = agent.hop_index
        ctx.arrival_ms = agent.travel_log[-1].arrival if agent.travel_log else 0
        ctx._travel_log = tuple(agent.travel_log)
        return ctx

    def _step_loop(self, agent: ResidentAgent) -> None:
        interval = self.config.step_interval_ms / 1000.0
        budget = self.config.step_budget_ms / 1000.0
        while not self._stop.is_set() and agent.run_state == ACTIVE:
            try:
                item = agent.inbox.get(timeout=interval)
            except queue.Empty:
                item = None
            if self._stop.is_set() or agent.run_state != ACTIVE:
                break
            try:
                if item is not None:
                    kind = item[0]
                    if kind == "cmd":
                        self._dispatch_command(agent, item[1], item[2])
                    elif kind == "move":
                        outcome, detail = self._move(agent, item[1])
                        if outcome == "ABORTED":
                            self.emit(
                                "MOVE_REFUSED", agent_id=agent.agent_id, reason=detail
                            )
                        else:
                            return  # agent departed
                    continue
                ctx = self._context_for(agent)
                started = time.monotonic()
                action = agent.behavior.step(ctx)
                elapsed = time.monotonic() - started
                if elapsed > budget:
                    agent.run_state = FAILED
                    agent.diagnostic = f"step overran budget: {elapsed:.3f}s"
                    self.emit("FAILED", agent_id=agent.agent_id, diagnostic=agent.diagnostic)
                    return
                if isinstance(action, MoveTo):
                    if action.endpoint == self.endpoint:
                        continue  # no-op move is refused quietly
                    outcome, detail = self._move(agent, action.endpoint)
                    if outcome == "COMMITTED":
                        return
                    agent.behavior.on_move_failed(
                        self._context_for(agent), action.endpoint, detail
                    )
                elif isinstance(action, Finish):
                    self._finish(agent, action.result)
                    return
            except CrashInjected:
                return
            except MeshError as exc:
                agent.run_state = FAILED
                agent.diagnostic = str(exc)
                self.emit("FAILED", agent_id=agent.agent_id, diagnostic=agent.diagnostic)
                return
            except Exception as exc:  # noqa: BLE001 - behavior isolation
                agent.run_state = FAILED
                agent.diagnostic = f"{type(exc).__name__}: {exc}"
                self.emit("FAILED", agent_id=agent.agent_id, diagnostic=agent.diagnostic)
                return

    def _dispatch_command(self, agent: ResidentAgent, cmd: dict, session: _Session) -> None:
        ctx = self._context_for(agent)
        ctx._session_send = session.send
        ctx._stream_starter = lambda mode, handler: self._start_stream(
            agent, session, mode, handler
        )
        try:
            reply = agent.behavior.handle_command(ctx, cmd)
            if reply is not None:
                session.send({"type": "REPLY", "payload": reply})
        except MeshError as exc:
            session.send({"type": "ERROR", "payload": exc.payload()})
        except Exception as exc:  # noqa: BLE001 - behavior isolation
            agent.run_state = FAILED
            agent.diagnostic = f"{type(exc).__name__}: {exc}"
            session.send(
                {"type": "ERROR", "payload": {"code": "BEHAVIOR_FAILED", "message": str(exc)}}
            )
            self.emit("FAILED", agent_id=agent.agent_id, diagnostic=agent.diagnostic)

    def _finish(self, agent: ResidentAgent, result: bytes) -> None:
        with self._wal_lock:
            self.wal.append({"type": migration.REC_FINISHED, "agent_id": agent.agent_id})
        agent.result = result
        agent.run_state = FINISHED
        if agent.service_kind == SERVICE:
            try:
                self.registry.unregister(agent.agent_id)
            except (MeshError, OSError):
                pass
        self.emit("FINISHED", agent_id=agent.agent_id)

    # the move protocol, source side ------------------------------------------

    def request_move(self, agent_id: str, dest: str) -> None:
        """Queue an owner/admin-initiated move; outcome arrives via events."""
        agent = self._resident(agent_id)
        if agent.run_state not in (ACTIVE,):
            raise Busy(f"agent is {agent.run_state}")
        agent.inbox.put(("move", dest))

    def _resident(self, agent_id: str) -> ResidentAgent:
        with self._residents_lock:
            agent = self.residents.get(agent_id)
        if agent is None:
            raise NotFound(f"agent {agent_id} not resident")
        return agent

    def _move(self, agent: ResidentAgent, dest: str) -> tuple[str, str]:
        if agent.move_in_flight:
            raise Busy("move already in flight")
        agent.move_in_flight = True
        agent.run_state = MOVING
        departure = self.clock()
        saved_log = list(agent.travel_log)
        if agent.travel_log:
            agent.travel_log[-1] = replace(agent.travel_log[-1], departure=departure)
        state_blob = agent.behavior.serialize_state()
        agent.hop_index = advance_hop_index(agent.itinerary, agent.hop_index, dest)
        snapshot = agent.build_snapshot(state_blob)
        snap_bytes = marshal_snapshot(snapshot)
        txn = MoveTxn(
            txn_id=new_txn_id(),
            agent_id=agent.agent_id,
            source=self.endpoint,
            dest=dest,
            snapshot_digest=snapshot_digest(snap_bytes),
        )
        with self._wal_lock:
            self.wal.append(
                {
                    "type": migration.REC_INIT,
                    "txn": txn.to_json(),
                    "snapshot": base64.b64encode(snap_bytes).decode("ascii"),
                }
            )
            self.txn_phase[txn.txn_id] = INIT
        self.move_hook("src_initialized")

        def aborted(reason: str) -> tuple[str, str]:
            with self._wal_lock:
                self.wal.append({"type": migration.REC_ABORT, "txn_id": txn.txn_id})
                self.txn_phase[txn.txn_id] = ABORTED
            agent.travel_log = saved_log
            agent.run_state = ACTIVE
            agent.move_in_flight = False
            self.emit(
                "MOVE_ABORTED", txn_id=txn.txn_id, agent_id=agent.agent_id, reason=reason
            )
            return "ABORTED", reason

        conn = None
        try:
            try:
                conn = FrameConn.connect(dest, timeout=migration.PREPARE_TIMEOUT_S)
                conn.settimeout(migration.PREPARE_TIMEOUT_S)
                reply = conn.request(
                    {
                        "type": "PREPARE",
                        "txn_id": txn.txn_id,
                        "payload": {
                            "txn": txn.to_json(),
                            "snapshot": base64.b64encode(snap_bytes).decode("ascii"),
                        },
                    }
                )
            except (ConnectionError, TimeoutError) as exc:
                reason = "TIMEOUT" if isinstance(exc, TimeoutError) else "DEST_UNREACHABLE"
                return aborted(reason)
            except (MeshError, OSError):
                return aborted("DEST_UNREACHABLE")

            if reply.get("type") != "PREPARED":
                code = (reply.get("payload") or {}).get("code", "REJECTED")
                return aborted(f"PREPARE_REJECTED:{code}")
            self.move_hook("src_prepared_received")

            with self._wal_lock:
                self.wal.append({"type": migration.REC_COMMIT, "txn_id": txn.txn_id})
                self.txn_phase[txn.txn_id] = COMMITTED
            with self._residents_lock:
                self.residents.pop(agent.agent_id, None)
            self.emit("DEPARTED", agent_id=agent.agent_id, at=departure, dest=dest)
            self.emit(
                "MOVE_COMMITTED",
                txn_id=txn.txn_id,
                agent_id=agent.agent_id,
                source=self.endpoint,
                dest=dest,
            )
            try:
                conn.send({"type": "COMMIT", "txn_id": txn.txn_id})
            except OSError:
                pass  # dest recovers via QUERY_TXN against our log
            self.move_hook("src_committed")
            try:
                conn.settimeout(migration.COMMIT_ACK_TIMEOUT_S)
                conn.recv()
            except (MeshError, OSError, TimeoutError):
                pass
            self.move_hook("src_ack_received")
            # finalize: the commit record is durable, nothing else to keep
            self.move_hook("src_finalized")
            return "COMMITTED", txn.txn_id
        finally:
            if conn is not None:
                conn.close()

    # wire protocol, dest side --------------------------------------------------

    def _handle_wire(self, conn: FrameConn) -> None:
        try:
            while not self._stop.is_set():
                try:
                    msg = conn.recv()
                except MeshError:
                    return
                if msg is None:
                    return
                mtype = msg.get("type")
                if mtype == "PREPARE":
                    self._handle_prepare(conn, msg)
                elif mtype == "COMMIT":
                    self._handle_commit(conn, msg)
                elif mtype == "ABORT":
                    self._handle_abort(conn, msg)
                elif mtype == "QUERY_TXN":
                    phase = self.txn_phase.get(msg.get("txn_id", ""), UNKNOWN)
                    if phase == INIT:
                        phase = PENDING
                    conn.send(
                        {
                            "type": "TXN_STATE",
                            "txn_id": msg.get("txn_id"),
                            "payload": {"phase": phase},
                        }
                    )
                elif mtype == "ATTACH":
                    self._handle_attach(conn, msg)
                    return  # connection consumed by the session
                elif mtype == "PING":
                    conn.send({"type": "PONG", "payload": {"station_id": self.config.station_id}})
                else:
                    conn.send(
                        {
                            "type": "ERROR",
                            "payload": {"code": "BAD_REQUEST", "message": str(mtype)},
                        }
                    )
        except CrashInjected:
            return
        except OSError:
            return
        finally:
            conn.close()

    def _reject(self, conn: FrameConn, txn_id: str, code: str, message: str = "") -> None:
        conn.send(
            {
                "type": "REJECTED",
                "txn_id": txn_id,
                "payload": {"code": code, "message": message},
            }
        )

    def _handle_prepare(self, conn: FrameConn, msg: dict) -> None:
        payload = msg.get("payload") or {}
        txn_id = msg.get("txn_id", "")
        known = self.txn_phase.get(txn_id)
        if known in (PREPARED, COMMITTED):
            conn.send({"type": "PREPARED", "txn_id": txn_id})
            return
        if known == ABORTED:
            self._reject(conn, txn_id, "TXN_ABORTED")
            return
        try:
            txn = MoveTxn.from_json(payload["txn"])
            snap_bytes = base64.b64decode(payload["snapshot"])
        except (KeyError, ValueError, TypeError):
            self._reject(conn, txn_id, "SCHEMA_MISMATCH", "bad PREPARE payload")
            return
        if snapshot_digest(snap_bytes) != txn.snapshot_digest:
            self._reject(conn, txn_id, "SCHEMA_MISMATCH", "snapshot digest mismatch")
            return
        try:
            snapshot = unmarshal_snapshot(snap_bytes)
        except SchemaMismatch as exc:
            self._reject(conn, txn_id, "SCHEMA_MISMATCH", str(exc))
            return
        if snapshot.behavior_id not in self.behaviors:
            self._reject(conn, txn_id, "UNKNOWN_BEHAVIOR", snapshot.behavior_id)
            return
        with self._residents_lock:
            already = snapshot.agent_id in self.residents
        if already:
            self._reject(conn, txn_id, "ALREADY_RESIDENT")
            return
        try:
            bundle_bytes = self._fetch_bundle(snapshot.bundle_ref)
        except codeserver.HashMismatch:
            self._reject(conn, txn_id, "HASH_MISMATCH")
            return
        except (MeshError, OSError) as exc:
            self._reject(conn, txn_id, "BUNDLE_UNAVAILABLE", str(exc))
            return
        verdict = admit_agent(snapshot, bundle_bytes, self.trust)
        if verdict != ADMITTED:
            self._reject(conn, txn_id, verdict)
            return
        with self._wal_lock:
            self.wal.append(
                {
                    "type": migration.REC_PREPARED,
                    "txn": txn.to_json(),
                    "snapshot": payload["snapshot"],
                }
            )
            self.txn_phase[txn_id] = PREPARED
            self.pending_holds[txn_id] = (txn, snap_bytes)
        conn.send({"type": "PREPARED", "txn_id": txn_id})
        self.move_hook("dst_prepared")

    def _handle_commit(self, conn: FrameConn, msg: dict) -> None:
        txn_id = msg.get("txn_id", "")
        self.move_hook("dst_commit_received")
        with self._wal_lock:
            phase = self.txn_phase.get(txn_id)
            if phase == COMMITTED:
                held = None
            elif phase != PREPARED or txn_id not in self.pending_holds:
                conn.send(
                    {"type": "ERROR", "payload": {"code": "UNKNOWN_TXN", "message": txn_id}}
                )
                return
            else:
                held = self.pending_holds.pop(txn_id)
                self.wal.append({"type": migration.REC_COMMITTED, "txn_id": txn_id})
                self.txn_phase[txn_id] = COMMITTED
        if held is None:
            conn.send({"type": "COMMITTED", "txn_id": txn_id})
            return
        txn, snap_bytes = held
        try:
            self._activate(snap_bytes, how="arrival")
        except MeshError as exc:
            # custody is ours regardless; surface the failure loudly
            self.emit("FAILED", agent_id=txn.agent_id, diagnostic=str(exc))
        self.emit(
            "MOVE_COMMITTED",
            txn_id=txn_id,
            agent_id=txn.agent_id,
            source=txn.source,
            dest=self.endpoint,
        )
        conn.send({"type": "COMMITTED", "txn_id": txn_id})
        self.move_hook("dst_activated")

    def _handle_abort(self, conn: FrameConn, msg: dict) -> None:
        txn_id = msg.get("txn_id", "")
        with self._wal_lock:
            if self.txn_phase.get(txn_id) == PREPARED:
                self.pending_holds.pop(txn_id, None)
                self.wal.append({"type": migration.REC_ABORTED, "txn_id": txn_id})
                self.txn_phase[txn_id] = ABORTED
        conn.send({"type": "ABORTED", "txn_id": txn_id})

    def _fetch_bundle(self, ref) -> bytes:
        cached = self._bundle_cache.get(ref.sha256)
        if cached is not None:
            return cached
        data = codeserver.fetch(ref.url, ref.sha256)
        self._bundle_cache[ref.sha256] = data
        return data

    # attach sessions -----------------------------------------------------------

    def _handle_attach(self, conn: FrameConn, msg: dict) -> None:
        payload = msg.get("payload") or {}
        agent_id = payload.get("agent_id", "")
        with self._residents_lock:
            agent = self.residents.get(agent_id)
        if agent is None:
            conn.send(
                {"type": "ERROR", "payload": {"code": "NOT_RESIDENT", "message": agent_id}}
            )
            return
        if not agent.open_access:
            nonce = self.nonces.issue_challenge()
            conn.send(
                {
                    "type": "CHALLENGE",
                    "payload": {"nonce": base64.b64encode(nonce).decode("ascii")},
                }
            )
            answer_msg = conn.recv()
            if answer_msg is None or answer_msg.get("type") != "CHALLENGE_ANSWER":
                conn.send({"type": "ERROR", "payload": {"code": "ACCESS_DENIED"}})
                return
            try:
                answer = base64.b64decode((answer_msg.get("payload") or {}).get("answer", ""))
                verdict = self.nonces.verify_challenge(nonce, answer, agent.owner_cert)
            except NonceUnknown as exc:
                conn.send({"type": "ERROR", "payload": exc.payload()})
                return
            except (ValueError, TypeError):
                verdict = "REJECTED"
            if verdict != OK:
                conn.send({"type": "ERROR", "payload": {"code": "ACCESS_DENIED"}})
                return
        if agent.run_state == FINISHED:
            conn.send(
                {
                    "type": "ATTACH_OK",
                    "payload": {
                        "finished": True,
                        "result": base64.b64encode(agent.result or b"").decode("ascii"),
                    },
                }
            )
            return
        if agent.run_state == FAILED:
            conn.send(
                {
                    "type": "ATTACH_OK",
                    "payload": {"failed": True, "diagnostic": agent.diagnostic},
                }
            )
            return
        conn.send({"type": "ATTACH_OK", "payload": {"behavior_id": agent.behavior_id}})
        session = _Session(conn)
        self._session_loop(agent, conn, session)

    def _session_loop(self, agent: ResidentAgent, conn: FrameConn, session: _Session) -> None:
        while not self._stop.is_set():
            msg = conn.recv()
            if msg is None or msg.get("type") == "DETACH":
                session.closed = True
                return
            if msg.get("type") != "CMD":
                session.send({"type": "ERROR", "payload": {"code": "BAD_REQUEST"}})
                continue
            cmd = dict(msg.get("payload") or {})
            if cmd.get("cmd") == "write" and cmd.get("transport", "control") == "control":
                chunks: list[bytes] = []
                while True:
                    part = conn.recv()
                    if part is None:
                        return
                    if part.get("type") == "END":
                        break
                    if part.get("type") == "DATA":
                        chunks.append(
                            base64.b64decode((part.get("payload") or {}).get("chunk", ""))
                        )
                cmd["_data"] = b"".join(chunks)
            if agent.run_state != ACTIVE:
                session.send(
                    {"type": "ERROR", "payload": {"code": "NOT_ACTIVE", "message": agent.run_state}}
                )
                continue
            agent.inbox.put(("cmd", cmd, session))

    def _start_stream(self, agent: ResidentAgent, session: _Session, mode: str, handler) -> None:
        if agent.active_stream:
            raise MeshError("a stream is already active for this agent", code="STREAM_BUSY")
        token = secrets.token_bytes(STREAM_TOKEN_BYTES)
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self._wire_host, 0))
        listener.listen(1)
        listener.settimeout(STREAM_TOKEN_TTL_S)
        port = listener.getsockname()[1]
        agent.active_stream = True

        def run() -> None:
            outcome: dict | None = None
            try:
                sock, _ = listener.accept()
                try:
                    sock.settimeout(STREAM_TOKEN_TTL_S)
                    got = b""
                    while len(got) < STREAM_TOKEN_BYTES:
                        chunk = sock.recv(STREAM_TOKEN_BYTES - len(got))
                        if not chunk:
                            break
                        got += chunk
                    if got != token:
                        outcome = {"type": "ERROR", "payload": {"code": "STREAM_DENIED"}}
                    else:
                        moved = handler(sock)
                        outcome = {"type": "REPLY", "payload": {"ok": True, "bytes": moved}}
                finally:
                    try:
                        sock.close()
                    except OSError:
                        pass
            except Exception as exc:  # noqa: BLE001 - report, never kill the station
                outcome = {
                    "type": "ERROR",
                    "payload": {"code": "STREAM_FAILED", "message": str(exc)},
                }
            finally:
                listener.close()
                # release before reporting, or a pipelined next command races us
                agent.active_stream = False
            session.send(outcome)

        threading.Thread(target=run, daemon=True).start()
        session.send(
            {
                "type": "STREAM_READY",
                "payload": {"port": port, "token": base64.b64encode(token).decode("ascii")},
            }
        )

    # admin API helpers -----------------------------------------------------------

    def status(self) -> dict:
        with self._residents_lock:
            agents = [
                {
                    "agent_id": a.agent_id,
                    "behavior_id": a.behavior_id,
                    "run_state": a.run_state,
                    "service_kind": a.service_kind,
                    "open_access": a.open_access,
                    "hops": len(a.travel_log),
                }
                for a in self.residents.values()
            ]
        return {
            "station_id": self.config.station_id,
            "endpoint": self.endpoint,
            "admin": self.admin_endpoint,
            "registered": self.registered,
            "lease": self.lease.to_json() if self.lease else None,
            "agents": sorted(agents, key=lambda a: a["agent_id"]),
        }

    def travel_log_of(self, agent_id: str) -> list[dict]:
        agent = self._resident(agent_id)
        return [entry.to_json() for entry in agent.travel_log]

    def accept_certificate(self, cert: Certificate) -> str:
        self.trust.accept(cert)
        self.trust.save(self.config.trust_store_path)
        self.emit("TRUST_ADDED", fingerprint=cert.fingerprint, subject=cert.subject)
        return cert.fingerprint

    def resolve_dest(self, dest: str) -> str:
        if ":" in dest:
            return dest
        for record in self.registry.lookup(kind=STATION):
            if record.service_id == dest:
                return record.endpoint
        raise NotFound(f"no station {dest!r} in registry")


def _make_admin_handler(station: Station):
    class _AdminHandler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _json(self, code: int, obj: dict) -> None:
            body = json.dumps(obj).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length).decode("utf-8"))
            except (UnicodeDecodeError, ValueError):
                return {}

        def do_GET(self):
            parts = self.path.split("?", 1)
            path = parts[0]
            if path == "/status":
                self._json(200, station.status())
                return
            if path.startswith("/agents/") and path.endswith("/log"):
                agent_id = path[len("/agents/") : -len("/log")]
                try:
                    self._json(
                        200,
                        {"agent_id": agent_id, "travel_log": station.travel_log_of(agent_id)},
                    )
                except NotFound as exc:
                    self._json(404, exc.payload())
                return
            if path == "/events":
                replay = "replay=1" in (parts[1] if len(parts) > 1 else "")
                self._stream_events(replay)
                return
            self._json(404, {"code": "NOT_FOUND", "message": path})

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            if path.startswith("/agents/") and path.endswith("/move"):
                agent_id = path[len("/agents/") : -len("/move")]
                body = self._body()
                dest = body.get("dest", "")
                try:
                    resolved = station.resolve_dest(dest)
                    station.request_move(agent_id, resolved)
                except NotFound as exc:
                    self._json(404, exc.payload())
                    return
                except Busy as exc:
                    self._json(409, exc.payload())
                    return
                except (MeshError, OSError) as exc:
                    self._json(502, {"code": "REGISTRY_UNAVAILABLE", "message": str(exc)})
                    return
                self._json(202, {"accepted": True, "agent_id": agent_id, "dest": resolved})
                return
            if path == "/trust":
                token = station.config.admin_token
                if token and self.headers.get("X-Admin-Token") != token:
                    self._json(403, {"code": "FORBIDDEN", "message": "admin token required"})
                    return
                body = self._body()
                try:
                    cert = Certificate.from_json(body.get("cert") or {})
                except (MeshError, KeyError, ValueError, TypeError) as exc:
                    self._json(400, {"code": "BAD_CERT", "message": str(exc)})
                    return
                fingerprint = station.accept_certificate(cert)
                self._json(200, {"accepted": True, "fingerprint": fingerprint})
                return
            self._json(404, {"code": "NOT_FOUND", "message": path})

        def _stream_events(self, replay: bool) -> None:
            sub = station.subscribe_events(replay=replay)
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Cache-Control", "no-store")
            self.send_header("Connection", "close")
            self.end_headers()
            try:
                while not station._stop.is_set():
                    try:
                        record = sub.get(timeout=EVENT_KEEPALIVE_S)
                    except queue.Empty:
                        record = {"event": "KEEPALIVE", "at": station.clock()}
                    self.wfile.write((json.dumps(record) + "\n").encode("utf-8"))
                    self.wfile.flush()
            except OSError:
                pass
            finally:
                station.unsubscribe_events(sub)

    return _AdminHandler


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mesh-station", description="Agent station daemon")
    parser.add_argument("--config", help="canonical JSON config file")
    parser.add_argument("--station-id")
    parser.add_argument("--listen")
    parser.add_argument("--registry")
    parser.add_argument("--admin-listen")
    parser.add_argument("--trust-store")
    parser.add_argument("--keystore")
    parser.add_argument("--fs-root")
    parser.add_argument("--data-dir")
    parser.add_argument("--lease-ms", type=int)
    parser.add_argument("--heartbeat-ms", type=int)
    parser.add_argument("--admin-token")
    parser.add_argument("--step-interval-ms", type=int)
    parser.add_argument(
        "--table", action="append", default=[], metavar="NAME=CSV", help="register a table"
    )
    args = parser.parse_args(argv)

    overrides = {
        "station_id": args.station_id,
        "listen": args.listen,
        "registry": args.registry,
        "admin_listen": args.admin_listen,
        "trust_store_path": args.trust_store,
        "keystore_path": args.keystore,
        "fs_root": args.fs_root,
        "data_dir": args.data_dir,
        "lease_ms": args.lease_ms,
        "heartbeat_ms": args.heartbeat_ms,
        "admin_token": args.admin_token,
        "step_interval_ms": args.step_interval_ms,
    }
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    tables = dict(base.get("tables") or {})
    for spec in args.table:
        name, _, path = spec.partition("=")
        tables[name] = path
    base["tables"] = tables
    config = StationConfig(**base)

    station = Station(config).start()
    print(
        json.dumps(
            {"ready": True, "listen": station.endpoint, "admin": station.admin_endpoint}
        ),
        flush=True,
    )
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    station.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
