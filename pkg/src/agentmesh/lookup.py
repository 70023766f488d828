"""The lookup service: leased registration, discovery, expiry sweeping,
and change-event subscriptions.

Registrations are soft state. Every record carries a lease; holders renew
it or the sweeper removes the record and notifies subscribers, which is
what lets the mesh heal itself after crashes with no operator involved.
The registry is in-memory on purpose: clients re-register after a registry
restart, so persistence would buy nothing.

All mutations are serialized under one lock, so register/renew/unregister/
sweep behave as if executed in a single total order, and events are
emitted in exactly that order.
"""
from __future__ import annotations

import argparse
import json
import queue
import signal
import socketserver
import sys
import threading
import time
from dataclasses import dataclass, field

from .errors import MeshError, NotFound
from .wire import FrameConn, parse_endpoint

STATION = "STATION"
AGENT = "AGENT"

REGISTERED = "REGISTERED"
RENEWED = "RENEWED"
UNREGISTERED = "UNREGISTERED"
EXPIRED = "EXPIRED"
UPDATED = "UPDATED"

DEFAULT_MIN_LEASE_MS = 1_000
DEFAULT_MAX_LEASE_MS = 600_000
DEFAULT_LEASE_MS = 30_000
DEFAULT_SWEEP_MS = 1_000
SUBSCRIBER_BUFFER = 1024


class DurationOutOfRange(MeshError):
    code = "DURATION_OUT_OF_RANGE"


def now_ms() -> int:
    return int(time.time() * 1000)


@dataclass(frozen=True)
class Lease:
    granted_at: int
    duration_ms: int
    expiry: int

    def to_json(self) -> dict:
        return {
            "granted_at": self.granted_at,
            "duration_ms": self.duration_ms,
            "expiry": self.expiry,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Lease":
        return cls(obj["granted_at"], obj["duration_ms"], obj["expiry"])


@dataclass
class ServiceRecord:
    service_id: str
    kind: str
    endpoint: str
    attributes: dict[str, str] = field(default_factory=dict)
    lease: Lease | None = None

    def to_json(self) -> dict:
        obj = {
            "service_id": self.service_id,
            "kind": self.kind,
            "endpoint": self.endpoint,
            "attributes": dict(self.attributes),
        }
        if self.lease is not None:
            obj["lease"] = self.lease.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ServiceRecord":
        return cls(
            service_id=obj["service_id"],
            kind=obj["kind"],
            endpoint=obj["endpoint"],
            attributes=dict(obj.get("attributes", {})),
            lease=Lease.from_json(obj["lease"]) if "lease" in obj else None,
        )

    def matches(self, kind: str | None, attributes: dict[str, str] | None) -> bool:
        if kind is not None and self.kind != kind:
            return False
        for key, value in (attributes or {}).items():
            if self.attributes.get(key) != value:
                return False
        return True


@dataclass(frozen=True)
class RegistryEvent:
    kind: str
    record: ServiceRecord
    at: int

    def to_json(self) -> dict:
        return {"kind": self.kind, "record": self.record.to_json(), "at": self.at}


class Subscription:
    """One subscriber's bounded event buffer.

    Overflow disconnects the subscriber rather than stalling the registry;
    a disconnected subscriber must reconcile with a fresh lookup.
    """

    def __init__(self, kind: str | None, attributes: dict[str, str] | None):
        self.kind = kind
        self.attributes = attributes
        self.events: queue.Queue[RegistryEvent | None] = queue.Queue(SUBSCRIBER_BUFFER)
        self.overflowed = False

    def offer(self, event: RegistryEvent) -> None:
        if self.overflowed:
            return
        if not event.record.matches(self.kind, self.attributes):
            return
        try:
            self.events.put_nowait(event)
        except queue.Full:
            self.overflowed = True
            try:
                self.events.put_nowait(None)
            except queue.Full:
                pass

    def get(self, timeout: float | None = None) -> RegistryEvent | None:
        return self.events.get(timeout=timeout)

    def close(self) -> None:
        self.overflowed = True


class Registry:
    def __init__(
        self,
        min_lease_ms: int = DEFAULT_MIN_LEASE_MS,
        max_lease_ms: int = DEFAULT_MAX_LEASE_MS,
        clock=now_ms,
    ):
        self.min_lease_ms = min_lease_ms
        self.max_lease_ms = max_lease_ms
        self._clock = clock
        self._records: dict[str, ServiceRecord] = {}
        self._subscribers: list[Subscription] = []
        self._lock = threading.RLock()

    def _emit(self, kind: str, record: ServiceRecord, at: int) -> None:
        event = RegistryEvent(kind, record, at)
        for sub in list(self._subscribers):
            sub.offer(event)
            if sub.overflowed:
                self._subscribers.remove(sub)

    def register(
        self,
        service_id: str,
        kind: str,
        endpoint: str,
        attributes: dict[str, str] | None,
        duration_ms: int,
    ) -> Lease:
        if not (self.min_lease_ms <= duration_ms <= self.max_lease_ms):
            raise DurationOutOfRange(
                f"duration {duration_ms} outside [{self.min_lease_ms}, {self.max_lease_ms}]"
            )
        with self._lock:
            at = self._clock()
            lease = Lease(at, duration_ms, at + duration_ms)
            record = ServiceRecord(service_id, kind, endpoint, dict(attributes or {}), lease)
            existing = self._records.get(service_id)
            replacing = existing is not None and existing.lease.expiry >= at
            self._records[service_id] = record
            self._emit(UPDATED if replacing else REGISTERED, record, at)
            return lease

    def renew(self, service_id: str, duration_ms: int) -> Lease:
        if not (self.min_lease_ms <= duration_ms <= self.max_lease_ms):
            raise DurationOutOfRange(
                f"duration {duration_ms} outside [{self.min_lease_ms}, {self.max_lease_ms}]"
            )
        with self._lock:
            at = self._clock()
            record = self._records.get(service_id)
            if record is None or record.lease.expiry < at:
                raise NotFound(f"no live record for {service_id}")
            lease = Lease(at, duration_ms, at + duration_ms)
            record.lease = lease
            self._emit(RENEWED, record, at)
            return lease

    def unregister(self, service_id: str) -> None:
        with self._lock:
            at = self._clock()
            record = self._records.pop(service_id, None)
            if record is None or record.lease.expiry < at:
                raise NotFound(f"no live record for {service_id}")
            self._emit(UNREGISTERED, record, at)

    def lookup(
        self, kind: str | None = None, attributes: dict[str, str] | None = None
    ) -> list[ServiceRecord]:
        with self._lock:
            at = self._clock()
            return [
                rec
                for rec in self._records.values()
                if rec.lease.expiry >= at and rec.matches(kind, attributes)
            ]

    def sweep(self, at: int | None = None) -> list[str]:
        with self._lock:
            at = self._clock() if at is None else at
            expired = [sid for sid, rec in self._records.items() if rec.lease.expiry < at]
            for sid in expired:
                record = self._records.pop(sid)
                self._emit(EXPIRED, record, at)
            return expired

    def subscribe(
        self, kind: str | None = None, attributes: dict[str, str] | None = None
    ) -> Subscription:
        sub = Subscription(kind, attributes)
        with self._lock:
            self._subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            sub.close()
            if sub in self._subscribers:
                self._subscribers.remove(sub)


class _RegistryHandler(socketserver.BaseRequestHandler):
    def handle(self):
        registry: Registry = self.server.registry
        conn = FrameConn(self.request)
        try:
            while True:
                msg = conn.recv()
                if msg is None:
                    return
                mtype = msg.get("type")
                payload = msg.get("payload") or {}
                try:
                    if mtype == "REGISTER":
                        record = payload["record"]
                        lease = registry.register(
                            record["service_id"],
                            record["kind"],
                            record["endpoint"],
                            record.get("attributes"),
                            payload["duration_ms"],
                        )
                        conn.send({"type": "OK", "payload": {"lease": lease.to_json()}})
                    elif mtype == "RENEW":
                        lease = registry.renew(payload["service_id"], payload["duration_ms"])
                        conn.send({"type": "OK", "payload": {"lease": lease.to_json()}})
                    elif mtype == "UNREGISTER":
                        registry.unregister(payload["service_id"])
                        conn.send({"type": "OK", "payload": {}})
                    elif mtype == "LOOKUP":
                        records = registry.lookup(
                            payload.get("kind"), payload.get("attributes")
                        )
                        conn.send(
                            {
                                "type": "OK",
                                "payload": {"records": [r.to_json() for r in records]},
                            }
                        )
                    elif mtype == "SUBSCRIBE":
                        conn.send({"type": "OK", "payload": {}})
                        self._stream(conn, registry, payload)
                        return
                    elif mtype == "PING":
                        conn.send({"type": "PONG"})
                    else:
                        conn.send(
                            {
                                "type": "ERROR",
                                "payload": {"code": "BAD_REQUEST", "message": str(mtype)},
                            }
                        )
                except MeshError as exc:
                    conn.send({"type": "ERROR", "payload": exc.payload()})
        except OSError:
            pass
        finally:
            conn.close()

    def _stream(self, conn: FrameConn, registry: Registry, payload: dict) -> None:
        sub = registry.subscribe(payload.get("kind"), payload.get("attributes"))
        try:
            while True:
                try:
                    event = sub.get(timeout=1.0)
                except queue.Empty:
                    if self.server.stopping:
                        return
                    continue
                if event is None:
                    return
                conn.send({"type": "EVENT", "payload": event.to_json()})
        except OSError:
            pass
        finally:
            registry.unsubscribe(sub)


class RegistryServer:
    """TCP front end plus the periodic expiry sweeper."""

    def __init__(
        self,
        listen: str = "127.0.0.1:0",
        min_lease_ms: int = DEFAULT_MIN_LEASE_MS,
        max_lease_ms: int = DEFAULT_MAX_LEASE_MS,
        sweep_ms: int = DEFAULT_SWEEP_MS,
        registry: Registry | None = None,
    ):
        self.registry = registry or Registry(min_lease_ms, max_lease_ms)
        self.sweep_ms = sweep_ms
        host, port = parse_endpoint(listen)

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _Server((host, port), _RegistryHandler)
        self._server.registry = self.registry
        self._server.stopping = False
        self.endpoint = f"{host}:{self._server.server_address[1]}"
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def start(self) -> None:
        serve = threading.Thread(target=self._server.serve_forever, daemon=True)
        sweeper = threading.Thread(target=self._sweep_loop, daemon=True)
        serve.start()
        sweeper.start()
        self._threads = [serve, sweeper]

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.sweep_ms / 1000.0):
            self.registry.sweep()

    def stop(self) -> None:
        self._stop.set()
        self._server.stopping = True
        self._server.shutdown()
        self._server.server_close()


class RegistryClient:
    """One-shot framed requests against a registry endpoint."""

    def __init__(self, endpoint: str, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def _request(self, message: dict) -> dict:
        with FrameConn.connect(self.endpoint, timeout=self.timeout) as conn:
            reply = conn.request(message)
        if reply.get("type") == "ERROR":
            payload = reply.get("payload") or {}
            code = payload.get("code", "ERROR")
            if code == "NOT_FOUND":
                raise NotFound(payload.get("message", ""))
            raise MeshError(payload.get("message", ""), code=code)
        return reply.get("payload") or {}

    def register(
        self,
        service_id: str,
        kind: str,
        endpoint: str,
        attributes: dict[str, str] | None,
        duration_ms: int,
    ) -> Lease:
        payload = self._request(
            {
                "type": "REGISTER",
                "payload": {
                    "record": {
                        "service_id": service_id,
                        "kind": kind,
                        "endpoint": endpoint,
                        "attributes": attributes or {},
                    },
                    "duration_ms": duration_ms,
                },
            }
        )
        return Lease.from_json(payload["lease"])

    def renew(self, service_id: str, duration_ms: int) -> Lease:
        payload = self._request(
            {
                "type": "RENEW",
                "payload": {"service_id": service_id, "duration_ms": duration_ms},
            }
        )
        return Lease.from_json(payload["lease"])

    def unregister(self, service_id: str) -> None:
        self._request({"type": "UNREGISTER", "payload": {"service_id": service_id}})

    def lookup(
        self, kind: str | None = None, attributes: dict[str, str] | None = None
    ) -> list[ServiceRecord]:
        payload = self._request(
            {"type": "LOOKUP", "payload": {"kind": kind, "attributes": attributes}}
        )
        return [ServiceRecord.from_json(obj) for obj in payload["records"]]

    def subscribe(
        self, kind: str | None = None, attributes: dict[str, str] | None = None
    ) -> "EventStream":
        conn = FrameConn.connect(self.endpoint, timeout=self.timeout)
        reply = conn.request(
            {"type": "SUBSCRIBE", "payload": {"kind": kind, "attributes": attributes}}
        )
        if reply.get("type") != "OK":
            conn.close()
            raise MeshError("subscribe rejected", code="SUBSCRIBE_FAILED")
        return EventStream(conn)


class EventStream:
    """Client side of a SUBSCRIBE connection."""

    def __init__(self, conn: FrameConn):
        self._conn = conn

    def next_event(self, timeout: float | None = None) -> RegistryEvent | None:
        self._conn.settimeout(timeout)
        try:
            msg = self._conn.recv()
        except (TimeoutError, OSError):
            return None
        if msg is None or msg.get("type") != "EVENT":
            return None
        payload = msg["payload"]
        return RegistryEvent(
            payload["kind"], ServiceRecord.from_json(payload["record"]), payload["at"]
        )

    def close(self) -> None:
        self._conn.close()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mesh-registry", description="Lookup service daemon")
    parser.add_argument("--listen", default="127.0.0.1:4160")
    parser.add_argument("--min-lease-ms", type=int, default=DEFAULT_MIN_LEASE_MS)
    parser.add_argument("--max-lease-ms", type=int, default=DEFAULT_MAX_LEASE_MS)
    parser.add_argument("--sweep-ms", type=int, default=DEFAULT_SWEEP_MS)
    args = parser.parse_args(argv)

    server = RegistryServer(
        listen=args.listen,
        min_lease_ms=args.min_lease_ms,
        max_lease_ms=args.max_lease_ms,
        sweep_ms=args.sweep_ms,
    )
    server.start()
    print(json.dumps({"ready": True, "listen": server.endpoint}), flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
