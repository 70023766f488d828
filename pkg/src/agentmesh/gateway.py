"""HTTP/JSON façade the web console talks to.

One origin for the browser: REST endpoints proxying registry and station
state, launch/move/attach mutations executed with the gateway's owner
credentials, a merged newline-delimited JSON event stream (registry
events plus every station's lifecycle events, keep-alives every 15 s),
and the console's static assets.
"""
from __future__ import annotations

import argparse
import base64
import http.client
import json
import mimetypes
import queue
import signal
import sys
import threading
import time
import uuid
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .client import AttachSession, MeshClient, http_json, _load_bundle_ref
from .errors import AccessDenied, MeshError, NotFound
from .lookup import STATION
from .model import PRIVATE, SERVICE, BundleRef
from .wire import parse_endpoint

KEEPALIVE_S = 15.0


class _EventHub:
    """Fan-out of merged mesh events to connected console streams."""

    def __init__(self):
        self._subs: list[queue.Queue] = []
        self._lock = threading.Lock()

    def subscribe(self) -> queue.Queue:
        sub: queue.Queue = queue.Queue(4096)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: queue.Queue) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, event: dict) -> None:
        with self._lock:
            for sub in list(self._subs):
                try:
                    sub.put_nowait(event)
                except queue.Full:
                    self._subs.remove(sub)


class Gateway:
    def __init__(
        self,
        listen: str,
        registry: str,
        keystore_path: str | None = None,
        bundles: dict[str, BundleRef] | None = None,
        static_dir: str | None = None,
        station_admin_token: str = "",
    ):
        self.client = (
            MeshClient.with_keystore(registry, keystore_path)
            if keystore_path
            else MeshClient(registry)
        )
        self.bundles = dict(bundles or {})
        self.static_dir = Path(static_dir).resolve() if static_dir else None
        self.station_admin_token = station_admin_token
        self.hub = _EventHub()
        self.sessions: dict[str, AttachSession] = {}
        self._session_locks: dict[str, threading.Lock] = {}
        self._sessions_lock = threading.Lock()
        self._stop = threading.Event()
        self._watched: set[str] = set()

        host, port = parse_endpoint(listen)
        self._server = ThreadingHTTPServer((host, port), _make_handler(self))
        self.endpoint = f"{host}:{self._server.server_address[1]}"

    def start(self) -> "Gateway":
        threading.Thread(target=self._server.serve_forever, daemon=True).start()
        threading.Thread(target=self._registry_feed, daemon=True).start()
        threading.Thread(target=self._station_watcher, daemon=True).start()
        return self

    def stop(self) -> None:
        self._stop.set()
        with self._sessions_lock:
            for session in self.sessions.values():
                session.close()
            self.sessions.clear()
        self._server.shutdown()
        self._server.server_close()

    # event merging ---------------------------------------------------------

    def _registry_feed(self) -> None:
        while not self._stop.is_set():
            try:
                stream = self.client.registry.subscribe()
            except (MeshError, OSError):
                if self._stop.wait(1.0):
                    return
                continue
            try:
                while not self._stop.is_set():
                    event = stream.next_event(timeout=1.0)
                    if event is None:
                        continue
                    self.hub.publish({"source": "registry", **event.to_json()})
            except (MeshError, OSError):
                pass
            finally:
                stream.close()

    def _station_watcher(self) -> None:
        while not self._stop.is_set():
            try:
                stations = self.client.registry.lookup(kind=STATION)
            except (MeshError, OSError):
                stations = []
            for record in stations:
                admin = record.attributes.get("admin", "")
                if admin and admin not in self._watched:
                    self._watched.add(admin)
                    threading.Thread(
                        target=self._station_feed,
                        args=(record.service_id, admin),
                        daemon=True,
                    ).start()
            if self._stop.wait(2.0):
                return

    def _station_feed(self, station_id: str, admin: str) -> None:
        host, port = parse_endpoint(admin)
        while not self._stop.is_set():
            conn = http.client.HTTPConnection(host, port, timeout=60)
            try:
                conn.request("GET", "/events")
                resp = conn.getresponse()
                while not self._stop.is_set():
                    line = resp.readline()
                    if not line:
                        break
                    try:
                        event = json.loads(line.decode("utf-8"))
                    except ValueError:
                        continue
                    if event.get("event") == "KEEPALIVE":
                        continue
                    self.hub.publish({"source": "station", **event})
            except OSError:
                pass
            finally:
                conn.close()
            if self._stop.wait(1.0):
                return

    # sessions ----------------------------------------------------------------

    def open_session(self, agent_id: str) -> dict:
        session = self.client.attach(agent_id)
        if session.finished:
            result = base64.b64encode(session.result or b"").decode("ascii")
            session.close()
            return {"finished": True, "result_b64": result}
        if session.failed:
            diagnostic = session.info.get("diagnostic", "")
            session.close()
            return {"failed": True, "diagnostic": diagnostic}
        sid = uuid.uuid4().hex
        with self._sessions_lock:
            self.sessions[sid] = session
            self._session_locks[sid] = threading.Lock()
        return {"session_id": sid}

    def session_command(self, sid: str, command: dict, data_b64: str = "") -> dict:
        with self._sessions_lock:
            session = self.sessions.get(sid)
            lock = self._session_locks.get(sid)
        if session is None:
            raise NotFound(f"no session {sid}")
        name = command.get("cmd")
        with lock:
            started = time.perf_counter()
            if name == "read":
                data = session.read_file(
                    command.get("path", ""), command.get("transport", "control")
                )
                elapsed = time.perf_counter() - started
                return {
                    "ok": True,
                    "bytes": len(data),
                    "elapsed_ms": round(elapsed * 1000, 3),
                    "data_b64": base64.b64encode(data).decode("ascii"),
                }
            if name == "write":
                data = base64.b64decode(data_b64)
                written = session.write_file(
                    command.get("path", ""), data, command.get("transport", "control")
                )
                elapsed = time.perf_counter() - started
                return {
                    "ok": True,
                    "bytes": written,
                    "elapsed_ms": round(elapsed * 1000, 3),
                }
            reply, data = session.command(command)
            out = {"ok": True, "reply": reply}
            if data:
                out["data_b64"] = base64.b64encode(data).decode("ascii")
            return out

    def close_session(self, sid: str) -> None:
        with self._sessions_lock:
            session = self.sessions.pop(sid, None)
            self._session_locks.pop(sid, None)
        if session is not None:
            session.close()

    # REST helpers ----------------------------------------------------------------

    def registry_records(self) -> list[dict]:
        return [r.to_json() for r in self.client.registry.lookup()]

    def station_status(self, station_id: str) -> dict:
        record = self.client.resolve_station(station_id)
        admin = record.attributes.get("admin", "")
        if not admin:
            raise NotFound(f"station {station_id} exposes no admin endpoint")
        return http_json("GET", f"http://{admin}/status")

    def agent_log(self, agent_id: str) -> dict:
        return {"agent_id": agent_id, "travel_log": self.client.travel_log(agent_id)}

    def launch(self, body: dict) -> dict:
        behavior_id = body.get("behavior_id", "")
        ref = self.bundles.get(behavior_id)
        if ref is None:
            raise MeshError(f"no published bundle for {behavior_id!r}", code="NO_BUNDLE")
        agent_id = self.client.launch(
            behavior_id,
            body.get("params") or {},
            body.get("dest", ""),
            ref,
            service_kind=PRIVATE if body.get("service_kind") == PRIVATE else SERVICE,
            open_access=bool(body.get("open_access")),
        )
        return {"agent_id": agent_id}

    def move(self, agent_id: str, dest: str) -> dict:
        _, admin = self.client.find_agent(agent_id)
        if not admin:
            raise NotFound(f"agent {agent_id} has no reachable station")
        return http_json("POST", f"http://{admin}/agents/{agent_id}/move", {"dest": dest})

    def trust(self, station_id: str, cert: dict) -> dict:
        record = self.client.resolve_station(station_id)
        admin = record.attributes.get("admin", "")
        if not admin:
            raise NotFound(f"station {station_id} exposes no admin endpoint")
        headers = (
            {"X-Admin-Token": self.station_admin_token} if self.station_admin_token else {}
        )
        return http_json("POST", f"http://{admin}/trust", {"cert": cert}, headers)


_ERROR_STATUS = {
    "NOT_FOUND": 404,
    "NOT_RESIDENT": 404,
    "ACCESS_DENIED": 403,
    "FORBIDDEN": 403,
    "NO_BUNDLE": 400,
    "BAD_PARAMS": 400,
    "UNKNOWN_BEHAVIOR": 400,
    "BUSY": 409,
}


def _make_handler(gateway: Gateway):
    class _Handler(BaseHTTPRequestHandler):
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

        def _error(self, exc: MeshError) -> None:
            self._json(_ERROR_STATUS.get(exc.code, 502), exc.payload())

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            if length == 0:
                return {}
            try:
                return json.loads(self.rfile.read(length).decode("utf-8"))
            except (UnicodeDecodeError, ValueError):
                return {}

        def do_GET(self):
            path = self.path.split("?", 1)[0]
            try:
                if path == "/api/registry":
                    self._json(200, {"records": gateway.registry_records()})
                elif path.startswith("/api/stations/") and path.endswith("/status"):
                    station_id = path[len("/api/stations/") : -len("/status")]
                    self._json(200, gateway.station_status(station_id))
                elif path.startswith("/api/agents/") and path.endswith("/log"):
                    agent_id = path[len("/api/agents/") : -len("/log")]
                    self._json(200, gateway.agent_log(agent_id))
                elif path == "/api/events":
                    self._stream_events()
                elif path == "/api/bundles":
                    self._json(
                        200,
                        {"behaviors": sorted(gateway.bundles)},
                    )
                else:
                    self._static(path)
            except MeshError as exc:
                self._error(exc)
            except OSError:
                pass

        def do_POST(self):
            path = self.path.split("?", 1)[0]
            body = self._body()
            try:
                if path == "/api/agents":
                    self._json(201, gateway.launch(body))
                elif path.startswith("/api/agents/") and path.endswith("/move"):
                    agent_id = path[len("/api/agents/") : -len("/move")]
                    reply = gateway.move(agent_id, body.get("dest", ""))
                    self._json(202, reply)
                elif path.startswith("/api/agents/") and path.endswith("/attach-session"):
                    agent_id = path[len("/api/agents/") : -len("/attach-session")]
                    self._json(201, gateway.open_session(agent_id))
                elif path.startswith("/api/stations/") and path.endswith("/trust"):
                    station_id = path[len("/api/stations/") : -len("/trust")]
                    self._json(200, gateway.trust(station_id, body.get("cert") or {}))
                elif path.startswith("/api/attach-sessions/"):
                    sid = path[len("/api/attach-sessions/") :]
                    reply = gateway.session_command(
                        sid, body.get("command") or {}, body.get("data_b64", "")
                    )
                    self._json(200, reply)
                else:
                    self._json(404, {"code": "NOT_FOUND", "message": path})
            except AccessDenied as exc:
                self._json(403, exc.payload())
            except MeshError as exc:
                self._error(exc)
            except OSError:
                pass

        def do_DELETE(self):
            path = self.path.split("?", 1)[0]
            if path.startswith("/api/attach-sessions/"):
                sid = path[len("/api/attach-sessions/") :]
                gateway.close_session(sid)
                self._json(200, {"closed": True})
                return
            self._json(404, {"code": "NOT_FOUND", "message": path})

        def _stream_events(self) -> None:
            sub = gateway.hub.subscribe()
            self.send_response(200)
            self.send_header("Content-Type", "application/x-ndjson")
            self.send_header("Cache-Control", "no-store")
            self.send_header("Connection", "close")
            self.end_headers()
            try:
                while not gateway._stop.is_set():
                    try:
                        event = sub.get(timeout=KEEPALIVE_S)
                    except queue.Empty:
                        event = {"source": "gateway", "event": "KEEPALIVE"}
                    self.wfile.write((json.dumps(event) + "\n").encode("utf-8"))
                    self.wfile.flush()
            except OSError:
                pass
            finally:
                gateway.hub.unsubscribe(sub)

        def _static(self, path: str) -> None:
            if gateway.static_dir is None:
                self._json(404, {"code": "NOT_FOUND", "message": path})
                return
            rel = path.lstrip("/") or "index.html"
            target = (gateway.static_dir / rel).resolve()
            if not target.is_relative_to(gateway.static_dir) or not target.is_file():
                self._json(404, {"code": "NOT_FOUND", "message": path})
                return
            ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
            data = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

    return _Handler


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mesh-gateway", description="Console gateway daemon")
    parser.add_argument("--listen", default="127.0.0.1:4170")
    parser.add_argument("--registry", default="127.0.0.1:4160")
    parser.add_argument("--keystore", help="owner keystore used for launches and handshakes")
    parser.add_argument(
        "--bundle",
        action="append",
        default=[],
        metavar="BEHAVIOR=REF_JSON",
        help="bundle ref file per launchable behavior",
    )
    parser.add_argument("--static", help="directory of console assets to serve at /")
    parser.add_argument("--admin-token", default="")
    args = parser.parse_args(argv)

    bundles = {}
    for spec in args.bundle:
        behavior, _, path = spec.partition("=")
        bundles[behavior] = _load_bundle_ref(path)

    gw = Gateway(
        listen=args.listen,
        registry=args.registry,
        keystore_path=args.keystore,
        bundles=bundles,
        static_dir=args.static,
        station_admin_token=args.admin_token,
    ).start()
    print(json.dumps({"ready": True, "listen": gw.endpoint}), flush=True)

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    gw.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
