"""Owner-side tooling: launch, discover, attach, recall, publish, keygen,
trust — as a library (MeshClient) and as the ``mesh`` command.

Launching reuses the move protocol with the starter acting as a degenerate
source that has no prior instance: PREPARE carries the freshly built
snapshot, COMMIT activates it. Attaching performs the owner handshake
(nonce signing) whenever the agent is not open-access.
"""
from __future__ import annotations

import argparse
import base64
import json
import socket
import sys
import time
import urllib.error
import urllib.request
from pathlib import Path

from .behaviors import BUILTIN_BEHAVIORS, CONTROL_CHUNK
from .codeserver import BundleStore, publish
from .errors import AccessDenied, MeshError, NotFound
from .lookup import AGENT, RegistryClient, STATION, ServiceRecord
from .migration import MoveTxn, snapshot_digest
from .model import (
    AgentSnapshot,
    BundleRef,
    PRIVATE,
    SERVICE,
    marshal_snapshot,
    new_agent_id,
    new_txn_id,
)
from .security import (
    Certificate,
    KeyPair,
    answer_challenge,
    generate_keypair,
    issue_certificate,
    load_keystore,
    save_keystore,
)
from .wire import FrameConn, canonical_json


def http_json(method: str, url: str, body: dict | None = None, headers: dict | None = None) -> dict:
    data = json.dumps(body).encode("utf-8") if body is not None else None
    req = urllib.request.Request(url, data=data, method=method)
    req.add_header("Content-Type", "application/json")
    for key, value in (headers or {}).items():
        req.add_header(key, value)
    try:
        with urllib.request.urlopen(req, timeout=10.0) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        try:
            payload = json.loads(exc.read().decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            payload = {}
        raise MeshError(
            payload.get("message", str(exc)), code=payload.get("code", f"HTTP_{exc.code}")
        ) from exc
    except (urllib.error.URLError, OSError) as exc:
        raise MeshError(str(exc), code="UNREACHABLE") from exc


class AttachSession:
    """Client side of an attach channel."""

    def __init__(self, conn: FrameConn, info: dict):
        self._conn = conn
        self.info = info
        self.finished = bool(info.get("finished"))
        self.failed = bool(info.get("failed"))
        self.result = base64.b64decode(info.get("result", "")) if self.finished else None

    def command(self, cmd: dict, timeout: float = 30.0) -> tuple[dict, bytes]:
        """Send one command; returns (reply payload, collected DATA bytes)."""
        self._conn.settimeout(timeout)
        self._conn.send({"type": "CMD", "payload": cmd})
        return self._collect(timeout)

    def _collect(self, timeout: float) -> tuple[dict, bytes]:
        chunks: list[bytes] = []
        stream_ready = None
        while True:
            msg = self._conn.recv()
            if msg is None:
                raise MeshError("session closed mid-command", code="SESSION_CLOSED")
            mtype = msg.get("type")
            payload = msg.get("payload") or {}
            if mtype == "DATA":
                chunks.append(base64.b64decode(payload.get("chunk", "")))
            elif mtype == "STREAM_READY":
                stream_ready = payload
            elif mtype == "REPLY":
                if stream_ready is not None:
                    payload = dict(payload)
                    payload["stream"] = stream_ready
                return payload, b"".join(chunks)
            elif mtype == "ERROR":
                raise MeshError(payload.get("message", ""), code=payload.get("code", "ERROR"))
            else:
                raise MeshError(f"unexpected frame {mtype}", code="BAD_FRAME")

    def read_file(self, path: str, transport: str = "control", timeout: float = 60.0) -> bytes:
        self._conn.settimeout(timeout)
        self._conn.send(
            {"type": "CMD", "payload": {"cmd": "read", "path": path, "transport": transport}}
        )
        if transport == "control":
            _, data = self._collect(timeout)
            return data
        ready = self._await_stream_ready()
        data = self._stream_pull(ready, timeout)
        self._collect(timeout)  # final REPLY after the transfer
        return data

    def write_file(
        self, path: str, data: bytes, transport: str = "control", timeout: float = 60.0
    ) -> int:
        self._conn.settimeout(timeout)
        self._conn.send(
            {
                "type": "CMD",
                "payload": {
                    "cmd": "write",
                    "path": path,
                    "transport": transport,
                    "length": len(data),
                },
            }
        )
        if transport == "control":
            for start in range(0, len(data), CONTROL_CHUNK):
                chunk = data[start : start + CONTROL_CHUNK]
                self._conn.send(
                    {
                        "type": "DATA",
                        "payload": {
                            "seq": start // CONTROL_CHUNK,
                            "chunk": base64.b64encode(chunk).decode("ascii"),
                        },
                    }
                )
            self._conn.send({"type": "END"})
            reply, _ = self._collect(timeout)
            return int(reply.get("bytes", 0))
        ready = self._await_stream_ready()
        self._stream_push(ready, data, timeout)
        reply, _ = self._collect(timeout)
        return int(reply.get("bytes", 0))

    def _await_stream_ready(self) -> dict:
        while True:
            msg = self._conn.recv()
            if msg is None:
                raise MeshError("session closed before STREAM_READY", code="SESSION_CLOSED")
            if msg.get("type") == "STREAM_READY":
                return msg.get("payload") or {}
            if msg.get("type") == "ERROR":
                payload = msg.get("payload") or {}
                raise MeshError(payload.get("message", ""), code=payload.get("code", "ERROR"))

    def _stream_host(self) -> str:
        return self._conn.sock.getpeername()[0]

    def _stream_pull(self, ready: dict, timeout: float) -> bytes:
        with socket.create_connection((self._stream_host(), ready["port"]), timeout=timeout) as s:
            s.sendall(base64.b64decode(ready["token"]))
            chunks = []
            while True:
                chunk = s.recv(1 << 20)
                if not chunk:
                    break
                chunks.append(chunk)
        return b"".join(chunks)

    def _stream_push(self, ready: dict, data: bytes, timeout: float) -> None:
        with socket.create_connection((self._stream_host(), ready["port"]), timeout=timeout) as s:
            s.sendall(base64.b64decode(ready["token"]))
            s.sendall(data)

    def close(self) -> None:
        try:
            self._conn.send({"type": "DETACH"})
        except OSError:
            pass
        self._conn.close()


class MeshClient:
    def __init__(
        self,
        registry: str,
        key: KeyPair | None = None,
        cert: Certificate | None = None,
        behaviors: dict | None = None,
    ):
        self.registry = RegistryClient(registry)
        self.key = key
        self.cert = cert
        self.behaviors = behaviors or BUILTIN_BEHAVIORS

    @classmethod
    def with_keystore(cls, registry: str, keystore_path: str | Path) -> "MeshClient":
        key, cert = load_keystore(keystore_path)
        return cls(registry, key, cert)

    # discovery ------------------------------------------------------------

    def discover(
        self, kind: str | None = None, attributes: dict[str, str] | None = None
    ) -> list[ServiceRecord]:
        return self.registry.lookup(kind, attributes)

    def resolve_station(self, dest: str) -> ServiceRecord:
        records = self.registry.lookup(kind=STATION)
        for record in records:
            if record.service_id == dest or record.endpoint == dest:
                return record
        raise NotFound(f"no station {dest!r} in registry")

    def find_agent(self, agent_id: str) -> tuple[str, str]:
        """(wire endpoint, admin endpoint) of the agent's current station."""
        for record in self.registry.lookup(kind=AGENT):
            if record.service_id == agent_id:
                station_id = record.attributes.get("station", "")
                for st in self.registry.lookup(kind=STATION):
                    if st.service_id == station_id or st.endpoint == record.endpoint:
                        return st.endpoint, st.attributes.get("admin", "")
                return record.endpoint, ""
        # finished/private agents drop out of the registry; ask the stations
        for st in self.registry.lookup(kind=STATION):
            admin = st.attributes.get("admin", "")
            if not admin:
                continue
            try:
                status = http_json("GET", f"http://{admin}/status")
            except MeshError:
                continue
            if any(a["agent_id"] == agent_id for a in status.get("agents", [])):
                return st.endpoint, admin
        raise NotFound(f"agent {agent_id} not found in the mesh")

    # launch ---------------------------------------------------------------

    def build_snapshot(
        self,
        behavior_id: str,
        params: dict,
        dest_endpoint: str,
        bundle_ref: BundleRef,
        service_kind: str = SERVICE,
        open_access: bool = False,
    ) -> AgentSnapshot:
        if self.cert is None:
            raise MeshError("owner credentials required to launch", code="NO_KEYSTORE")
        cls = self.behaviors.get(behavior_id)
        if cls is None:
            raise MeshError(f"behavior {behavior_id!r} unknown", code="UNKNOWN_BEHAVIOR")
        state = cls.initial_state(params)
        itinerary: tuple[str, ...] = ()
        hop_index = 0
        if cls.uses_itinerary:
            itinerary = tuple(params.get("itinerary") or ())
            if dest_endpoint in itinerary:
                hop_index = (itinerary.index(dest_endpoint) + 1) % len(itinerary)
        return AgentSnapshot(
            agent_id=new_agent_id(),
            behavior_id=behavior_id,
            bundle_ref=bundle_ref,
            owner_cert=self.cert,
            service_kind=service_kind,
            open_access=open_access,
            state_blob=canonical_json(state),
            itinerary=itinerary,
            hop_index=hop_index,
            travel_log=(),
        )

    def launch(
        self,
        behavior_id: str,
        params: dict,
        dest: str,
        bundle_ref: BundleRef,
        service_kind: str = SERVICE,
        open_access: bool = False,
    ) -> str:
        record = self.resolve_station(dest)
        snapshot = self.build_snapshot(
            behavior_id, params, record.endpoint, bundle_ref, service_kind, open_access
        )
        snap_bytes = marshal_snapshot(snapshot)
        txn = MoveTxn(
            txn_id=new_txn_id(),
            agent_id=snapshot.agent_id,
            source="",
            dest=record.endpoint,
            snapshot_digest=snapshot_digest(snap_bytes),
        )
        with FrameConn.connect(record.endpoint, timeout=10.0) as conn:
            conn.settimeout(10.0)
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
            if reply.get("type") != "PREPARED":
                payload = reply.get("payload") or {}
                raise MeshError(
                    payload.get("message", "launch rejected"),
                    code=payload.get("code", "PREPARE_REJECTED"),
                )
            ack = conn.request({"type": "COMMIT", "txn_id": txn.txn_id})
            if ack.get("type") != "COMMITTED":
                raise MeshError("commit not acknowledged", code="COMMIT_FAILED")
        return snapshot.agent_id

    # attach / recall / log --------------------------------------------------

    def attach(self, agent_id: str, timeout: float = 10.0) -> AttachSession:
        endpoint, _ = self.find_agent(agent_id)
        conn = FrameConn.connect(endpoint, timeout=timeout)
        conn.settimeout(timeout)
        conn.send({"type": "ATTACH", "payload": {"agent_id": agent_id}})
        msg = conn.recv()
        if msg is None:
            conn.close()
            raise MeshError("station closed the connection", code="SESSION_CLOSED")
        if msg.get("type") == "CHALLENGE":
            if self.key is None:
                conn.close()
                raise AccessDenied("agent is protected and no owner key is loaded")
            nonce = base64.b64decode((msg.get("payload") or {}).get("nonce", ""))
            conn.send(
                {
                    "type": "CHALLENGE_ANSWER",
                    "payload": {
                        "answer": base64.b64encode(
                            answer_challenge(nonce, self.key)
                        ).decode("ascii")
                    },
                }
            )
            msg = conn.recv()
        if msg is None or msg.get("type") != "ATTACH_OK":
            payload = (msg or {}).get("payload") or {}
            conn.close()
            code = payload.get("code", "ACCESS_DENIED")
            if code == "NOT_RESIDENT":
                raise NotFound(payload.get("message", agent_id))
            raise AccessDenied(payload.get("message", ""), code=code)
        return AttachSession(conn, msg.get("payload") or {})

    def recall(self, agent_id: str, wait_s: float = 30.0) -> bytes | None:
        session = self.attach(agent_id)
        if session.finished:
            result = session.result
            session.close()
            return result
        session.command({"cmd": "recall"})
        session.close()
        deadline = time.monotonic() + wait_s
        while time.monotonic() < deadline:
            try:
                session = self.attach(agent_id)
            except (NotFound, MeshError):
                time.sleep(0.1)
                continue
            if session.finished:
                result = session.result
                session.close()
                return result
            session.close()
            time.sleep(0.1)
        raise MeshError(f"agent {agent_id} did not finish in {wait_s}s", code="TIMEOUT")

    def travel_log(self, agent_id: str) -> list[dict]:
        _, admin = self.find_agent(agent_id)
        if not admin:
            raise NotFound(f"no admin endpoint known for agent {agent_id}")
        reply = http_json("GET", f"http://{admin}/agents/{agent_id}/log")
        return reply["travel_log"]


# ---------------------------------------------------------------- CLI below


def _load_bundle_ref(path: str) -> BundleRef:
    return BundleRef.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _print(obj, as_json: bool) -> None:
    if as_json:
        print(json.dumps(obj))
    else:
        if isinstance(obj, list):
            for item in obj:
                print(json.dumps(item))
        else:
            print(json.dumps(obj, indent=2))


def _cmd_keygen(args) -> int:
    seed = bytes.fromhex(args.seed) if args.seed else None
    key = generate_keypair(seed)
    cert = issue_certificate(args.subject, key)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_keystore(out / "key.json", args.subject, key)
    (out / "cert.json").write_bytes(canonical_json(cert.to_json()))
    _print({"subject": args.subject, "fingerprint": cert.fingerprint}, args.json)
    return 0


def _cmd_publish(args) -> int:
    key, cert = load_keystore(args.keystore)
    payload = Path(args.payload).read_bytes() if args.payload else b""
    manifest = {
        "behavior_id": args.behavior,
        "version": args.version,
        "state_schema_hint": args.state_schema_hint,
    }
    ref = publish(BundleStore(args.store), args.base_url, manifest, payload, key, cert)
    text = json.dumps(ref.to_json())
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def _cmd_trust(args) -> int:
    cert = Certificate.from_json(json.loads(Path(args.cert).read_text(encoding="utf-8")))
    if args.station_admin:
        headers = {"X-Admin-Token": args.token} if args.token else {}
        reply = http_json(
            "POST", f"http://{args.station_admin}/trust", {"cert": cert.to_json()}, headers
        )
        _print(reply, args.json)
        return 0
    if args.store:
        from .security import TrustStore

        store = TrustStore.load(args.store) if Path(args.store).exists() else TrustStore()
        store.accept(cert)
        store.save(args.store)
        _print({"accepted": True, "fingerprint": cert.fingerprint}, args.json)
        return 0
    print("trust: need --station-admin or --store", file=sys.stderr)
    return 2


def _client(args) -> MeshClient:
    if getattr(args, "keystore", None):
        return MeshClient.with_keystore(args.registry, args.keystore)
    return MeshClient(args.registry)


def _cmd_launch(args) -> int:
    client = _client(args)
    params = json.loads(args.params)
    agent_id = client.launch(
        args.behavior,
        params,
        args.dest,
        _load_bundle_ref(args.bundle),
        service_kind=PRIVATE if args.private else SERVICE,
        open_access=args.open_access,
    )
    _print({"agent_id": agent_id}, args.json)
    return 0


def _cmd_discover(args) -> int:
    client = _client(args)
    kind = args.kind.upper() if args.kind else None
    attributes = dict(pair.split("=", 1) for pair in args.attr)
    records = client.discover(kind, attributes or None)
    rows = [r.to_json() for r in records]
    if args.json:
        print(json.dumps({"records": rows}))
    else:
        for r in rows:
            attrs = ",".join(f"{k}={v}" for k, v in sorted(r["attributes"].items()))
            print(f"{r['kind']:8} {r['service_id']:34} {r['endpoint']:22} {attrs}")
    return 0


def _cmd_attach(args) -> int:
    client = _client(args)
    session = client.attach(args.agent_id)
    if session.finished:
        result = session.result or b""
        try:
            _print({"finished": True, "result": json.loads(result)}, args.json)
        except ValueError:
            _print(
                {"finished": True, "result_b64": base64.b64encode(result).decode()}, args.json
            )
        session.close()
        return 0
    if session.failed:
        _print({"failed": True, "diagnostic": session.info.get("diagnostic", "")}, args.json)
        session.close()
        return 1
    if args.cmd:
        reply, data = session.command(json.loads(args.cmd))
        out = {"reply": reply}
        if data:
            out["data_b64"] = base64.b64encode(data).decode("ascii")
        _print(out, args.json)
        session.close()
        return 0
    # interactive: one JSON command per line
    try:
        for line in sys.stdin:
            line = line.strip()
            if not line:
                continue
            try:
                reply, data = session.command(json.loads(line))
            except MeshError as exc:
                print(json.dumps(exc.payload()))
                continue
            out = {"reply": reply}
            if data:
                out["data_b64"] = base64.b64encode(data).decode("ascii")
            print(json.dumps(out))
    finally:
        session.close()
    return 0


def _cmd_recall(args) -> int:
    client = _client(args)
    result = client.recall(args.agent_id, wait_s=args.wait)
    try:
        _print({"finished": True, "result": json.loads(result or b"null")}, args.json)
    except ValueError:
        _print(
            {"finished": True, "result_b64": base64.b64encode(result or b"").decode()},
            args.json,
        )
    return 0


def _cmd_log(args) -> int:
    client = _client(args)
    entries = client.travel_log(args.agent_id)
    if args.json:
        print(json.dumps({"agent_id": args.agent_id, "travel_log": entries}))
    else:
        for e in entries:
            dep = e.get("departure", "-")
            print(f"{e['station_id']:20} arrival={e['arrival']} departure={dep}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mesh", description="Mobile-agent mesh client")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--registry", default="127.0.0.1:4160")
    common.add_argument("--keystore")
    common.add_argument("--json", action="store_true")

    p = sub.add_parser("keygen", help="create an owner keystore and certificate")
    p.add_argument("--subject", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", help="32-byte hex seed for deterministic keys")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_keygen)

    p = sub.add_parser("publish", help="sign and store a code bundle")
    p.add_argument("--store", required=True, help="code server bundle directory")
    p.add_argument("--base-url", required=True, help="public base URL of the code server")
    p.add_argument("--behavior", required=True)
    p.add_argument("--version", default="1")
    p.add_argument("--state-schema-hint", default="")
    p.add_argument("--payload", help="file of attested payload bytes")
    p.add_argument("--keystore", required=True)
    p.add_argument("--out", help="write the bundle ref JSON here too")
    p.set_defaults(func=_cmd_publish)

    p = sub.add_parser("trust", help="submit a certificate to a station's trust store")
    p.add_argument("--cert", required=True)
    p.add_argument("--station-admin", help="station admin endpoint host:port")
    p.add_argument("--token", help="station admin token")
    p.add_argument("--store", help="edit a local trust store file instead")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_trust)

    p = sub.add_parser("launch", parents=[common], help="launch an agent")
    p.add_argument("--behavior", required=True)
    p.add_argument("--params", default="{}")
    p.add_argument("--dest", required=True, help="station id or wire endpoint")
    p.add_argument("--bundle", required=True, help="bundle ref JSON file")
    p.add_argument("--private", action="store_true")
    p.add_argument("--open-access", action="store_true")
    p.set_defaults(func=_cmd_launch)

    p = sub.add_parser("discover", parents=[common], help="query the registry")
    p.add_argument("--kind", choices=["station", "agent"])
    p.add_argument("--attr", action="append", default=[], metavar="K=V")
    p.set_defaults(func=_cmd_discover)

    p = sub.add_parser("attach", parents=[common], help="open a command session")
    p.add_argument("agent_id")
    p.add_argument("--cmd", help="one-shot JSON command")
    p.set_defaults(func=_cmd_attach)

    p = sub.add_parser("recall", parents=[common], help="call an agent home and finish it")
    p.add_argument("agent_id")
    p.add_argument("--wait", type=float, default=30.0)
    p.set_defaults(func=_cmd_recall)

    p = sub.add_parser("log", parents=[common], help="print an agent's travel log")
    p.add_argument("agent_id")
    p.set_defaults(func=_cmd_log)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MeshError as exc:
        print(json.dumps(exc.payload()), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
