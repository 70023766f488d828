"""Desk-scale reproduction of the platform's two headline experiments:
the mobility soak (one itinerant agent hopping for a long time with no
loss and no duplication) and the file-transfer throughput comparison
between the framed control channel and the raw stream channel.

The harness runs every daemon as a subprocess and observes the mesh only
through its public interfaces, so a green soak is also an end-to-end
integration test.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .client import MeshClient, http_json
from .codeserver import BundleStore, publish
from .errors import MeshError, NotFound
from .lookup import AGENT
from .model import BundleRef
from .security import TrustStore, generate_keypair, issue_certificate, save_keystore
from .wire import canonical_json

MIB = 1024 * 1024


def _spawn(module: str, args: list[str], ready_timeout: float = 15.0) -> tuple[subprocess.Popen, dict]:
    proc = subprocess.Popen(
        [sys.executable, "-m", f"agentmesh.{module}", *args],
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
    )
    deadline = time.monotonic() + ready_timeout
    line = ""
    while time.monotonic() < deadline:
        line = proc.stdout.readline()
        if line:
            break
        if proc.poll() is not None:
            raise MeshError(f"{module} exited with {proc.returncode}", code="SPAWN_FAILED")
    try:
        ready = json.loads(line)
    except ValueError as exc:
        proc.kill()
        raise MeshError(f"{module} printed no ready line", code="SPAWN_FAILED") from exc
    return proc, ready


@dataclass
class StationHandle:
    station_id: str
    endpoint: str
    admin: str
    proc: subprocess.Popen


@dataclass
class LocalMesh:
    """Registry + code server + N stations, each its own subprocess."""

    workdir: Path
    lease_ms: int = 10_000
    heartbeat_ms: int = 0
    step_interval_ms: int = 2
    procs: list[subprocess.Popen] = field(default_factory=list)
    stations: list[StationHandle] = field(default_factory=list)
    registry_endpoint: str = ""
    code_base_url: str = ""
    bundle_store: BundleStore | None = None
    owner_key = None
    owner_cert = None
    keystore_path: Path | None = None

    def start(self, n_stations: int, tables: dict[str, str] | None = None) -> "LocalMesh":
        self.workdir = Path(self.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)

        proc, ready = _spawn("lookup", ["--listen", "127.0.0.1:0"])
        self.procs.append(proc)
        self.registry_endpoint = ready["listen"]

        store_dir = self.workdir / "bundles"
        self.bundle_store = BundleStore(store_dir)
        proc, ready = _spawn("codeserver", ["--listen", "127.0.0.1:0", "--store", str(store_dir)])
        self.procs.append(proc)
        self.code_base_url = f"http://{ready['listen']}"

        self.owner_key = generate_keypair()
        self.owner_cert = issue_certificate("bench-owner", self.owner_key)
        self.keystore_path = self.workdir / "owner-key.json"
        save_keystore(self.keystore_path, "bench-owner", self.owner_key)

        trust = TrustStore()
        trust.accept(self.owner_cert)

        for i in range(n_stations):
            sid = f"st{i}"
            sdir = self.workdir / sid
            fs_root = sdir / "fs"
            fs_root.mkdir(parents=True, exist_ok=True)
            (sdir / "data").mkdir(parents=True, exist_ok=True)
            key = generate_keypair()
            save_keystore(sdir / "key.json", sid, key)
            trust.save(sdir / "trust.txt")
            config = {
                "station_id": sid,
                "listen": "127.0.0.1:0",
                "registry": self.registry_endpoint,
                "admin_listen": "127.0.0.1:0",
                "trust_store_path": str(sdir / "trust.txt"),
                "keystore_path": str(sdir / "key.json"),
                "fs_root": str(fs_root),
                "data_dir": str(sdir / "data"),
                "tables": tables or {},
                "lease_ms": self.lease_ms,
                "heartbeat_ms": self.heartbeat_ms,
                "step_interval_ms": self.step_interval_ms,
            }
            cfg_path = sdir / "station.json"
            cfg_path.write_bytes(canonical_json(config))
            proc, ready = _spawn("station", ["--config", str(cfg_path)])
            self.procs.append(proc)
            self.stations.append(StationHandle(sid, ready["listen"], ready["admin"], proc))

        self._await_registrations(n_stations)
        return self

    def _await_registrations(self, n: int, timeout: float = 10.0) -> None:
        client = self.client()
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                if len(client.discover(kind="STATION")) >= n:
                    return
            except MeshError:
                pass
            time.sleep(0.05)
        raise MeshError("stations never all registered", code="MESH_START_FAILED")

    def publish_bundle(self, behavior_id: str, payload: bytes = b"") -> BundleRef:
        manifest = {"behavior_id": behavior_id, "version": "1", "state_schema_hint": ""}
        return publish(
            self.bundle_store, self.code_base_url, manifest, payload, self.owner_key, self.owner_cert
        )

    def client(self) -> MeshClient:
        return MeshClient(self.registry_endpoint, self.owner_key, self.owner_cert)

    def station_status(self, handle: StationHandle) -> dict:
        return http_json("GET", f"http://{handle.admin}/status")

    def stop(self) -> None:
        for proc in self.procs:
            if proc.poll() is None:
                proc.terminate()
        for proc in self.procs:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
        self.procs.clear()


class _EventCollector(threading.Thread):
    """Tails one station's admin /events stream into a shared list."""

    def __init__(self, admin: str, sink: list, lock: threading.Lock):
        super().__init__(daemon=True)
        self.admin = admin
        self.sink = sink
        self.lock = lock
        self._stop = threading.Event()

    def run(self) -> None:
        import http.client

        host, port = self.admin.rsplit(":", 1)
        while not self._stop.is_set():
            conn = http.client.HTTPConnection(host, int(port), timeout=60)
            try:
                conn.request("GET", "/events?replay=1")
                resp = conn.getresponse()
                while not self._stop.is_set():
                    line = resp.readline()
                    if not line:
                        break
                    try:
                        event = json.loads(line.decode("utf-8"))
                    except ValueError:
                        continue
                    with self.lock:
                        self.sink.append(event)
            except OSError:
                pass
            finally:
                conn.close()
            if self._stop.wait(0.2):
                return

    def stop(self) -> None:
        self._stop.set()


def soak(
    stations: int,
    hops: int,
    dwell_ms: int,
    workdir: str | Path | None = None,
    report_path: str | Path | None = None,
) -> dict:
    """One connectivity agent hopping round-robin until its hop budget is
    spent; polls the mesh for duplicated or lost instances all the while
    and cross-checks the carried travel log against station events."""
    if stations < 2:
        raise MeshError("soak needs at least 2 stations", code="BAD_PARAMS")
    owns_dir = workdir is None
    workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="mesh-soak-"))
    mesh = LocalMesh(workdir=workdir)
    started = time.monotonic()
    events: list[dict] = []
    events_lock = threading.Lock()
    collectors: list[_EventCollector] = []
    failure = ""
    losses = duplicates = 0
    travel_log: list[dict] = []
    try:
        mesh.start(stations)
        ref = mesh.publish_bundle("connectivity-test/1")
        client = mesh.client()
        for handle in mesh.stations:
            collector = _EventCollector(handle.admin, events, events_lock)
            collector.start()
            collectors.append(collector)

        itinerary = [h.endpoint for h in mesh.stations]
        agent_id = client.launch(
            "connectivity-test/1",
            {"itinerary": itinerary, "dwell_ms": dwell_ms, "hops": hops},
            mesh.stations[0].station_id,
            ref,
        )

        gone_streak = 0
        dup_streak = 0
        poll_s = max(dwell_ms, 20) / 1000.0
        deadline = time.monotonic() + max(120.0, hops * (dwell_ms / 1000.0 + 0.3))
        finished = False
        while time.monotonic() < deadline:
            time.sleep(poll_s)
            lus_count = sum(
                1 for r in client.discover(kind=AGENT) if r.service_id == agent_id
            )
            live = 0
            for handle in mesh.stations:
                try:
                    status = mesh.station_status(handle)
                except MeshError:
                    continue
                for a in status.get("agents", []):
                    if a["agent_id"] != agent_id:
                        continue
                    if a["run_state"] == "ACTIVE":
                        live += 1
                    elif a["run_state"] == "FINISHED":
                        finished = True
                    elif a["run_state"] == "FAILED":
                        failure = "agent FAILED"
            # station statuses are read one after another, so a hop that
            # completes mid-sweep can be seen on both sides once; a real
            # duplicate persists and is caught on the next poll too
            if lus_count > 1 or live > 1:
                dup_streak += 1
                if lus_count > 1 or dup_streak >= 2:
                    duplicates += 1
                    failure = f"duplicate observed: lus={lus_count} live={live}"
                    break
            else:
                dup_streak = 0
            if finished:
                break
            if lus_count == 0 and live == 0:
                gone_streak += 1
                if gone_streak >= max(3, int(2.0 / max(poll_s, 0.01))):
                    losses += 1
                    failure = "agent vanished from registry and all stations"
                    break
            else:
                gone_streak = 0
        else:
            failure = failure or "soak timed out"

        if not failure:
            session = client.attach(agent_id)
            if not session.finished:
                session.close()
                failure = "agent not finished at attach time"
            else:
                travel_log = json.loads(session.result.decode("utf-8"))
                if isinstance(travel_log, dict):
                    failure = f"agent finished with note: {travel_log.get('failure')}"
                    travel_log = travel_log.get("travel_log", [])

        if not failure:
            if len(travel_log) != hops:
                failure = f"travel log has {len(travel_log)} entries, expected {hops}"
            else:
                last = 0
                for entry in travel_log:
                    if entry["arrival"] < last:
                        failure = "travel log timestamps decrease"
                        break
                    last = entry.get("departure", entry["arrival"])

        if not failure:
            mismatch = _cross_check(travel_log, events, events_lock, agent_id)
            if mismatch:
                failure = mismatch
    finally:
        for collector in collectors:
            collector.stop()
        mesh.stop()
        if owns_dir:
            shutil.rmtree(workdir, ignore_errors=True)

    report = {
        "stations": stations,
        "hops": hops,
        "dwell_ms": dwell_ms,
        "hops_completed": len(travel_log),
        "log_entries": len(travel_log),
        "losses": losses,
        "duplicates": duplicates,
        "wall_time_s": round(time.monotonic() - started, 3),
        "ok": not failure,
        "failure": failure,
    }
    if report_path:
        Path(report_path).write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report


def _cross_check(travel_log: list[dict], events: list[dict], lock: threading.Lock, agent_id: str) -> str:
    """The carried log must match the stations' own arrival/departure events."""
    with lock:
        relevant = [
            e
            for e in events
            if e.get("agent_id") == agent_id and e.get("event") in ("ARRIVED", "DEPARTED")
        ]
    relevant.sort(key=lambda e: (e["at"], 0 if e["event"] == "ARRIVED" else 1))
    rebuilt: list[dict] = []
    for event in relevant:
        if event["event"] == "ARRIVED":
            rebuilt.append({"station_id": event["station_id"], "arrival": event["at"]})
        else:
            for entry in reversed(rebuilt):
                if entry["station_id"] == event["station_id"] and "departure" not in entry:
                    entry["departure"] = event["at"]
                    break
    if len(rebuilt) != len(travel_log):
        return f"station events rebuilt {len(rebuilt)} entries vs log {len(travel_log)}"
    for mine, theirs in zip(travel_log, rebuilt):
        if mine["station_id"] != theirs["station_id"]:
            return f"station mismatch: {mine} vs {theirs}"
        if mine["arrival"] != theirs["arrival"]:
            return f"arrival mismatch: {mine} vs {theirs}"
        if mine.get("departure") != theirs.get("departure"):
            return f"departure mismatch: {mine} vs {theirs}"
    return ""


def throughput(
    size_bytes: int,
    transport: str,
    trials: int = 1,
    csv_path: str | Path | None = None,
    workdir: str | Path | None = None,
    mesh: LocalMesh | None = None,
    session=None,
) -> list[dict]:
    """Timed write-then-read of a random file through a file-access agent.

    Returns one row per direction per trial: {direction, transport, size,
    MB_per_s}. A data mismatch after the round trip fails immediately;
    correctness precedes speed.
    """
    if transport not in ("control", "stream"):
        raise MeshError(f"transport {transport!r}", code="BAD_PARAMS")
    owns_mesh = mesh is None
    owns_dir = workdir is None and owns_mesh
    rows: list[dict] = []
    if owns_mesh:
        workdir = Path(workdir) if workdir else Path(tempfile.mkdtemp(prefix="mesh-tp-"))
        mesh = LocalMesh(workdir=Path(workdir)).start(1)
    close_session = False
    try:
        if session is None:
            ref = mesh.publish_bundle("file-access/1")
            client = mesh.client()
            agent_id = client.launch("file-access/1", {}, mesh.stations[0].station_id, ref)
            session = client.attach(agent_id)
            close_session = True
        for trial in range(trials):
            data = os.urandom(size_bytes)
            name = f"bench-{transport}-{trial}.bin"

            t0 = time.perf_counter()
            session.write_file(name, data, transport, timeout=300.0)
            write_s = time.perf_counter() - t0

            t0 = time.perf_counter()
            got = session.read_file(name, transport, timeout=300.0)
            read_s = time.perf_counter() - t0

            if got != data:
                raise MeshError(
                    f"round-trip mismatch over {transport} at {size_bytes} bytes",
                    code="DATA_MISMATCH",
                )
            rows.append(_rate_row("write", transport, size_bytes, write_s))
            rows.append(_rate_row("read", transport, size_bytes, read_s))
    finally:
        if close_session and session is not None:
            session.close()
        if owns_mesh:
            mesh.stop()
            if owns_dir:
                shutil.rmtree(workdir, ignore_errors=True)
    if csv_path:
        write_csv(csv_path, rows)
    return rows


def _rate_row(direction: str, transport: str, size: int, seconds: float) -> dict:
    rate = (size / MIB) / seconds if seconds > 0 and size > 0 else 0.0
    return {
        "direction": direction,
        "transport": transport,
        "size": size,
        "MB_per_s": round(rate, 3),
    }


def write_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["direction", "transport", "size", "MB_per_s"])
        writer.writeheader()
        writer.writerows(rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mesh-bench", description="Mesh benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("soak", help="mobility soak: hop one agent around local stations")
    p.add_argument("--stations", type=int, default=3)
    p.add_argument("--hops", type=int, default=300)
    p.add_argument("--dwell-ms", type=int, default=50)
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--workdir")

    p = sub.add_parser("throughput", help="file transfer rates, control vs stream")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--transport", choices=["control", "stream"], required=True)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--csv", help="append plot-ready rows here")
    p.add_argument("--workdir")

    args = parser.parse_args(argv)
    if args.command == "soak":
        report = soak(
            args.stations, args.hops, args.dwell_ms, workdir=args.workdir, report_path=args.report
        )
        print(json.dumps(report, indent=2))
        return 0 if report["ok"] else 1
    rows = throughput(
        args.size, args.transport, trials=args.trials, csv_path=args.csv, workdir=args.workdir
    )
    for row in rows:
        print(json.dumps(row))
    return 0


if __name__ == "__main__":
    sys.exit(main())
