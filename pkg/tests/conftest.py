import time
from pathlib import Path

import pytest

from agentmesh.client import MeshClient
from agentmesh.codeserver import BundleStore, CodeServer, publish
from agentmesh.lookup import RegistryServer
from agentmesh.model import BundleRef
from agentmesh.security import (
    TrustStore,
    generate_keypair,
    issue_certificate,
    save_keystore,
)
from agentmesh.station import Station, StationConfig


def wait_for(cond, timeout: float = 8.0, interval: float = 0.01, message: str = "condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if cond():
            return
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


class InProcMesh:
    """Registry, code server, and stations running in this process.

    Keeps each station's config pinned to its first bound ports so a
    crashed station can be restarted as the same mesh identity.
    """

    def __init__(self, base: Path, sweep_ms: int = 200, min_lease_ms: int = 100):
        self.base = base
        self.registry = RegistryServer(
            "127.0.0.1:0", min_lease_ms=min_lease_ms, sweep_ms=sweep_ms
        )
        self.registry.start()
        self.store = BundleStore(base / "bundles")
        self.codeserver = CodeServer(self.store)
        self.codeserver.start()
        self.owner_key = generate_keypair()
        self.owner_cert = issue_certificate("owner", self.owner_key)
        self.keystore_path = base / "owner-key.json"
        save_keystore(self.keystore_path, "owner", self.owner_key)
        self.stations: dict[str, Station] = {}
        self.configs: dict[str, StationConfig] = {}

    def add_station(
        self,
        station_id: str,
        tables: dict[str, str] | None = None,
        lease_ms: int = 5000,
        heartbeat_ms: int = 0,
        trust_owner: bool = True,
        admin_token: str = "",
        step_interval_ms: int = 2,
    ) -> Station:
        sdir = self.base / station_id
        fs_root = sdir / "fs"
        fs_root.mkdir(parents=True, exist_ok=True)
        (sdir / "data").mkdir(parents=True, exist_ok=True)
        key = generate_keypair()
        save_keystore(sdir / "key.json", station_id, key)
        trust = TrustStore()
        if trust_owner:
            trust.accept(self.owner_cert)
        trust.save(sdir / "trust.txt")
        config = StationConfig(
            station_id=station_id,
            listen="127.0.0.1:0",
            registry=self.registry.endpoint,
            admin_listen="127.0.0.1:0",
            trust_store_path=str(sdir / "trust.txt"),
            keystore_path=str(sdir / "key.json"),
            fs_root=str(fs_root),
            data_dir=str(sdir / "data"),
            tables=tables or {},
            lease_ms=lease_ms,
            heartbeat_ms=heartbeat_ms,
            admin_token=admin_token,
            step_interval_ms=step_interval_ms,
        )
        station = Station(config).start()
        config.listen = station.endpoint
        config.admin_listen = station.admin_endpoint
        self.configs[station_id] = config
        self.stations[station_id] = station
        self.wait_registered(station_id)
        return station

    def restart_station(self, station_id: str) -> Station:
        station = Station(self.configs[station_id]).start()
        self.stations[station_id] = station
        return station

    def wait_registered(self, station_id: str, timeout: float = 5.0) -> None:
        client = self.client()
        wait_for(
            lambda: any(
                r.service_id == station_id for r in client.discover(kind="STATION")
            ),
            timeout=timeout,
            message=f"station {station_id} registration",
        )

    def publish(self, behavior_id: str, payload: bytes = b"") -> BundleRef:
        manifest = {"behavior_id": behavior_id, "version": "1", "state_schema_hint": ""}
        return publish(
            self.store,
            self.codeserver.base_url,
            manifest,
            payload,
            self.owner_key,
            self.owner_cert,
        )

    def client(self) -> MeshClient:
        return MeshClient(self.registry.endpoint, self.owner_key, self.owner_cert)

    def stop(self) -> None:
        for station in self.stations.values():
            if not station.crashed:
                station.stop()
        self.codeserver.stop()
        self.registry.stop()


@pytest.fixture
def mesh(tmp_path):
    m = InProcMesh(tmp_path)
    yield m
    m.stop()
