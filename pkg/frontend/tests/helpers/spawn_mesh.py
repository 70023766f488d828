"""Boots a complete mesh in one process for the console's integration
tests: registry, code server, two stations trusting a fresh owner, and a
gateway holding that owner's credentials. Prints one JSON line with every
endpoint, then waits for SIGTERM."""
import json
import signal
import sys
import tempfile
import threading
from pathlib import Path

from agentmesh.codeserver import BundleStore, CodeServer, publish
from agentmesh.gateway import Gateway
from agentmesh.lookup import RegistryServer
from agentmesh.security import (
    TrustStore,
    generate_keypair,
    issue_certificate,
    save_keystore,
)
from agentmesh.station import Station, StationConfig


def main() -> int:
    base = Path(tempfile.mkdtemp(prefix="console-mesh-"))
    registry = RegistryServer("127.0.0.1:0", min_lease_ms=100, sweep_ms=200)
    registry.start()
    store = BundleStore(base / "bundles")
    codeserver = CodeServer(store)
    codeserver.start()

    owner_key = generate_keypair()
    owner_cert = issue_certificate("console-owner", owner_key)
    keystore = base / "owner-key.json"
    save_keystore(keystore, "console-owner", owner_key)
    trust = TrustStore()
    trust.accept(owner_cert)

    stations = []
    for i in range(2):
        sdir = base / f"st{i}"
        (sdir / "fs").mkdir(parents=True)
        (sdir / "data").mkdir(parents=True)
        key = generate_keypair()
        save_keystore(sdir / "key.json", f"st{i}", key)
        trust.save(sdir / "trust.txt")
        config = StationConfig(
            station_id=f"st{i}",
            listen="127.0.0.1:0",
            registry=registry.endpoint,
            admin_listen="127.0.0.1:0",
            trust_store_path=str(sdir / "trust.txt"),
            keystore_path=str(sdir / "key.json"),
            fs_root=str(sdir / "fs"),
            data_dir=str(sdir / "data"),
            lease_ms=5000,
            step_interval_ms=2,
        )
        stations.append(Station(config).start())

    bundles = {}
    for behavior_id in ("file-access/1", "connectivity-test/1", "search/1", "data-query/1"):
        manifest = {"behavior_id": behavior_id, "version": "1", "state_schema_hint": ""}
        bundles[behavior_id] = publish(
            store, codeserver.base_url, manifest, b"", owner_key, owner_cert
        )

    gateway = Gateway(
        listen="127.0.0.1:0",
        registry=registry.endpoint,
        keystore_path=str(keystore),
        bundles=bundles,
    ).start()

    print(
        json.dumps(
            {
                "ready": True,
                "registry": registry.endpoint,
                "gateway": gateway.endpoint,
                "keystore": str(keystore),
                "stations": [
                    {"station_id": s.config.station_id, "endpoint": s.endpoint, "admin": s.admin_endpoint}
                    for s in stations
                ],
            }
        ),
        flush=True,
    )

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    gateway.stop()
    for station in stations:
        station.stop()
    codeserver.stop()
    registry.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
