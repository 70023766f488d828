import base64
import http.client
import json
import time

import pytest

from agentmesh.client import main as mesh_main, http_json
from agentmesh.errors import MeshError
from agentmesh.gateway import Gateway
from agentmesh.security import generate_keypair, issue_certificate, save_keystore

from conftest import wait_for


def run_cli(capsys, *argv):
    code = mesh_main(list(argv))
    out = capsys.readouterr().out.strip()
    return code, out


# --- CLI ------------------------------------------------------------------


def test_keygen_writes_keystore_and_cert(tmp_path, capsys):
    code, out = run_cli(
        capsys, "keygen", "--subject", "alice", "--out", str(tmp_path / "keys"), "--json"
    )
    assert code == 0
    info = json.loads(out)
    assert len(info["fingerprint"]) == 64
    key = json.loads((tmp_path / "keys" / "key.json").read_text())
    cert = json.loads((tmp_path / "keys" / "cert.json").read_text())
    assert key["subject"] == "alice"
    assert cert["fingerprint"] == info["fingerprint"]


def test_keygen_seed_is_deterministic(tmp_path, capsys):
    seed = "ab" * 32
    _, out1 = run_cli(
        capsys, "keygen", "--subject", "a", "--out", str(tmp_path / "k1"), "--seed", seed, "--json"
    )
    _, out2 = run_cli(
        capsys, "keygen", "--subject", "a", "--out", str(tmp_path / "k2"), "--seed", seed, "--json"
    )
    assert json.loads(out1)["fingerprint"] == json.loads(out2)["fingerprint"]


def test_publish_and_trust_cli(tmp_path, capsys, mesh):
    station = mesh.add_station("st0")
    run_cli(capsys, "keygen", "--subject", "cli-owner", "--out", str(tmp_path / "keys"))
    code, out = run_cli(
        capsys,
        "publish",
        "--store",
        str(mesh.store.root),
        "--base-url",
        mesh.codeserver.base_url,
        "--behavior",
        "file-access/1",
        "--keystore",
        str(tmp_path / "keys" / "key.json"),
        "--out",
        str(tmp_path / "ref.json"),
    )
    assert code == 0
    ref = json.loads(out)
    assert ref["url"].endswith(ref["sha256"])

    code, out = run_cli(
        capsys,
        "trust",
        "--cert",
        str(tmp_path / "keys" / "cert.json"),
        "--station-admin",
        station.admin_endpoint,
        "--json",
    )
    assert code == 0
    assert json.loads(out)["accepted"] is True

    # the freshly trusted owner can now launch through the CLI
    code, out = run_cli(
        capsys,
        "launch",
        "--registry",
        mesh.registry.endpoint,
        "--keystore",
        str(tmp_path / "keys" / "key.json"),
        "--behavior",
        "file-access/1",
        "--dest",
        "st0",
        "--bundle",
        str(tmp_path / "ref.json"),
        "--json",
    )
    assert code == 0
    agent_id = json.loads(out)["agent_id"]
    assert agent_id in station.residents


def test_trust_local_store_mode(tmp_path, capsys):
    run_cli(capsys, "keygen", "--subject", "x", "--out", str(tmp_path / "keys"))
    store_path = tmp_path / "trust.txt"
    code, out = run_cli(
        capsys,
        "trust",
        "--cert",
        str(tmp_path / "keys" / "cert.json"),
        "--store",
        str(store_path),
        "--json",
    )
    assert code == 0
    fp = json.loads(out)["fingerprint"]
    assert store_path.read_text() == fp + "\n"


def test_discover_launch_attach_log_recall_cli(tmp_path, capsys, mesh):
    st0 = mesh.add_station("st0")
    st1 = mesh.add_station("st1")
    ref = mesh.publish("file-access/1")
    (tmp_path / "ref.json").write_text(json.dumps(ref.to_json()))
    registry = mesh.registry.endpoint
    keystore = str(mesh.keystore_path)

    code, out = run_cli(capsys, "discover", "--registry", registry, "--kind", "station", "--json")
    assert code == 0
    ids = {r["service_id"] for r in json.loads(out)["records"]}
    assert ids == {"st0", "st1"}

    code, out = run_cli(
        capsys,
        "launch",
        "--registry",
        registry,
        "--keystore",
        keystore,
        "--behavior",
        "file-access/1",
        "--dest",
        "st1",
        "--bundle",
        str(tmp_path / "ref.json"),
        "--params",
        json.dumps({"origin": st0.endpoint}),
        "--json",
    )
    assert code == 0
    agent_id = json.loads(out)["agent_id"]

    code, out = run_cli(
        capsys,
        "attach",
        agent_id,
        "--registry",
        registry,
        "--keystore",
        keystore,
        "--cmd",
        json.dumps({"cmd": "ping"}),
        "--json",
    )
    assert code == 0
    assert json.loads(out)["reply"]["ok"] is True

    code, out = run_cli(
        capsys, "log", agent_id, "--registry", registry, "--keystore", keystore, "--json"
    )
    assert code == 0
    log = json.loads(out)["travel_log"]
    assert [e["station_id"] for e in log] == ["st1"]

    code, out = run_cli(
        capsys, "recall", agent_id, "--registry", registry, "--keystore", keystore, "--json"
    )
    assert code == 0
    assert json.loads(out)["finished"] is True
    assert st0.residents[agent_id].run_state == "FINISHED"

    # attach to the finished agent prints the stored result
    code, out = run_cli(
        capsys,
        "attach",
        agent_id,
        "--registry",
        registry,
        "--keystore",
        keystore,
        "--json",
    )
    assert code == 0
    assert json.loads(out) == {"finished": True, "result": {"done": True}}


def test_log_unknown_agent_errors(capsys, mesh):
    mesh.add_station("st0")
    code = mesh_main(["log", "f" * 32, "--registry", mesh.registry.endpoint])
    assert code == 1
    err = capsys.readouterr().err
    assert "NOT_FOUND" in err


# --- gateway ------------------------------------------------------------------


@pytest.fixture
def gateway(mesh, tmp_path):
    mesh.add_station("st0")
    mesh.add_station("st1")
    bundles = {
        "file-access/1": mesh.publish("file-access/1"),
        "connectivity-test/1": mesh.publish("connectivity-test/1"),
    }
    static = tmp_path / "static"
    static.mkdir()
    (static / "index.html").write_text("<html><body>console</body></html>")
    gw = Gateway(
        listen="127.0.0.1:0",
        registry=mesh.registry.endpoint,
        keystore_path=str(mesh.keystore_path),
        bundles=bundles,
        static_dir=str(static),
    ).start()
    yield gw
    gw.stop()


def api(gw, method, path, body=None):
    return http_json(method, f"http://{gw.endpoint}{path}", body)


def test_gateway_registry_mirrors_lookup(mesh, gateway):
    records = api(gateway, "GET", "/api/registry")["records"]
    direct = {r.service_id for r in mesh.client().discover()}
    assert {r["service_id"] for r in records} == direct


def test_gateway_station_status_and_agent_log(mesh, gateway):
    status = api(gateway, "GET", "/api/stations/st0/status")
    assert status["station_id"] == "st0"
    agent_id = api(
        gateway, "POST", "/api/agents", {"behavior_id": "file-access/1", "dest": "st0"}
    )["agent_id"]
    log = api(gateway, "GET", f"/api/agents/{agent_id}/log")
    assert [e["station_id"] for e in log["travel_log"]] == ["st0"]


def test_gateway_launch_move_and_event_stream(mesh, gateway):
    host, port = gateway.endpoint.rsplit(":", 1)
    stream = http.client.HTTPConnection(host, int(port), timeout=15)
    stream.request("GET", "/api/events")
    resp = stream.getresponse()
    time.sleep(0.3)  # let the gateway's station feeds settle

    agent_id = api(
        gateway, "POST", "/api/agents", {"behavior_id": "file-access/1", "dest": "st0"}
    )["agent_id"]
    st1 = mesh.stations["st1"]
    reply = api(gateway, "POST", f"/api/agents/{agent_id}/move", {"dest": "st1"})
    assert reply["accepted"] is True
    wait_for(lambda: agent_id in st1.residents, message="agent moved via gateway")

    saw_commit = False
    deadline = time.monotonic() + 8
    while time.monotonic() < deadline and not saw_commit:
        line = resp.readline()
        if not line:
            break
        event = json.loads(line)
        if event.get("event") == "MOVE_COMMITTED" and event.get("agent_id") == agent_id:
            saw_commit = True
    stream.close()
    assert saw_commit


def test_gateway_attach_session_relay_and_delete(mesh, gateway):
    agent_id = api(
        gateway, "POST", "/api/agents", {"behavior_id": "file-access/1", "dest": "st0"}
    )["agent_id"]
    sid = api(gateway, "POST", f"/api/agents/{agent_id}/attach-session")["session_id"]

    payload = b"through the gateway"
    reply = api(
        gateway,
        "POST",
        f"/api/attach-sessions/{sid}",
        {
            "command": {"cmd": "write", "path": "gw.bin", "transport": "control"},
            "data_b64": base64.b64encode(payload).decode(),
        },
    )
    assert reply["bytes"] == len(payload)
    reply = api(
        gateway,
        "POST",
        f"/api/attach-sessions/{sid}",
        {"command": {"cmd": "read", "path": "gw.bin", "transport": "stream"}},
    )
    assert base64.b64decode(reply["data_b64"]) == payload
    assert reply["elapsed_ms"] >= 0

    assert api(gateway, "DELETE", f"/api/attach-sessions/{sid}")["closed"] is True
    with pytest.raises(MeshError) as err:
        api(gateway, "POST", f"/api/attach-sessions/{sid}", {"command": {"cmd": "ping"}})
    assert err.value.code == "NOT_FOUND"


def test_gateway_attach_with_wrong_key_is_403(mesh, tmp_path):
    mesh.add_station("st0")
    ref = mesh.publish("file-access/1")
    agent_id = mesh.client().launch("file-access/1", {}, "st0", ref)

    wrong = generate_keypair()
    save_keystore(tmp_path / "wrong.json", "impostor", wrong)
    gw = Gateway(
        listen="127.0.0.1:0",
        registry=mesh.registry.endpoint,
        keystore_path=str(tmp_path / "wrong.json"),
    ).start()
    try:
        with pytest.raises(MeshError) as err:
            http_json("POST", f"http://{gw.endpoint}/api/agents/{agent_id}/attach-session")
        assert err.value.code == "ACCESS_DENIED"
    finally:
        gw.stop()


def test_gateway_launch_without_bundle_is_400(gateway):
    with pytest.raises(MeshError) as err:
        api(gateway, "POST", "/api/agents", {"behavior_id": "search/1", "dest": "st0"})
    assert err.value.code == "NO_BUNDLE"


def test_gateway_serves_static_console(gateway):
    import urllib.request

    with urllib.request.urlopen(f"http://{gateway.endpoint}/", timeout=5) as resp:
        body = resp.read().decode()
    assert "console" in body
