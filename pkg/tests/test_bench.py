import csv
import json
import subprocess
import sys
import time

import pytest

from agentmesh.bench import LocalMesh, soak, throughput, main as bench_main


def test_small_soak_clean_run(tmp_path):
    report = soak(
        stations=2,
        hops=6,
        dwell_ms=30,
        workdir=tmp_path / "soak",
        report_path=tmp_path / "report.json",
    )
    assert report["ok"], report["failure"]
    assert report["hops_completed"] == 6
    assert report["log_entries"] == 6
    assert report["losses"] == 0
    assert report["duplicates"] == 0
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk == report


def test_throughput_both_transports_small(tmp_path):
    mesh = LocalMesh(workdir=tmp_path / "tp").start(1)
    try:
        ref = mesh.publish_bundle("file-access/1")
        client = mesh.client()
        agent_id = client.launch("file-access/1", {}, mesh.stations[0].station_id, ref)
        session = client.attach(agent_id)
        rows = []
        for transport in ("control", "stream"):
            rows += throughput(256 * 1024, transport, trials=1, mesh=mesh, session=session)
        session.close()
    finally:
        mesh.stop()
    assert {(r["direction"], r["transport"]) for r in rows} == {
        ("read", "control"),
        ("write", "control"),
        ("read", "stream"),
        ("write", "stream"),
    }
    assert all(r["MB_per_s"] > 0 for r in rows)


def test_throughput_zero_byte_file(tmp_path):
    rows = throughput(0, "control", trials=1, workdir=tmp_path / "zero")
    assert all(r["MB_per_s"] == 0.0 for r in rows)
    assert {r["direction"] for r in rows} == {"read", "write"}


def test_throughput_csv_output(tmp_path):
    out = tmp_path / "rates.csv"
    throughput(1024, "stream", trials=2, csv_path=out, workdir=tmp_path / "csv")
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert set(rows[0]) == {"direction", "transport", "size", "MB_per_s"}
    assert all(r["transport"] == "stream" and r["size"] == "1024" for r in rows)


def test_bench_cli_throughput(tmp_path, capsys):
    code = bench_main(
        [
            "throughput",
            "--size",
            "2048",
            "--transport",
            "control",
            "--csv",
            str(tmp_path / "out.csv"),
            "--workdir",
            str(tmp_path / "w"),
        ]
    )
    assert code == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.strip().splitlines()]
    assert {l["direction"] for l in lines} == {"read", "write"}
    assert (tmp_path / "out.csv").exists()


def test_gateway_daemon_cli_ready_line(tmp_path):
    proc = subprocess.Popen(
        [
            sys.executable,
            "-m",
            "agentmesh.gateway",
            "--listen",
            "127.0.0.1:0",
            "--registry",
            "127.0.0.1:1",  # nothing there; the gateway still serves
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
    )
    try:
        line = proc.stdout.readline()
        ready = json.loads(line)
        assert ready["ready"] is True and ":" in ready["listen"]
    finally:
        proc.terminate()
        proc.wait(timeout=10)
