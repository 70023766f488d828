/** End-to-end against a real mesh: every interaction goes through the
 * gateway's documented endpoints, exactly as the browser console does.
 * Skips when no python mesh can be spawned. */
import { spawn, spawnSync, type ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { GatewayApi } from "../src/api.js";
import { EventFeed } from "../src/events.js";
import { ConsoleStore } from "../src/state.js";
import type { MeshEvent } from "../src/types.js";

interface MeshInfo {
  registry: string;
  gateway: string;
  keystore: string;
  stations: Array<{ station_id: string; endpoint: string; admin: string }>;
}

const PYTHON = process.env.MESH_PYTHON ?? "python3";

function havePython(): boolean {
  const probe = spawnSync(PYTHON, ["-c", "import agentmesh"], { timeout: 30_000 });
  return probe.status === 0;
}

function spawnMesh(): Promise<{ proc: ChildProcess; info: MeshInfo }> {
  return new Promise((resolve, reject) => {
    const proc = spawn(PYTHON, [new URL("./helpers/spawn_mesh.py", import.meta.url).pathname], {
      stdio: ["ignore", "pipe", "inherit"],
    });
    let buffered = "";
    const onData = (chunk: Buffer) => {
      buffered += chunk.toString();
      const nl = buffered.indexOf("\n");
      if (nl >= 0) {
        proc.stdout!.off("data", onData);
        try {
          resolve({ proc, info: JSON.parse(buffered.slice(0, nl)) });
        } catch (err) {
          reject(err);
        }
      }
    };
    proc.stdout!.on("data", onData);
    proc.on("exit", (code) => reject(new Error(`mesh fixture exited with ${code}`)));
    setTimeout(() => reject(new Error("mesh fixture never became ready")), 60_000);
  });
}

function runCli(args: string[]): { status: number | null; stdout: string; stderr: string } {
  const result = spawnSync(PYTHON, ["-m", "agentmesh.client", ...args], {
    encoding: "utf-8",
    timeout: 60_000,
  });
  return { status: result.status, stdout: result.stdout, stderr: result.stderr };
}

async function waitFor<T>(probe: () => T | undefined, timeoutMs: number, what: string): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const value = probe();
    if (value !== undefined) return value;
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await new Promise((resolve) => setTimeout(resolve, 25));
  }
}

describe.runIf(havePython())("console against a live mesh", () => {
  let mesh: { proc: ChildProcess; info: MeshInfo };
  let api: GatewayApi;
  let store: ConsoleStore;
  let feed: EventFeed;

  beforeAll(async () => {
    mesh = await spawnMesh();
    const base = `http://${mesh.info.gateway}`;
    api = new GatewayApi(base);
    store = new ConsoleStore();
    feed = new EventFeed(`${base}/api/events`, {
      onEvent: (event) => store.applyEvent(event),
      onConnect: () => {
        void api.getRegistry().then(({ records }) => store.applyRegistry(records));
      },
      onStatus: (connected) => store.setConnected(connected),
    });
    feed.start();
    await waitFor(
      () => (store.stationRows().length === 2 ? true : undefined),
      20_000,
      "both stations in the store",
    );
  });

  afterAll(() => {
    feed?.stop();
    mesh?.proc.kill("SIGTERM");
  });

  it("reflects a CLI-triggered migration in the topology within 1 s of MOVE_COMMITTED", async () => {
    const st0 = mesh.info.stations[0];
    const st1 = mesh.info.stations[1];
    const { agent_id } = await api.launch({
      behavior_id: "file-access/1",
      dest: st1.station_id,
      params: { origin: st0.endpoint },
    });
    await waitFor(
      () => (store.agentPosition(agent_id) === st1.station_id ? true : undefined),
      15_000,
      "agent visible at its launch station",
    );

    // watch for the position flip, stamping the moment the view state changed
    let observedAt = 0;
    const unsubscribe = store.subscribe(() => {
      if (observedAt === 0 && store.agentPosition(agent_id) === st0.station_id) {
        observedAt = Date.now();
      }
    });

    // the migration is triggered from the CLI, not the console
    const recall = runCli([
      "recall",
      agent_id,
      "--registry",
      mesh.info.registry,
      "--keystore",
      mesh.info.keystore,
      "--json",
    ]);
    expect(recall.status).toBe(0);

    await waitFor(() => (observedAt > 0 ? true : undefined), 15_000, "position flip");
    unsubscribe();

    const commit = await waitFor(
      () =>
        store
          .snapshot()
          .feed.find(
            (e: MeshEvent) =>
              e.event === "MOVE_COMMITTED" && e.agent_id === agent_id && e.station_id === st0.station_id,
          ),
      5_000,
      "MOVE_COMMITTED in the feed",
    );
    expect(observedAt - (commit.at as number)).toBeLessThan(1000);
  });

  it("uploads then downloads 1 MiB byte-identically through both transports", async () => {
    const st0 = mesh.info.stations[0];
    const { agent_id } = await api.launch({ behavior_id: "file-access/1", dest: st0.station_id });
    const opened = await api.openSession(agent_id);
    expect(opened.session_id).toBeTruthy();
    const sid = opened.session_id!;

    const payload = new Uint8Array(1024 * 1024);
    for (let i = 0; i < payload.length; i++) payload[i] = (i * 7 + (i >> 9)) & 0xff;

    for (const transport of ["control", "stream"] as const) {
      const written = await api.writeFile(sid, `console-${transport}.bin`, payload, transport);
      expect(written.bytes).toBe(payload.length);
      const read = await api.readFile(sid, `console-${transport}.bin`, transport);
      expect(read.bytes).toBe(payload.length);
      expect(Buffer.from(read.data!).equals(Buffer.from(payload))).toBe(true);
      expect(read.elapsedMs).toBeGreaterThan(0);
    }
    await api.closeSession(sid);
  });

  it("drives every console mutation through documented gateway endpoints", async () => {
    const st0 = mesh.info.stations[0];
    const st1 = mesh.info.stations[1];

    // list + stat through an attach session command relay
    const { agent_id } = await api.launch({ behavior_id: "file-access/1", dest: st0.station_id });
    const { session_id } = await api.openSession(agent_id);
    await api.writeFile(session_id!, "seen.txt", new TextEncoder().encode("hello"), "control");
    const listing = await api.command(session_id!, { cmd: "list", path: "." });
    expect(listing.reply.entries.map((e: { name: string }) => e.name)).toContain("seen.txt");
    await api.closeSession(session_id!);

    // move through POST /api/agents/<id>/move
    const move = await api.move(agent_id, st1.station_id);
    expect(move.accepted).toBe(true);
    await waitFor(
      () => (store.agentPosition(agent_id) === st1.station_id ? true : undefined),
      15_000,
      "gateway-driven move",
    );

    // travel log through GET /api/agents/<id>/log
    const log = await api.getAgentLog(agent_id);
    expect(log.travel_log.map((entry) => entry.station_id)).toEqual([
      st0.station_id,
      st1.station_id,
    ]);

    // station status proxy
    const status = await api.getStationStatus(st1.station_id);
    expect(status.agents.some((a) => a.agent_id === agent_id)).toBe(true);
  });
});
