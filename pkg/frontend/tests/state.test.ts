import { describe, expect, it } from "vitest";

import { ConsoleStore } from "../src/state.js";
import type { MeshEvent, ServiceRecord } from "../src/types.js";

function stationRecord(id: string, endpoint = "127.0.0.1:7001"): ServiceRecord {
  return {
    service_id: id,
    kind: "STATION",
    endpoint,
    attributes: { admin: "127.0.0.1:8001", station_id: id },
  };
}

function agentRecord(id: string, station: string): ServiceRecord {
  return {
    service_id: id,
    kind: "AGENT",
    endpoint: "127.0.0.1:7001",
    attributes: { behavior_id: "file-access/1", station, owner: "ff".repeat(32) },
  };
}

describe("ConsoleStore", () => {
  it("builds topology rows from a registry snapshot", () => {
    const store = new ConsoleStore();
    store.applyRegistry([
      stationRecord("st1"),
      stationRecord("st0"),
      agentRecord("a".repeat(32), "st0"),
    ]);
    expect(store.stationRows().map((s) => s.stationId)).toEqual(["st0", "st1"]);
    expect(store.agentRows()).toHaveLength(1);
    expect(store.agentRows()[0].position).toBe("st0");
    expect(store.agentRows()[0].runState).toBe("ACTIVE");
  });

  it("agent position follows the latest registry record", () => {
    const store = new ConsoleStore();
    const id = "b".repeat(32);
    store.applyRegistry([stationRecord("st0"), stationRecord("st1"), agentRecord(id, "st0")]);
    store.applyEvent({
      source: "registry",
      kind: "UPDATED",
      record: agentRecord(id, "st1"),
      at: Date.now(),
    });
    expect(store.agentPosition(id)).toBe("st1");
  });

  it("marks a station stale on EXPIRED and fresh again on re-register", () => {
    const store = new ConsoleStore();
    store.applyRegistry([stationRecord("st0")]);
    store.applyEvent({
      source: "registry",
      kind: "EXPIRED",
      record: stationRecord("st0"),
      at: Date.now(),
    });
    expect(store.stationRows()[0].stale).toBe(true);
    store.applyEvent({
      source: "registry",
      kind: "REGISTERED",
      record: stationRecord("st0"),
      at: Date.now(),
    });
    expect(store.stationRows()[0].stale).toBe(false);
  });

  it("applies MOVE_COMMITTED synchronously, well inside the 1 s budget", () => {
    const store = new ConsoleStore();
    const id = "c".repeat(32);
    store.applyRegistry([stationRecord("st0"), stationRecord("st1"), agentRecord(id, "st0")]);
    let observedAt = 0;
    store.subscribe(() => {
      if (store.agentPosition(id) === "st1" && observedAt === 0) observedAt = Date.now();
    });
    const eventAt = Date.now();
    store.applyEvent({
      source: "station",
      event: "MOVE_COMMITTED",
      station_id: "st1",
      agent_id: id,
      at: eventAt,
    });
    expect(store.agentPosition(id)).toBe("st1");
    expect(observedAt - eventAt).toBeLessThan(1000);
  });

  it("keeps finished agents visible after they leave the registry", () => {
    const store = new ConsoleStore();
    const id = "d".repeat(32);
    store.applyRegistry([stationRecord("st0"), agentRecord(id, "st0")]);
    store.applyEvent({ source: "station", event: "FINISHED", agent_id: id, at: Date.now() });
    expect(store.agentRows()[0].runState).toBe("FINISHED");
    store.applyRegistry([stationRecord("st0")]); // registry no longer lists it
    expect(store.agentRows()).toHaveLength(1);
    expect(store.agentRows()[0].runState).toBe("FINISHED");
  });

  it("bounds the event feed", () => {
    const store = new ConsoleStore();
    for (let i = 0; i < 400; i++) {
      store.applyEvent({ source: "gateway", event: "KEEPALIVE", at: i } as MeshEvent);
    }
    expect(store.snapshot().feed.length).toBeLessThanOrEqual(300);
  });
});
