import type { AgentRow, MeshEvent, ServiceRecord, StationRow } from "./types.js";

export interface ConsoleState {
  stations: Map<string, StationRow>;
  agents: Map<string, AgentRow>;
  feed: MeshEvent[];
  connected: boolean;
  lastReconcile: number;
}

const FEED_LIMIT = 300;

/** All view state derives from gateway responses and events; views render
 * from here and mutations always go back through the gateway. */
export class ConsoleStore {
  private state: ConsoleState = {
    stations: new Map(),
    agents: new Map(),
    feed: [],
    connected: false,
    lastReconcile: 0,
  };
  private listeners: Array<(state: ConsoleState) => void> = [];

  snapshot(): ConsoleState {
    return this.state;
  }

  subscribe(listener: (state: ConsoleState) => void): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private notify(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  setConnected(connected: boolean): void {
    if (this.state.connected === connected) return;
    this.state.connected = connected;
    this.notify();
  }

  /** Full reconcile from GET /api/registry; refreshing the page or
   * reconnecting the stream loses nothing that a reconcile cannot rebuild. */
  applyRegistry(records: ServiceRecord[], at: number = Date.now()): void {
    const stations = new Map<string, StationRow>();
    const agents = new Map<string, AgentRow>();
    for (const record of records) {
      if (record.kind === "STATION") {
        stations.set(record.service_id, {
          stationId: record.service_id,
          endpoint: record.endpoint,
          admin: record.attributes.admin ?? "",
          stale: false,
        });
      } else {
        agents.set(record.service_id, {
          agentId: record.service_id,
          behaviorId: record.attributes.behavior_id ?? "?",
          position: record.attributes.station ?? "",
          runState: "ACTIVE",
          owner: record.attributes.owner ?? "",
        });
      }
    }
    // carry over agents the registry no longer lists (finished/private),
    // keeping their last known position and state
    for (const [agentId, row] of this.state.agents) {
      if (!agents.has(agentId)) agents.set(agentId, row);
    }
    this.state.stations = stations;
    this.state.agents = agents;
    this.state.lastReconcile = at;
    this.notify();
  }

  applyEvent(event: MeshEvent): void {
    this.state.feed = [event, ...this.state.feed].slice(0, FEED_LIMIT);
    if (event.source === "registry") {
      this.applyRegistryEvent(event);
    } else if (event.source === "station") {
      this.applyStationEvent(event);
    }
    this.notify();
  }

  private applyRegistryEvent(event: MeshEvent): void {
    const record = event.record;
    if (!record) return;
    if (record.kind === "STATION") {
      if (event.kind === "EXPIRED" || event.kind === "UNREGISTERED") {
        const row = this.state.stations.get(record.service_id);
        if (row) row.stale = true;
        return;
      }
      this.state.stations.set(record.service_id, {
        stationId: record.service_id,
        endpoint: record.endpoint,
        admin: record.attributes.admin ?? "",
        stale: false,
      });
      return;
    }
    // the displayed agent position is the station attribute of the
    // agent's latest registry record
    if (event.kind === "EXPIRED" || event.kind === "UNREGISTERED") return;
    const row = this.state.agents.get(record.service_id);
    this.state.agents.set(record.service_id, {
      agentId: record.service_id,
      behaviorId: record.attributes.behavior_id ?? row?.behaviorId ?? "?",
      position: record.attributes.station ?? row?.position ?? "",
      runState: row?.runState === "FINISHED" ? "FINISHED" : "ACTIVE",
      owner: record.attributes.owner ?? row?.owner ?? "",
    });
  }

  private applyStationEvent(event: MeshEvent): void {
    const agentId = event.agent_id;
    if (!agentId) return;
    const row = this.state.agents.get(agentId) ?? {
      agentId,
      behaviorId: "?",
      position: event.station_id ?? "",
      runState: "ACTIVE",
      owner: "",
    };
    switch (event.event) {
      case "MOVE_COMMITTED":
      case "ARRIVED":
      case "RESUMED":
        row.position = event.station_id ?? row.position;
        row.runState = "ACTIVE";
        break;
      case "FINISHED":
        row.runState = "FINISHED";
        break;
      case "FAILED":
        row.runState = "FAILED";
        break;
      default:
        break;
    }
    this.state.agents.set(agentId, row);
  }

  stationRows(): StationRow[] {
    return [...this.state.stations.values()].sort((a, b) =>
      a.stationId.localeCompare(b.stationId),
    );
  }

  agentRows(): AgentRow[] {
    return [...this.state.agents.values()].sort((a, b) => a.agentId.localeCompare(b.agentId));
  }

  agentPosition(agentId: string): string {
    return this.state.agents.get(agentId)?.position ?? "";
  }
}
