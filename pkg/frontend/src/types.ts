export interface Lease {
  granted_at: number;
  duration_ms: number;
  expiry: number;
}

export interface ServiceRecord {
  service_id: string;
  kind: "STATION" | "AGENT";
  endpoint: string;
  attributes: Record<string, string>;
  lease?: Lease;
}

export interface TravelEntry {
  station_id: string;
  arrival: number;
  departure?: number;
}

/** One line from GET /api/events: registry events carry `kind` + `record`,
 * station lifecycle events carry `event` + station/agent fields. */
export interface MeshEvent {
  source: "registry" | "station" | "gateway";
  kind?: string;
  record?: ServiceRecord;
  at?: number;
  event?: string;
  station_id?: string;
  agent_id?: string;
  dest?: string;
  reason?: string;
  diagnostic?: string;
  [extra: string]: unknown;
}

export interface StationRow {
  stationId: string;
  endpoint: string;
  admin: string;
  stale: boolean;
}

export interface AgentRow {
  agentId: string;
  behaviorId: string;
  /** station id from the latest registry record, or last station event */
  position: string;
  runState: string;
  owner: string;
}

export interface AgentStatusEntry {
  agent_id: string;
  behavior_id: string;
  run_state: string;
  service_kind: string;
  open_access: boolean;
  hops: number;
}

export interface StationStatus {
  station_id: string;
  endpoint: string;
  admin: string;
  registered: boolean;
  lease: Lease | null;
  agents: AgentStatusEntry[];
}

export interface SearchHit {
  path: string;
  weight: number;
  station_id: string;
}
