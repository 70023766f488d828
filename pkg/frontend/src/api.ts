import type { ServiceRecord, StationStatus, TravelEntry } from "./types.js";

export function bytesToBase64(data: Uint8Array): string {
  let binary = "";
  const step = 0x8000;
  for (let i = 0; i < data.length; i += step) {
    binary += String.fromCharCode(...data.subarray(i, i + step));
  }
  return btoa(binary);
}

export function base64ToBytes(b64: string): Uint8Array {
  const binary = atob(b64);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}

export class GatewayError extends Error {
  constructor(public code: string, message: string, public status: number) {
    super(message);
  }
}

async function request<T>(method: string, url: string, body?: unknown): Promise<T> {
  const resp = await fetch(url, {
    method,
    headers: body === undefined ? undefined : { "Content-Type": "application/json" },
    body: body === undefined ? undefined : JSON.stringify(body),
  });
  const text = await resp.text();
  let parsed: any = {};
  try {
    parsed = text ? JSON.parse(text) : {};
  } catch {
    parsed = {};
  }
  if (!resp.ok) {
    throw new GatewayError(parsed.code ?? `HTTP_${resp.status}`, parsed.message ?? text, resp.status);
  }
  return parsed as T;
}

export interface TransferResult {
  bytes: number;
  elapsedMs: number;
  data?: Uint8Array;
}

/** Typed client for the gateway's documented REST surface. */
export class GatewayApi {
  constructor(private base: string = "") {}

  getRegistry(): Promise<{ records: ServiceRecord[] }> {
    return request("GET", `${this.base}/api/registry`);
  }

  getBundles(): Promise<{ behaviors: string[] }> {
    return request("GET", `${this.base}/api/bundles`);
  }

  getStationStatus(stationId: string): Promise<StationStatus> {
    return request("GET", `${this.base}/api/stations/${stationId}/status`);
  }

  getAgentLog(agentId: string): Promise<{ agent_id: string; travel_log: TravelEntry[] }> {
    return request("GET", `${this.base}/api/agents/${agentId}/log`);
  }

  launch(body: {
    behavior_id: string;
    dest: string;
    params?: Record<string, unknown>;
    service_kind?: string;
    open_access?: boolean;
  }): Promise<{ agent_id: string }> {
    return request("POST", `${this.base}/api/agents`, body);
  }

  move(agentId: string, dest: string): Promise<{ accepted: boolean }> {
    return request("POST", `${this.base}/api/agents/${agentId}/move`, { dest });
  }

  trust(stationId: string, cert: Record<string, unknown>): Promise<{ accepted: boolean }> {
    return request("POST", `${this.base}/api/stations/${stationId}/trust`, { cert });
  }

  openSession(
    agentId: string,
  ): Promise<{ session_id?: string; finished?: boolean; result_b64?: string; failed?: boolean }> {
    return request("POST", `${this.base}/api/agents/${agentId}/attach-session`);
  }

  command(sessionId: string, command: Record<string, unknown>, dataB64?: string): Promise<any> {
    return request("POST", `${this.base}/api/attach-sessions/${sessionId}`, {
      command,
      data_b64: dataB64,
    });
  }

  closeSession(sessionId: string): Promise<{ closed: boolean }> {
    return request("DELETE", `${this.base}/api/attach-sessions/${sessionId}`);
  }

  async readFile(sessionId: string, path: string, transport: string): Promise<TransferResult> {
    const reply = await this.command(sessionId, { cmd: "read", path, transport });
    return {
      bytes: reply.bytes,
      elapsedMs: reply.elapsed_ms,
      data: base64ToBytes(reply.data_b64 ?? ""),
    };
  }

  async writeFile(
    sessionId: string,
    path: string,
    data: Uint8Array,
    transport: string,
  ): Promise<TransferResult> {
    const reply = await this.command(
      sessionId,
      { cmd: "write", path, transport },
      bytesToBase64(data),
    );
    return { bytes: reply.bytes, elapsedMs: reply.elapsed_ms };
  }
}

export function rateMBps(bytes: number, elapsedMs: number): number {
  if (elapsedMs <= 0 || bytes <= 0) return 0;
  return bytes / (1024 * 1024) / (elapsedMs / 1000);
}
