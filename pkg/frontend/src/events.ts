import type { MeshEvent } from "./types.js";

/** Splits a byte/text stream into complete NDJSON lines, carrying any
 * partial trailing line between chunks. */
export class NdjsonParser {
  private partial = "";

  push(chunk: string): MeshEvent[] {
    const events: MeshEvent[] = [];
    this.partial += chunk;
    for (;;) {
      const nl = this.partial.indexOf("\n");
      if (nl < 0) break;
      const line = this.partial.slice(0, nl).trim();
      this.partial = this.partial.slice(nl + 1);
      if (!line) continue;
      try {
        events.push(JSON.parse(line));
      } catch {
        // a torn line at reconnect time is dropped, not fatal
      }
    }
    return events;
  }
}

export interface FeedHandlers {
  onEvent: (event: MeshEvent) => void;
  /** fired on every (re)connect so the app can reconcile missed state */
  onConnect: () => void;
  onStatus?: (connected: boolean) => void;
}

/** Reads the gateway's /api/events stream and reconnects forever with
 * exponential backoff. Keep-alives are swallowed here. */
export class EventFeed {
  private stopped = false;
  private controller: AbortController | null = null;

  constructor(private url: string, private handlers: FeedHandlers) {}

  start(): void {
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }

  private async loop(): Promise<void> {
    let backoffMs = 1000;
    while (!this.stopped) {
      this.controller = new AbortController();
      try {
        const resp = await fetch(this.url, { signal: this.controller.signal });
        if (!resp.ok || !resp.body) throw new Error(`stream ${resp.status}`);
        this.handlers.onStatus?.(true);
        this.handlers.onConnect();
        backoffMs = 1000;
        const reader = resp.body.getReader();
        const decoder = new TextDecoder();
        const parser = new NdjsonParser();
        for (;;) {
          const { done, value } = await reader.read();
          if (done) break;
          for (const event of parser.push(decoder.decode(value, { stream: true }))) {
            if (event.event === "KEEPALIVE") continue;
            this.handlers.onEvent(event);
          }
        }
      } catch {
        // fall through to reconnect
      }
      this.handlers.onStatus?.(false);
      if (this.stopped) return;
      await new Promise((resolve) => setTimeout(resolve, backoffMs));
      backoffMs = Math.min(backoffMs * 2, 15_000);
    }
  }
}
