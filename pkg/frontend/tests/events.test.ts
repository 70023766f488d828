import { describe, expect, it, vi } from "vitest";

import { EventFeed, NdjsonParser } from "../src/events.js";
import type { MeshEvent } from "../src/types.js";

describe("NdjsonParser", () => {
  it("parses complete lines and carries partials across chunks", () => {
    const parser = new NdjsonParser();
    expect(parser.push('{"a":1}\n{"b"')).toEqual([{ a: 1 }]);
    expect(parser.push(':2}\n')).toEqual([{ b: 2 }]);
  });

  it("handles several lines in one chunk and skips blanks", () => {
    const parser = new NdjsonParser();
    expect(parser.push('{"a":1}\n\n{"b":2}\n')).toEqual([{ a: 1 }, { b: 2 }]);
  });

  it("drops torn garbage lines without failing", () => {
    const parser = new NdjsonParser();
    expect(parser.push('oops not json\n{"ok":true}\n')).toEqual([{ ok: true }]);
  });
});

function streamOf(lines: string[]): ReadableStream<Uint8Array> {
  const encoder = new TextEncoder();
  return new ReadableStream({
    start(controller) {
      for (const line of lines) controller.enqueue(encoder.encode(line));
      controller.close();
    },
  });
}

describe("EventFeed", () => {
  it("delivers events, filters keep-alives, reconnects, and reconciles", async () => {
    let connections = 0;
    const fetchMock = vi.fn(async () => {
      connections += 1;
      if (connections === 1) {
        return new Response(
          streamOf([
            '{"source":"gateway","event":"KEEPALIVE"}\n',
            '{"source":"station","event":"ARRIVED","agent_id":"x"}\n',
          ]),
        );
      }
      return new Response(streamOf(['{"source":"station","event":"FINISHED","agent_id":"x"}\n']));
    });
    vi.stubGlobal("fetch", fetchMock);

    const events: MeshEvent[] = [];
    let connects = 0;
    const feed = new EventFeed("http://gateway/api/events", {
      onEvent: (e) => events.push(e),
      onConnect: () => {
        connects += 1;
      },
    });
    feed.start();
    await vi.waitFor(() => {
      if (events.length < 2) throw new Error("still waiting");
    }, { timeout: 10_000 });
    feed.stop();
    vi.unstubAllGlobals();

    expect(connects).toBeGreaterThanOrEqual(2); // initial + at least one reconnect
    expect(events.map((e) => e.event)).toEqual(["ARRIVED", "FINISHED"]);
  });
});
