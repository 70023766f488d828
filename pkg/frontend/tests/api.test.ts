import { describe, expect, it, vi } from "vitest";

import {
  GatewayApi,
  GatewayError,
  base64ToBytes,
  bytesToBase64,
  rateMBps,
} from "../src/api.js";

describe("base64 helpers", () => {
  it("round-trips binary data including large buffers", () => {
    const data = new Uint8Array(512 * 1024);
    for (let i = 0; i < data.length; i++) data[i] = (i * 31) & 0xff;
    expect(base64ToBytes(bytesToBase64(data))).toEqual(data);
  });

  it("round-trips the empty buffer", () => {
    expect(base64ToBytes(bytesToBase64(new Uint8Array()))).toEqual(new Uint8Array());
  });
});

describe("rateMBps", () => {
  it("computes MB/s and is zero-safe", () => {
    expect(rateMBps(1024 * 1024, 1000)).toBeCloseTo(1.0);
    expect(rateMBps(0, 1000)).toBe(0);
    expect(rateMBps(1024, 0)).toBe(0);
  });
});

describe("GatewayApi", () => {
  it("surfaces gateway error codes", async () => {
    vi.stubGlobal(
      "fetch",
      vi.fn(async () =>
        new Response(JSON.stringify({ code: "ACCESS_DENIED", message: "no" }), { status: 403 }),
      ),
    );
    const api = new GatewayApi("http://gw");
    await expect(api.openSession("a".repeat(32))).rejects.toMatchObject({
      code: "ACCESS_DENIED",
      status: 403,
    });
    expect(() => {
      throw new GatewayError("X", "y", 500);
    }).toThrowError("y");
    vi.unstubAllGlobals();
  });

  it("encodes writes and decodes reads as base64 command relays", async () => {
    const calls: Array<{ url: string; body: any }> = [];
    vi.stubGlobal(
      "fetch",
      vi.fn(async (url: string, init?: RequestInit) => {
        const body = init?.body ? JSON.parse(init.body as string) : undefined;
        calls.push({ url: String(url), body });
        if (body?.command?.cmd === "read") {
          return new Response(
            JSON.stringify({
              ok: true,
              bytes: 3,
              elapsed_ms: 2.5,
              data_b64: bytesToBase64(new Uint8Array([1, 2, 3])),
            }),
          );
        }
        return new Response(JSON.stringify({ ok: true, bytes: 3, elapsed_ms: 1.5 }));
      }),
    );
    const api = new GatewayApi("http://gw");
    const written = await api.writeFile("sid", "x.bin", new Uint8Array([1, 2, 3]), "stream");
    expect(written.bytes).toBe(3);
    const read = await api.readFile("sid", "x.bin", "stream");
    expect([...read.data!]).toEqual([1, 2, 3]);
    expect(calls[0].url).toBe("http://gw/api/attach-sessions/sid");
    expect(calls[0].body.command).toEqual({ cmd: "write", path: "x.bin", transport: "stream" });
    expect(calls[0].body.data_b64).toBe(bytesToBase64(new Uint8Array([1, 2, 3])));
    vi.unstubAllGlobals();
  });
});
