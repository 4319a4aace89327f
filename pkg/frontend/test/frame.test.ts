import { describe, expect, it } from "vitest";

import { FrameDecoder, ProtocolError, encodeFrame } from "../src/frame.js";

describe("frame golden bytes", () => {
  it("emits the exact pinned bytes for a STATS request", () => {
    const frame = encodeFrame(1, "STATS", {});
    const body = '{"id":1,"op":"STATS","params":{}}';
    const expected = Buffer.concat([
      Buffer.from([0x00, 0x00, 0x00, 0x21]), // 33-byte body
      Buffer.from(body, "utf8"),
    ]);
    expect(body.length).toBe(0x21);
    expect(frame.equals(expected)).toBe(true);
  });

  it("pins id/op/params key order and base64 payload placement", () => {
    const frame = encodeFrame(7, "IDX_GET", {
      index: { hi: 0, lo: 5 },
      key: "aw==",
    });
    const body =
      '{"id":7,"op":"IDX_GET","params":{"index":{"hi":0,"lo":5},"key":"aw=="}}';
    const expected = Buffer.concat([Buffer.from([0, 0, 0, body.length]), Buffer.from(body)]);
    expect(frame.toString("hex")).toBe(expected.toString("hex"));
  });

  it("round-trips responses split across arbitrary chunk boundaries", () => {
    const resp = Buffer.from(JSON.stringify({ id: 3, status: "ok", result: { x: 1 } }));
    const framed = Buffer.concat([Buffer.from([0, 0, 0, resp.length]), resp]);
    for (let cut = 1; cut < framed.length; cut++) {
      const decoder = new FrameDecoder();
      const first = decoder.feed(framed.subarray(0, cut));
      const rest = decoder.feed(framed.subarray(cut));
      const all = [...first, ...rest];
      expect(all).toHaveLength(1);
      expect(all[0].id).toBe(3);
      expect(all[0].status).toBe("ok");
    }
  });

  it("rejects oversized frames", () => {
    const decoder = new FrameDecoder();
    const huge = Buffer.from([0xff, 0xff, 0xff, 0xff]);
    expect(() => decoder.feed(huge)).toThrow(ProtocolError);
  });
});
