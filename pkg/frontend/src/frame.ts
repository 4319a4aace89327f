/**
 * Wire framing: 4-byte big-endian length prefix, then UTF-8 JSON.
 * Requests are {id, op, params} with exactly that key order so frames are
 * byte-reproducible; binary payloads travel base64-encoded inside params.
 */

export interface Request {
  id: number;
  op: string;
  params: Record<string, unknown>;
}

export interface Response {
  id: number | null;
  status: "ok" | "err";
  code?: string;
  message?: string;
  result?: unknown;
}

export const MAX_FRAME = 256 * 1024 * 1024;

export class ProtocolError extends Error {}

export function encodeFrame(id: number, op: string, params: Record<string, unknown>): Buffer {
  const body = Buffer.from(JSON.stringify({ id, op, params }), "utf8");
  const header = Buffer.alloc(4);
  header.writeUInt32BE(body.length, 0);
  return Buffer.concat([header, body]);
}

/** Incremental decoder: feed chunks, pull complete responses. */
export class FrameDecoder {
  private buffer: Buffer = Buffer.alloc(0);

  feed(chunk: Buffer): Response[] {
    this.buffer = Buffer.concat([this.buffer, chunk]);
    const out: Response[] = [];
    for (;;) {
      if (this.buffer.length < 4) return out;
      const length = this.buffer.readUInt32BE(0);
      if (length > MAX_FRAME) {
        throw new ProtocolError(`frame length ${length} exceeds limit`);
      }
      if (this.buffer.length < 4 + length) return out;
      const body = this.buffer.subarray(4, 4 + length);
      this.buffer = this.buffer.subarray(4 + length);
      let doc: unknown;
      try {
        doc = JSON.parse(body.toString("utf8"));
      } catch (err) {
        throw new ProtocolError(`undecodable frame: ${err}`);
      }
      if (typeof doc !== "object" || doc === null || !("status" in doc)) {
        throw new ProtocolError("response frame is not a status object");
      }
      out.push(doc as Response);
    }
  }
}
