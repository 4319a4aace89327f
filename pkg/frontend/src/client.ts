/**
 * ClientSession: one TCP connection to the storage service, synchronous-feel
 * calls over the framed JSON protocol. Request ids are unique per session
 * and every response is matched to its pending request; the server replies
 * once an operation is EXECUTED (STABLE for mutations), so a resolved call
 * means the effect is durable.
 */

import * as net from "node:net";
import { FrameDecoder, ProtocolError, Response, encodeFrame } from "./frame.js";

export class ServerError extends Error {
  constructor(public code: string, message?: string) {
    super(message ? `${code}: ${message}` : code);
  }
}

export class ConnectionRefused extends Error {}

export interface EntityRef {
  hi: number;
  lo: number;
  kind?: string;
}

export interface LayoutTemplateEntry {
  tier: number;
  redundancy:
    | { kind: "replication"; n: number }
    | { kind: "striped"; n: number; k: number };
  unit_size?: number;
  blocks?: number | "rest";
}

interface Pending {
  resolve: (value: unknown) => void;
  reject: (err: Error) => void;
}

export class ClientSession {
  private nextId = 1;
  private pending = new Map<number, Pending>();
  private decoder = new FrameDecoder();
  private closed = false;

  private constructor(private sock: net.Socket) {
    sock.on("data", (chunk) => this.onData(chunk));
    sock.on("error", (err) => this.failAll(err));
    sock.on("close", () => {
      if (!this.closed) this.failAll(new ProtocolError("connection closed"));
    });
  }

  static connect(host: string, port: number): Promise<ClientSession> {
    return new Promise((resolve, reject) => {
      const sock = net.createConnection({ host, port });
      sock.once("connect", () => {
        sock.removeAllListeners("error");
        resolve(new ClientSession(sock));
      });
      sock.once("error", (err) => reject(new ConnectionRefused(String(err))));
    });
  }

  private onData(chunk: Buffer) {
    let responses: Response[];
    try {
      responses = this.decoder.feed(chunk);
    } catch (err) {
      this.failAll(err as Error);
      return;
    }
    for (const resp of responses) {
      if (resp.id === null) continue; // unsolicited BAD_FRAME notice
      const entry = this.pending.get(resp.id);
      if (entry === undefined) {
        this.failAll(new ProtocolError(`response for unknown request id ${resp.id}`));
        return;
      }
      this.pending.delete(resp.id);
      if (resp.status === "ok") {
        entry.resolve(resp.result ?? {});
      } else {
        entry.reject(new ServerError(resp.code ?? "UNKNOWN", resp.message));
      }
    }
  }

  private failAll(err: Error) {
    for (const [, entry] of this.pending) entry.reject(err);
    this.pending.clear();
  }

  call(op: string, params: Record<string, unknown> = {}): Promise<unknown> {
    if (this.closed) return Promise.reject(new ProtocolError("session closed"));
    const id = this.nextId++;
    const frame = encodeFrame(id, op, params);
    return new Promise((resolve, reject) => {
      this.pending.set(id, { resolve, reject });
      this.sock.write(frame);
    });
  }

  close() {
    this.closed = true;
    this.sock.end();
    this.sock.destroy();
  }

  // ---- typed helpers, one-to-one with the wire ops ----------------------

  async objCreate(
    blockSize: number,
    nblocks: number,
    layout: LayoutTemplateEntry[],
    attrs?: Record<string, string>,
  ): Promise<EntityRef> {
    const result = (await this.call("CREATE_OBJ", {
      block_size: blockSize,
      nblocks,
      layout,
      ...(attrs ? { attrs } : {}),
    })) as { id: EntityRef };
    return result.id;
  }

  async objWrite(obj: EntityRef, offsetBlock: number, data: Buffer): Promise<void> {
    await this.call("WRITE", {
      obj,
      offset_block: offsetBlock,
      data: data.toString("base64"),
    });
  }

  async objRead(obj: EntityRef, offsetBlock: number, nblocks: number): Promise<Buffer> {
    const result = (await this.call("READ", {
      obj,
      offset_block: offsetBlock,
      nblocks,
    })) as { data: string };
    return Buffer.from(result.data, "base64");
  }

  async objFree(obj: EntityRef): Promise<void> {
    await this.call("FREE", { obj });
  }

  async idxCreate(): Promise<EntityRef> {
    const result = (await this.call("CREATE_IDX", {})) as { id: EntityRef };
    return result.id;
  }

  async idxPut(index: EntityRef, key: Buffer, value: Buffer): Promise<void> {
    await this.call("IDX_PUT", {
      index,
      key: key.toString("base64"),
      value: value.toString("base64"),
    });
  }

  async idxGet(index: EntityRef, key: Buffer): Promise<Buffer> {
    const result = (await this.call("IDX_GET", {
      index,
      key: key.toString("base64"),
    })) as { value: string };
    return Buffer.from(result.value, "base64");
  }

  async idxDel(index: EntityRef, key: Buffer): Promise<void> {
    await this.call("IDX_DEL", { index, key: key.toString("base64") });
  }

  async idxNext(index: EntityRef, after: Buffer, n: number): Promise<Array<[Buffer, Buffer]>> {
    const result = (await this.call("IDX_NEXT", {
      index,
      key: after.toString("base64"),
      n,
    })) as { pairs: Array<[string, string]> };
    return result.pairs.map(([k, v]) => [
      Buffer.from(k, "base64"),
      Buffer.from(v, "base64"),
    ]);
  }

  async funcInvoke(
    target: EntityRef,
    name: string,
    args?: Record<string, unknown>,
  ): Promise<{ result: unknown; bytes_shipped: number; bytes_if_client_side: number }> {
    return (await this.call("FUNC_INVOKE", {
      target,
      name,
      ...(args ? { args } : {}),
    })) as { result: unknown; bytes_shipped: number; bytes_if_client_side: number };
  }

  async stats(): Promise<Record<string, unknown>> {
    return (await this.call("STATS", {})) as Record<string, unknown>;
  }

  async haStatus(): Promise<Record<string, unknown>> {
    return (await this.call("HA_STATUS", {})) as Record<string, unknown>;
  }
}
