export { ClientSession, ServerError, ConnectionRefused } from "./client.js";
export type { EntityRef, LayoutTemplateEntry } from "./client.js";
export { encodeFrame, FrameDecoder, ProtocolError, MAX_FRAME } from "./frame.js";
export type { Request, Response } from "./frame.js";
