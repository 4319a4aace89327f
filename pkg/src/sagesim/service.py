"""TCP front-end: framed JSON requests from any number of clients,
serialized into the single-threaded simulation.

Connection handling is concurrent (one reader thread per connection); a
single executor thread owns the cluster and replies in completion order,
matching requests by id. A malformed frame yields
{id: null, status: "err", code: "BAD_FRAME"} and the connection stays open.
"""

from __future__ import annotations

import json
import queue
import socket
import struct
import threading

from .bootstrap import SageEnv
from .errors import BadFrame, SageError
from .wire import MAX_FRAME, Session, dispatch


def _encode_response(doc: dict) -> bytes:
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack(">I", len(body)) + body


class SageService:
    def __init__(self, env: SageEnv, host: str = "127.0.0.1", port: int = 0):
        self.env = env
        self._commands: queue.Queue = queue.Queue()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def serve_forever(self):
        executor = threading.Thread(target=self._executor, name="sage-exec", daemon=True)
        executor.start()
        self._threads.append(executor)
        try:
            while not self._stop.is_set():
                try:
                    conn, _addr = self._sock.accept()
                except OSError:
                    break
                t = threading.Thread(target=self._reader, args=(conn,), daemon=True)
                t.start()
                self._threads.append(t)
        finally:
            self._sock.close()

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="sage-accept", daemon=True)
        t.start()
        return t

    def shutdown(self):
        self._stop.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    # ------------------------------------------------------------------ wires

    def _reader(self, conn: socket.socket):
        session = Session()
        lock = threading.Lock()
        buffer = bytearray()
        try:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except OSError:
                    break
                if not chunk:
                    break
                buffer += chunk
                try:
                    frames = list(self._frames(buffer))
                except BadFrame:
                    self._reply(conn, lock, {"id": None, "status": "err",
                                             "code": "BAD_FRAME"})
                    buffer.clear()
                    continue
                for doc in frames:
                    if not self._well_formed(doc):
                        self._reply(conn, lock, {"id": doc.get("id") if isinstance(doc, dict) else None,
                                                 "status": "err", "code": "BAD_FRAME"})
                        continue
                    self._commands.put((conn, lock, session, doc))
        finally:
            try:
                conn.close()
            except OSError:
                pass

    @staticmethod
    def _well_formed(doc) -> bool:
        return (isinstance(doc, dict) and isinstance(doc.get("op"), str)
                and isinstance(doc.get("id"), int)
                and isinstance(doc.get("params", {}), dict))

    @staticmethod
    def _frames(buffer: bytearray):
        frames = []
        while True:
            if len(buffer) < 4:
                return frames
            (length,) = struct.unpack(">I", buffer[:4])
            if length > MAX_FRAME:
                raise BadFrame(length=length)
            if len(buffer) < 4 + length:
                return frames
            body = bytes(buffer[4:4 + length])
            del buffer[:4 + length]
            try:
                doc = json.loads(body.decode())
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise BadFrame(reason=str(exc))
            frames.append(doc)

    def _reply(self, conn, lock, doc: dict):
        data = _encode_response(doc)
        with lock:
            try:
                conn.sendall(data)
            except OSError:
                pass

    def _executor(self):
        while not self._stop.is_set():
            try:
                conn, lock, session, doc = self._commands.get(timeout=0.2)
            except queue.Empty:
                continue
            req_id = doc["id"]
            try:
                result = dispatch(self.env, session, doc["op"], doc.get("params", {}))
                self._reply(conn, lock, {"id": req_id, "status": "ok",
                                         "result": result})
            except SageError as err:
                self._reply(conn, lock, {"id": req_id, "status": "err",
                                         "code": err.code, "message": str(err)})
            except Exception as err:  # pragma: no cover - last-resort guard
                self._reply(conn, lock, {"id": req_id, "status": "err",
                                         "code": "INTERNAL", "message": repr(err)})
