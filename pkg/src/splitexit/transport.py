"""Transports for the offload protocol.

Both transports expose the same client surface:
  offload(msg, t_arrival_ms) -> (ResultMessage, server_compute_ms)
  cancel(request_id, t_arrival_ms)
  accounted_ms(request_id) -> float
  probe() -> bool

The in-process transport calls the server core directly and adjudicates
cancellation in virtual time.  The TCP transport moves real frames over a
socket; wall-clock delivery order decides cancellation there, so tests that
need a cancel to land first use the server's admission delay.
"""

from __future__ import annotations

import queue
import socket
import socketserver
import struct
import threading
import time

from .engine import ServerCore
from .errors import FrameError
from .protocol import (
    CANCEL_FRAME_BYTES,
    HEADER_BYTES,
    TYPE_CANCEL,
    TYPE_OFFLOAD,
    TYPE_PROBE,
    TYPE_PROBE_ACK,
    TYPE_RESULT,
    Frame,
    ResultMessage,
    decode,
    decode_offload,
    decode_result,
    encode_cancel,
    encode_offload,
    encode_probe,
    encode_probe_ack,
    encode_result,
)


class InProcessTransport:
    """Direct calls into a ServerCore with virtual-time bookkeeping."""

    def __init__(self, server: ServerCore):
        self.server = server
        self._starts: dict[int, float] = {}
        self._compute: dict[int, float] = {}
        self.reachable = True
        self.bytes_received = 0

    def offload(self, msg, t_arrival_ms: float) -> tuple[ResultMessage, float]:
        self.bytes_received += len(encode_offload(msg))
        reply, compute_ms = self.server.handle_offload(msg)
        self._starts[msg.request_id] = t_arrival_ms
        self._compute[msg.request_id] = compute_ms
        self.server.set_account(msg.request_id, compute_ms)
        return reply, compute_ms

    def cancel(self, request_id: int, t_arrival_ms: float) -> None:
        self.bytes_received += CANCEL_FRAME_BYTES
        self.server.cancel(request_id)
        if request_id not in self._starts:
            return  # unknown request: ignored
        start = self._starts[request_id]
        full = self._compute[request_id]
        accounted = min(full, max(0.0, t_arrival_ms - start))
        self.server.set_account(request_id, accounted)

    def accounted_ms(self, request_id: int) -> float:
        return self.server.accounted_ms.get(request_id, 0.0)

    def probe(self) -> bool:
        return self.reachable


def read_frame(sock: socket.socket) -> Frame | None:
    head = _read_exact(sock, HEADER_BYTES)
    if head is None:
        return None
    (payload_len,) = struct.unpack_from(">I", head, HEADER_BYTES - 4)
    body = _read_exact(sock, payload_len) if payload_len else b""
    if payload_len and body is None:
        raise FrameError("connection closed mid-frame")
    frame, _ = decode(head + (body or b""))
    return frame


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else buf  # caller validates
        buf += chunk
    return buf


class _ConnectionHandler(socketserver.BaseRequestHandler):
    """Reader ingests frames as they arrive; offload work runs on a
    per-connection worker so a CANCEL right behind its OFFLOAD is seen
    before processing starts."""

    def handle(self):
        server: TcpServer = self.server.owner
        sock = self.request
        work: "queue.Queue" = queue.Queue()
        write_lock = threading.Lock()

        def process_loop():
            while True:
                frame = work.get()
                if frame is None:
                    return
                if server.admission_delay_s > 0:
                    time.sleep(server.admission_delay_s)
                if frame.request_id in server.core.cancelled:
                    # Cancel landed before work started: no compute, no reply.
                    server.core.set_account(frame.request_id, 0.0)
                    continue
                try:
                    msg = decode_offload(frame)
                    reply, compute_ms = server.core.handle_offload(msg)
                except FrameError:
                    return
                server.core.set_account(frame.request_id, compute_ms)
                try:
                    with write_lock:
                        sock.sendall(encode_result(reply))
                except OSError:
                    return

        worker = threading.Thread(target=process_loop, daemon=True)
        worker.start()
        try:
            while True:
                frame = read_frame(sock)
                if frame is None:
                    return
                if frame.type == TYPE_PROBE:
                    with write_lock:
                        sock.sendall(encode_probe_ack(frame.request_id))
                elif frame.type == TYPE_CANCEL:
                    server.core.cancel(frame.request_id)
                elif frame.type == TYPE_OFFLOAD:
                    work.put(frame)
                else:
                    raise FrameError(f"unexpected frame type {frame.type}")
        except FrameError:
            # Malformed frame: reset the connection.
            return
        except (ConnectionResetError, BrokenPipeError, OSError):
            return
        finally:
            work.put(None)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class TcpServer:
    """Long-running TCP endpoint wrapping a ServerCore."""

    def __init__(self, core: ServerCore, host: str = "127.0.0.1", port: int = 0,
                 admission_delay_s: float = 0.0):
        self.core = core
        self.admission_delay_s = admission_delay_s
        self._server = _ThreadingServer((host, port), _ConnectionHandler)
        self._server.owner = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address

    def start(self) -> "TcpServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class TcpClientTransport:
    """Blocking request/reply over a persistent TCP connection."""

    def __init__(self, host: str, port: int, wall_timeout_s: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=wall_timeout_s)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._accounted: dict[int, float] = {}

    def offload(self, msg, t_arrival_ms: float) -> tuple[ResultMessage, float]:
        self.sock.sendall(encode_offload(msg))
        while True:
            frame = read_frame(self.sock)
            if frame is None:
                raise FrameError("server closed the connection")
            if frame.type == TYPE_PROBE_ACK:
                continue
            if frame.type != TYPE_RESULT:
                raise FrameError(f"unexpected reply type {frame.type}")
            if frame.request_id != msg.request_id:
                continue  # stale reply for a cancelled request: drop
            reply = decode_result(frame)
            if reply.server_compute_us is None:
                raise FrameError("server did not piggyback its compute time")
            compute_ms = reply.server_compute_us / 1000.0
            self._accounted[msg.request_id] = compute_ms
            return reply, compute_ms

    def cancel(self, request_id: int, t_arrival_ms: float) -> None:
        self.sock.sendall(encode_cancel(request_id))

    def accounted_ms(self, request_id: int) -> float:
        return self._accounted.get(request_id, 0.0)

    def probe(self, request_id: int = 0) -> bool:
        try:
            self.sock.sendall(encode_probe(request_id))
            frame = read_frame(self.sock)
            return frame is not None and frame.type == TYPE_PROBE_ACK
        except OSError:
            return False

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
