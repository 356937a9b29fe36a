"""Unix-socket server exposing the open volumes of one device instance."""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading
from pathlib import Path

from .errors import NotOpen
from .header import DeviceInstance, close_device
from .layout import BLOCK_SIZE
from .protocol import (
    HEADER_LEN,
    OP_CLOSE,
    OP_READ,
    OP_WRITE,
    OPCODES,
    STATUS_OK,
    STATUS_PROTO,
    decode_response,
    encode_request,
    encode_response,
    frame_length,
    handle_frame,
)

log = logging.getLogger(__name__)

DEFAULT_FRAME_TIMEOUT = 1.0


def socket_path(image_path: str | os.PathLike) -> Path:
    return Path(f"{os.fspath(image_path)}.sock")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read up to ``n`` bytes; shorter only on EOF or timeout."""
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(n - len(buf))
        except socket.timeout:
            break
        if not chunk:
            break
        buf += chunk
    return bytes(buf)


class _Handler(socketserver.BaseRequestHandler):
    server: "BlockServer"

    def handle(self) -> None:
        sock = self.request
        srv = self.server
        while True:
            sock.settimeout(None)
            try:
                first = sock.recv(1)
            except OSError:
                return
            if not first:
                return
            sock.settimeout(srv.frame_timeout)
            opcode = first[0]
            want = frame_length(opcode) if opcode in OPCODES else HEADER_LEN
            frame = first + _recv_exact(sock, want - 1)
            closing = False
            if len(frame) < want:
                # truncated: stalled or half-closed mid-frame
                response = encode_response(STATUS_PROTO)
            else:
                with srv.engine_lock:
                    response = handle_frame(srv.instance, frame)
                    closing = opcode == OP_CLOSE and response[0] == STATUS_OK
            try:
                sock.sendall(response)
            except OSError:
                return
            if closing:
                srv.request_stop()
                return


class BlockServer(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, instance: DeviceInstance, path: str | os.PathLike,
                 frame_timeout: float = DEFAULT_FRAME_TIMEOUT):
        self.instance = instance
        self.frame_timeout = frame_timeout
        self.engine_lock = threading.Lock()
        self.socket_file = Path(path)
        if self.socket_file.exists():
            self.socket_file.unlink()
        super().__init__(os.fspath(self.socket_file), _Handler)
        os.chmod(self.socket_file, 0o600)
        self._stopping = threading.Event()

    def request_stop(self) -> None:
        if not self._stopping.is_set():
            self._stopping.set()
            threading.Thread(target=self.shutdown, daemon=True).start()

    def serve(self) -> None:
        """Serve until a CLOSE request (or :meth:`stop`), then close the device."""
        try:
            self.serve_forever(poll_interval=0.1)
        finally:
            self.server_close()
            with self.engine_lock:
                if not self.instance.closed:
                    close_device(self.instance)
            try:
                self.socket_file.unlink()
            except FileNotFoundError:
                pass

    def stop(self) -> None:
        self.request_stop()


class BlockClient:
    """Blocking client for the block protocol."""

    def __init__(self, path: str | os.PathLike, timeout: float | None = 30.0):
        self.sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self.sock.settimeout(timeout)
        try:
            self.sock.connect(os.fspath(path))
        except (FileNotFoundError, ConnectionRefusedError) as exc:
            self.sock.close()
            raise NotOpen(f"no server at {path}") from exc

    def raw(self, frame: bytes, opcode: int | None = None) -> bytes:
        """Send raw bytes and read one response frame."""
        self.sock.sendall(frame)
        return self.recv_response(opcode if opcode is not None else (frame[0] if frame else 0))

    def recv_response(self, opcode: int) -> bytes:
        head = _recv_exact(self.sock, 1)
        if not head:
            raise ConnectionError("server closed the connection")
        if opcode == OP_READ and head[0] == STATUS_OK:
            return head + _recv_exact(self.sock, BLOCK_SIZE)
        return head

    def call(self, opcode: int, volume: int = 0, block: int = 0, payload: bytes = b"") -> tuple[int, bytes]:
        return decode_response(self.raw(encode_request(opcode, volume, block, payload)), opcode)

    def read(self, volume: int, block: int) -> tuple[int, bytes]:
        return self.call(OP_READ, volume, block)

    def write(self, volume: int, block: int, data: bytes) -> int:
        return self.call(OP_WRITE, volume, block, data)[0]

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "BlockClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

