import socket
import threading
import time

import pytest

from sflc import header, protocol
from sflc.crypto import FAST_COST
from sflc.errors import NotOpen
from sflc.layout import BLOCK_SIZE
from sflc.protocol import (
    OP_CLOSE,
    OP_FLUSH,
    OP_READ,
    OP_TRIM,
    OP_WRITE,
    STATUS_NOVOL,
    STATUS_OK,
    STATUS_PROTO,
    Request,
)
from sflc.server import BlockClient, BlockServer, socket_path

PATTERN = bytes((i * 13) & 0xFF for i in range(BLOCK_SIZE))


def test_request_encoding_is_little_endian():
    frame = protocol.encode_request(OP_READ, 2, 0x0102030405060708)
    assert frame == b"\x01\x02\x08\x07\x06\x05\x04\x03\x02\x01"
    assert protocol.decode_request(frame) == Request(OP_READ, 2, 0x0102030405060708, b"")
    w = protocol.encode_request(OP_WRITE, 0, 1, PATTERN)
    assert len(w) == 4106 and protocol.decode_request(w).payload == PATTERN


@pytest.mark.parametrize("frame", [
    b"\x01\x00",                                   # truncated header
    b"\x02" + bytes(9) + bytes(100),               # short write
    b"\x01" + bytes(9) + b"\x00",                  # read with trailing byte
    b"\x06" + bytes(9),                            # unknown opcode
])
def test_malformed_frames(frame):
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_request(frame)


def test_response_codec():
    assert protocol.encode_response(STATUS_OK, PATTERN)[1:] == PATTERN
    assert protocol.decode_response(b"\x03", OP_READ) == (STATUS_NOVOL, b"")
    with pytest.raises(protocol.ProtocolError):
        protocol.decode_response(b"\x00" + bytes(10), OP_READ)


@pytest.fixture
def served(make_image):
    path = make_image(2048, ["a", "b", "c"])
    inst = header.instantiate(path, "b", cost=FAST_COST)
    server = BlockServer(inst, socket_path(path), frame_timeout=0.2)
    thread = threading.Thread(target=server.serve, daemon=True)
    thread.start()
    yield path, server
    server.stop()
    thread.join(5)


def test_socket_round_trip(served):
    path, _ = served
    with BlockClient(socket_path(path)) as c:
        assert c.read(0, 5) == (STATUS_OK, bytes(BLOCK_SIZE))
        assert c.write(1, 9, PATTERN) == STATUS_OK
        assert c.read(1, 9) == (STATUS_OK, PATTERN)
        assert c.read(2, 0)[0] == STATUS_NOVOL
        assert c.call(OP_TRIM, 1, 9)[0] == STATUS_OK
        assert c.call(OP_FLUSH)[0] == STATUS_OK


def test_unknown_opcode_keeps_connection(served):
    path, _ = served
    with BlockClient(socket_path(path)) as c:
        assert c.raw(b"\x7f" + bytes(9)) == bytes([STATUS_PROTO])
        assert c.read(0, 0)[0] == STATUS_OK


def test_truncated_frame_times_out(served):
    path, _ = served
    with BlockClient(socket_path(path)) as c:
        c.sock.sendall(protocol.encode_request(OP_WRITE, 0, 1, PATTERN)[:50])
        t = time.monotonic()
        assert c.recv_response(OP_WRITE) == bytes([STATUS_PROTO])
        assert time.monotonic() - t < 3
        assert c.read(0, 1) == (STATUS_OK, bytes(BLOCK_SIZE))


def test_half_closed_truncated_frame(served):
    path, _ = served
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    s.connect(str(socket_path(path)))
    s.sendall(b"\x01\x00\x05")
    s.shutdown(socket.SHUT_WR)
    s.settimeout(5)
    assert s.recv(16) == bytes([STATUS_PROTO])
    s.close()


def test_concurrent_clients_serialized(served):
    path, _ = served
    errors = []

    def worker(k):
        try:
            with BlockClient(socket_path(path)) as c:
                for i in range(30):
                    data = bytes([k, i]) * (BLOCK_SIZE // 2)
                    assert c.write(k % 2, k * 40 + i, data) == STATUS_OK
                    assert c.read(k % 2, k * 40 + i) == (STATUS_OK, data)
        except Exception as exc:   # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


def test_io_error_status(served, monkeypatch):
    path, server = served
    with BlockClient(socket_path(path)) as c:
        assert c.write(0, 3, PATTERN) == STATUS_OK

        def broken(*args):
            raise OSError("disk on fire")

        monkeypatch.setattr(server.instance.image, "read_block", broken)
        assert c.read(0, 3)[0] == protocol.STATUS_IO


def test_close_stops_server(served):
    path, server = served
    with BlockClient(socket_path(path)) as c:
        assert c.call(OP_CLOSE)[0] == STATUS_OK
    for _ in range(50):
        if not socket_path(path).exists():
            break
        time.sleep(0.05)
    assert not socket_path(path).exists()
    assert server.instance.closed
    with pytest.raises(NotOpen):
        BlockClient(socket_path(path))
