"""Binary framing of the local block-serving protocol.

Request::

    opcode u8 | volume u8 | block u64le | payload[4096] (WRITE only)

Response::

    status u8 | payload[4096] (successful READ only)
"""

from __future__ import annotations

import logging
import struct
from typing import NamedTuple

from . import engine
from .errors import InstanceClosed, NoSpace, RangeError, VolumeNotOpen
from .header import DeviceInstance, close_device
from .layout import BLOCK_SIZE

log = logging.getLogger(__name__)

OP_READ = 0x01
OP_WRITE = 0x02
OP_TRIM = 0x03
OP_FLUSH = 0x04
OP_CLOSE = 0x05
OPCODES = {OP_READ, OP_WRITE, OP_TRIM, OP_FLUSH, OP_CLOSE}

STATUS_OK = 0x00
STATUS_RANGE = 0x01
STATUS_NOSPACE = 0x02
STATUS_NOVOL = 0x03
STATUS_IO = 0x04
STATUS_PROTO = 0x05

HEADER = struct.Struct("<BBQ")
HEADER_LEN = HEADER.size                      # 10
WRITE_FRAME_LEN = HEADER_LEN + BLOCK_SIZE      # 4106


class ProtocolError(Exception):
    pass


class Request(NamedTuple):
    opcode: int
    volume: int
    block: int
    payload: bytes = b""


def encode_request(opcode: int, volume: int = 0, block: int = 0, payload: bytes = b"") -> bytes:
    return HEADER.pack(opcode, volume, block) + payload


def frame_length(opcode: int) -> int:
    return WRITE_FRAME_LEN if opcode == OP_WRITE else HEADER_LEN


def decode_request(frame: bytes) -> Request:
    if len(frame) < HEADER_LEN:
        raise ProtocolError("truncated header")
    opcode, volume, block = HEADER.unpack_from(frame)
    if opcode not in OPCODES:
        raise ProtocolError(f"unknown opcode {opcode:#04x}")
    if len(frame) != frame_length(opcode):
        raise ProtocolError(f"frame of {len(frame)} bytes for opcode {opcode:#04x}")
    return Request(opcode, volume, block, frame[HEADER_LEN:])


def encode_response(status: int, payload: bytes = b"") -> bytes:
    return bytes([status]) + payload


def decode_response(frame: bytes, opcode: int) -> tuple[int, bytes]:
    if not frame:
        raise ProtocolError("empty response")
    status = frame[0]
    if opcode == OP_READ and status == STATUS_OK and len(frame) != 1 + BLOCK_SIZE:
        raise ProtocolError("short READ response")
    return status, frame[1:]


def execute(instance: DeviceInstance, req: Request) -> bytes:
    """Run one request against the instance and encode the response.

    The caller serializes calls; CLOSE leaves the instance closed.
    """
    try:
        if req.opcode == OP_READ:
            return encode_response(STATUS_OK, engine.sflc_read(instance, req.volume, req.block))
        if req.opcode == OP_WRITE:
            engine.sflc_write(instance, req.volume, req.block, req.payload)
        elif req.opcode == OP_TRIM:
            engine.trim(instance, req.volume, req.block)
        elif req.opcode == OP_FLUSH:
            engine.flush(instance)
        elif req.opcode == OP_CLOSE:
            close_device(instance)
        else:
            return encode_response(STATUS_PROTO)
        return encode_response(STATUS_OK)
    except RangeError:
        return encode_response(STATUS_RANGE)
    except NoSpace:
        return encode_response(STATUS_NOSPACE)
    except (VolumeNotOpen, InstanceClosed):
        return encode_response(STATUS_NOVOL)
    except OSError as exc:
        log.error("I/O error serving %s: %s", req, exc)
        return encode_response(STATUS_IO)


def handle_frame(instance: DeviceInstance, frame: bytes) -> bytes:
    try:
        req = decode_request(frame)
    except ProtocolError as exc:
        log.debug("protocol error: %s", exc)
        return encode_response(STATUS_PROTO)
    return execute(instance, req)
