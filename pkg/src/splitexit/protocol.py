"""Binary offload protocol: length-prefixed frames over a byte stream.

Frame (big-endian): magic 'SP' | version u8 | type u8 | request_id u64 |
payload_len u32 | payload.

OFFLOAD payload: split_id u16 | thr_conf f32 | payload_count u8, then per
tensor: consumer layer id u32 followed by one packed frame.  thr_conf is
normally in [0, 1]; NaN selects non-progressive execution (run to the final
exit, evaluate no heads) and a negative value -(k+1) pins execution to exit
k, uniformly for every sample.

RESULT payload: exit_id u8 | prediction u32 | confidence f32 |
server_compute_us u64 (all-ones means not piggybacked).

CANCEL, PROBE and PROBE_ACK carry empty payloads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from .errors import FrameError
from .packing import PackedPayload, decode_frame, encode_frame

WIRE_MAGIC = b"SP"
WIRE_VERSION = 1

TYPE_OFFLOAD = 1
TYPE_RESULT = 2
TYPE_CANCEL = 3
TYPE_PROBE = 4
TYPE_PROBE_ACK = 5

_HEADER = struct.Struct(">2sBBQI")
HEADER_BYTES = _HEADER.size  # 16

_RESULT = struct.Struct(">BIfQ")
RESULT_FRAME_BYTES = HEADER_BYTES + _RESULT.size  # 33
CANCEL_FRAME_BYTES = HEADER_BYTES

SERVER_US_ABSENT = 0xFFFFFFFFFFFFFFFF

# thr_conf sentinels for non-threshold policies.
THR_NONPROGRESSIVE = float("nan")


def thr_fixed_exit(exit_id: int) -> float:
    return -(exit_id + 1.0)


def decode_thr(thr: float) -> tuple[str, int | None, float]:
    """(policy kind, fixed exit id, threshold) from the wire value."""
    if math.isnan(thr):
        return "nonprogressive", None, 1.0
    if thr < 0:
        return "fixed_exit", int(round(-thr)) - 1, 1.0
    return "progressive", None, thr


@dataclass(frozen=True)
class Frame:
    type: int
    request_id: int
    payload: bytes = b""


@dataclass(frozen=True)
class OffloadMessage:
    request_id: int
    split_id: int
    thr_conf: float
    payloads: tuple[tuple[int, PackedPayload], ...]  # (consumer layer id, tensor)


@dataclass(frozen=True)
class ResultMessage:
    request_id: int
    exit_id: int
    prediction: int
    confidence: float
    server_compute_us: int | None


def encode(frame: Frame) -> bytes:
    return _HEADER.pack(WIRE_MAGIC, WIRE_VERSION, frame.type, frame.request_id,
                        len(frame.payload)) + frame.payload


def decode(buf: bytes, offset: int = 0) -> tuple[Frame, int]:
    if len(buf) - offset < HEADER_BYTES:
        raise FrameError("short frame header")
    magic, version, ftype, request_id, payload_len = _HEADER.unpack_from(buf, offset)
    if magic != WIRE_MAGIC:
        raise FrameError("bad wire magic")
    if version != WIRE_VERSION:
        raise FrameError(f"unsupported wire version {version}")
    start = offset + HEADER_BYTES
    payload = buf[start:start + payload_len]
    if len(payload) != payload_len:
        raise FrameError("truncated frame payload")
    return Frame(ftype, request_id, payload), start + payload_len


def encode_offload(msg: OffloadMessage) -> bytes:
    body = struct.pack(">HfB", msg.split_id, msg.thr_conf, len(msg.payloads))
    for consumer, payload in msg.payloads:
        body += struct.pack(">I", consumer) + encode_frame(payload)
    return encode(Frame(TYPE_OFFLOAD, msg.request_id, body))


def decode_offload(frame: Frame) -> OffloadMessage:
    if frame.type != TYPE_OFFLOAD:
        raise FrameError("not an offload frame")
    split_id, thr_conf, count = struct.unpack_from(">HfB", frame.payload, 0)
    pos = 7
    payloads = []
    for _ in range(count):
        (consumer,) = struct.unpack_from(">I", frame.payload, pos)
        pos += 4
        packed, pos = decode_frame(frame.payload, pos)
        payloads.append((consumer, packed))
    if pos != len(frame.payload):
        raise FrameError("trailing bytes after offload payloads")
    return OffloadMessage(frame.request_id, split_id, float(thr_conf), tuple(payloads))


def encode_result(msg: ResultMessage) -> bytes:
    us = SERVER_US_ABSENT if msg.server_compute_us is None else msg.server_compute_us
    body = _RESULT.pack(msg.exit_id, msg.prediction, msg.confidence, us)
    return encode(Frame(TYPE_RESULT, msg.request_id, body))


def decode_result(frame: Frame) -> ResultMessage:
    if frame.type != TYPE_RESULT:
        raise FrameError("not a result frame")
    exit_id, prediction, confidence, us = _RESULT.unpack(frame.payload)
    return ResultMessage(
        request_id=frame.request_id,
        exit_id=exit_id,
        prediction=prediction,
        confidence=float(confidence),
        server_compute_us=None if us == SERVER_US_ABSENT else us,
    )


def encode_cancel(request_id: int) -> bytes:
    return encode(Frame(TYPE_CANCEL, request_id))


def encode_probe(request_id: int) -> bytes:
    return encode(Frame(TYPE_PROBE, request_id))


def encode_probe_ack(request_id: int) -> bytes:
    return encode(Frame(TYPE_PROBE_ACK, request_id))
