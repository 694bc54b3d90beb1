import math

import numpy as np
import pytest

from splitexit.errors import FrameError
from splitexit.packing import pack_tensor
from splitexit.protocol import (
    CANCEL_FRAME_BYTES,
    HEADER_BYTES,
    RESULT_FRAME_BYTES,
    SERVER_US_ABSENT,
    THR_NONPROGRESSIVE,
    TYPE_CANCEL,
    TYPE_OFFLOAD,
    TYPE_PROBE,
    TYPE_PROBE_ACK,
    Frame,
    OffloadMessage,
    ResultMessage,
    decode,
    decode_offload,
    decode_result,
    decode_thr,
    encode,
    encode_cancel,
    encode_offload,
    encode_probe,
    encode_probe_ack,
    encode_result,
    thr_fixed_exit,
)


class TestFrameLayout:
    def test_header_golden_bytes(self):
        buf = encode(Frame(TYPE_CANCEL, 0x1122334455667788))
        assert buf[:2] == b"SP"
        assert buf[2] == 1  # version
        assert buf[3] == TYPE_CANCEL
        assert buf[4:12] == bytes.fromhex("1122334455667788")
        assert buf[12:16] == bytes(4)  # empty payload
        assert len(buf) == HEADER_BYTES == CANCEL_FRAME_BYTES == 16

    def test_result_frame_is_33_bytes(self):
        buf = encode_result(ResultMessage(7, 3, 42, 0.625, 1500))
        assert len(buf) == RESULT_FRAME_BYTES == 33
        frame, consumed = decode(buf)
        assert consumed == 33
        msg = decode_result(frame)
        assert msg == ResultMessage(7, 3, 42, 0.625, 1500)

    def test_absent_server_time_encoding(self):
        buf = encode_result(ResultMessage(1, 0, 0, 0.5, None))
        assert buf[-8:] == b"\xff" * 8
        assert decode_result(decode(buf)[0]).server_compute_us is None
        assert SERVER_US_ABSENT == (1 << 64) - 1

    def test_round_trip_all_control_types(self):
        for body, want in (
            (encode_cancel(9), TYPE_CANCEL),
            (encode_probe(10), TYPE_PROBE),
            (encode_probe_ack(10), TYPE_PROBE_ACK),
        ):
            frame, _ = decode(body)
            assert frame.type == want

    def test_bad_magic_rejected(self):
        buf = bytearray(encode_cancel(1))
        buf[0] = 0x00
        with pytest.raises(FrameError, match="magic"):
            decode(bytes(buf))

    def test_truncated_payload_rejected(self):
        buf = encode_result(ResultMessage(1, 0, 0, 0.5, None))[:-4]
        with pytest.raises(FrameError, match="truncated"):
            decode(buf)

    def test_frames_parse_back_to_back(self):
        buf = encode_cancel(1) + encode_probe(2)
        first, pos = decode(buf)
        second, end = decode(buf, pos)
        assert first.type == TYPE_CANCEL and second.type == TYPE_PROBE
        assert end == len(buf)


class TestOffloadMessage:
    def _msg(self, lossy=True):
        rng = np.random.default_rng(5)
        t1 = rng.uniform(0, 2, 300).astype(np.float32)
        t1[rng.random(300) < 0.8] = 0.0
        t2 = np.ones(64, dtype=np.float32)
        return OffloadMessage(
            request_id=99,
            split_id=4,
            thr_conf=0.8125,  # exactly representable in f32
            payloads=((9, pack_tensor(t1, lossy=lossy)), (12, pack_tensor(t2, lossy=False))),
        )

    def test_round_trip(self):
        msg = self._msg()
        frame, consumed = decode(encode_offload(msg))
        assert frame.type == TYPE_OFFLOAD
        got = decode_offload(frame)
        assert got == msg

    def test_offload_field_layout(self):
        msg = self._msg()
        buf = encode_offload(msg)
        body = buf[HEADER_BYTES:]
        assert body[:2] == (4).to_bytes(2, "big")      # split_id
        assert body[6] == 2                            # payload count
        assert body[7:11] == (9).to_bytes(4, "big")    # first consumer id

    def test_trailing_garbage_rejected(self):
        buf = encode_offload(self._msg())
        frame, _ = decode(buf)
        bad = Frame(frame.type, frame.request_id, frame.payload + b"\x00")
        with pytest.raises(FrameError):
            decode_offload(bad)


class TestThrSentinels:
    def test_progressive_range(self):
        kind, fixed, thr = decode_thr(0.75)
        assert kind == "progressive" and fixed is None and thr == 0.75

    def test_nonprogressive_nan(self):
        assert math.isnan(THR_NONPROGRESSIVE)
        kind, fixed, _ = decode_thr(float("nan"))
        assert kind == "nonprogressive" and fixed is None

    def test_fixed_exit_negative_encoding(self):
        for e in range(7):
            wire = thr_fixed_exit(e)
            assert wire < 0
            kind, fixed, _ = decode_thr(wire)
            assert kind == "fixed_exit" and fixed == e

    def test_sentinels_survive_f32_wire(self):
        msg = OffloadMessage(1, 0, THR_NONPROGRESSIVE, ())
        got = decode_offload(decode(encode_offload(msg))[0])
        assert math.isnan(got.thr_conf)
        msg = OffloadMessage(1, 0, thr_fixed_exit(5), ())
        got = decode_offload(decode(encode_offload(msg))[0])
        assert decode_thr(got.thr_conf) == ("fixed_exit", 5, 1.0)
