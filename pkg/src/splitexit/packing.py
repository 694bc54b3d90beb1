"""Activation payload packing: 8-bit affine quantization plus byte-shuffle
and lossless compression, with a run-time amortization predicate.

Quantization is asymmetric affine over the tensor's min/max with
round-half-to-even codes, so exact zeros share one code and the value range
is fully used.  The lossless stage byte-shuffles fixed 4096-byte blocks at
the element stride and deflates them; a store-mode escape keeps the raw
bytes whenever compression would expand them.

Packed frame layout (big-endian, bit-exact):
  magic 0xC0 0xC0 | version u8 | codec u8 | rank u8 | dims u32 each |
  quant_min f32 | quant_scale f32 | raw_len u32 | payload

codec 0 stores the payload verbatim (raw_len == len(payload)); codec 1 is
shuffle+deflate.  A codec-0 frame whose raw_len equals 4x the element count
carries unquantized float32 data (quant fields unused).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FrameError

PACK_MAGIC = b"\xc0\xc0"
PACK_VERSION = 1
CODEC_NONE = 0
CODEC_SHUFFLED_LOSSLESS = 1

SHUFFLE_BLOCK = 4096  # bytes per shuffle block

# transform stride (0 = stored), block log2, raw_len, compressed length
_COMPRESS_HEADER = struct.Struct(">BBII")


def quantize(values: np.ndarray) -> tuple[bytes, float, float]:
    """Map a float32 tensor to u8 codes: scale=(max-min)/255, q=rhe((x-min)/scale).

    Constant tensors get scale 0 and all-zero codes.  Returns
    (codes, quant_min, quant_scale) with the quant parameters at 32-bit
    precision so they survive the frame format exactly.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot quantize non-finite values")
    lo = float(np.float32(arr.min()))
    hi = float(np.float32(arr.max()))
    if hi == lo:
        return bytes(arr.size), lo, 0.0
    # Codes come from the full-precision ratio so exact half-points land on
    # the round-half-to-even boundary; the scale itself is range/255.
    codes = np.clip(np.round((arr - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    return codes.tobytes(), lo, (hi - lo) / 255.0


def dequantize(codes: bytes, quant_min: float, quant_scale: float, dims: tuple[int, ...]) -> np.ndarray:
    """Inverse map: x_hat = quant_min + q * quant_scale, as float32."""
    n = 1
    for d in dims:
        n *= d
    if len(codes) != n:
        raise FrameError(f"code buffer holds {len(codes)} bytes but dims {dims} need {n}")
    q = np.frombuffer(codes, dtype=np.uint8).astype(np.float64)
    return (quant_min + q * quant_scale).astype(np.float32).reshape(dims)


def byte_shuffle(data: bytes, stride: int, block: int = SHUFFLE_BLOCK) -> bytes:
    """Transpose each full block so byte lane k of every element is contiguous.

    stride 1 is the identity; the trailing partial block is left in place.
    """
    if stride <= 1 or len(data) < 2 * stride:
        return data
    out = bytearray(len(data))
    pos = 0
    for start in range(0, len(data), block):
        chunk = data[start:start + block]
        usable = (len(chunk) // stride) * stride
        if usable:
            arr = np.frombuffer(chunk[:usable], dtype=np.uint8).reshape(-1, stride)
            out[pos:pos + usable] = arr.T.tobytes()
        out[pos + usable:pos + len(chunk)] = chunk[usable:]
        pos += len(chunk)
    return bytes(out)


def byte_unshuffle(data: bytes, stride: int, block: int = SHUFFLE_BLOCK) -> bytes:
    if stride <= 1 or len(data) < 2 * stride:
        return data
    out = bytearray(len(data))
    pos = 0
    for start in range(0, len(data), block):
        chunk = data[start:start + block]
        usable = (len(chunk) // stride) * stride
        if usable:
            arr = np.frombuffer(chunk[:usable], dtype=np.uint8).reshape(stride, -1)
            out[pos:pos + usable] = arr.T.tobytes()
        out[pos + usable:pos + len(chunk)] = chunk[usable:]
        pos += len(chunk)
    return bytes(out)


def compress(raw: bytes, stride: int = 1) -> bytes:
    """Shuffle-then-deflate with a store-mode escape; output is self-framing.

    The header records the stride (0 = stored), the block size, the raw
    length and the body length, so decompress() needs nothing else and the
    result can be embedded back-to-back in a larger message.
    """
    shuffled = byte_shuffle(raw, stride)
    packed = zlib.compress(shuffled, level=6)
    if len(packed) >= len(raw):
        return _COMPRESS_HEADER.pack(0, 0, len(raw), len(raw)) + raw
    block_log2 = SHUFFLE_BLOCK.bit_length() - 1
    return _COMPRESS_HEADER.pack(stride, block_log2, len(raw), len(packed)) + packed


def compressed_length(framed: bytes, offset: int = 0) -> int:
    """Total byte length of one self-framed compressed stream."""
    if len(framed) - offset < _COMPRESS_HEADER.size:
        raise FrameError("compressed frame shorter than its header")
    _, _, _, comp_len = _COMPRESS_HEADER.unpack_from(framed, offset)
    return _COMPRESS_HEADER.size + comp_len


def decompress(framed: bytes) -> bytes:
    if len(framed) < _COMPRESS_HEADER.size:
        raise FrameError("compressed frame shorter than its header")
    stride, block_log2, raw_len, comp_len = _COMPRESS_HEADER.unpack_from(framed)
    body = framed[_COMPRESS_HEADER.size:_COMPRESS_HEADER.size + comp_len]
    if len(body) != comp_len:
        raise FrameError("truncated compressed frame")
    if stride == 0:
        if comp_len != raw_len:
            raise FrameError("stored frame length does not match raw_len")
        return body
    try:
        shuffled = zlib.decompress(body)
    except zlib.error as exc:
        raise FrameError(f"corrupt compressed frame: {exc}") from exc
    if len(shuffled) != raw_len:
        raise FrameError("decompressed length does not match raw_len")
    return byte_unshuffle(shuffled, stride, 1 << block_log2)


@dataclass(frozen=True)
class PackedPayload:
    dims: tuple[int, ...]
    quant_min: float
    quant_scale: float
    codec: int
    raw_len: int
    data: bytes

    @property
    def nbytes(self) -> int:
        return frame_overhead(len(self.dims)) + len(self.data)


def frame_overhead(rank: int) -> int:
    return 2 + 1 + 1 + 1 + 4 * rank + 4 + 4 + 4


def pack_tensor(values: np.ndarray, lossy: bool = True) -> PackedPayload:
    """Full packing pipeline: quantize (when lossy) then shuffle+compress.

    lossy=False frames the float32 bytes verbatim (codec 0), used when the
    amortization predicate says compression does not pay off.
    """
    arr = np.ascontiguousarray(values, dtype=np.float32)
    dims = arr.shape
    if not lossy:
        raw = arr.astype(">f4").tobytes()
        return PackedPayload(dims, 0.0, 0.0, CODEC_NONE, len(raw), raw)
    codes, qmin, qscale = quantize(arr)
    qscale = float(np.float32(qscale))  # frame precision; both ends dequantize alike
    framed = compress(codes, stride=1)
    if len(framed) >= len(codes):
        return PackedPayload(dims, qmin, qscale, CODEC_NONE, len(codes), codes)
    return PackedPayload(dims, qmin, qscale, CODEC_SHUFFLED_LOSSLESS, len(codes), framed)


def unpack_tensor(payload: PackedPayload) -> np.ndarray:
    n = 1
    for d in payload.dims:
        n *= d
    if payload.codec == CODEC_NONE:
        if payload.raw_len == 4 * n:
            return np.frombuffer(payload.data, dtype=">f4").astype(np.float32).reshape(payload.dims)
        return dequantize(payload.data, payload.quant_min, payload.quant_scale, payload.dims)
    codes = decompress(payload.data)
    if len(codes) != payload.raw_len:
        raise FrameError("unpacked length does not match frame raw_len")
    return dequantize(codes, payload.quant_min, payload.quant_scale, payload.dims)


def encode_frame(payload: PackedPayload) -> bytes:
    head = struct.pack(
        ">2sBBB", PACK_MAGIC, PACK_VERSION, payload.codec, len(payload.dims)
    )
    dims = struct.pack(f">{len(payload.dims)}I", *payload.dims) if payload.dims else b""
    tail = struct.pack(">ffI", payload.quant_min, payload.quant_scale, payload.raw_len)
    return head + dims + tail + payload.data


def decode_frame(buf: bytes, offset: int = 0) -> tuple[PackedPayload, int]:
    """Parse one packed frame at ``offset``; returns (payload, next_offset)."""
    if buf[offset:offset + 2] != PACK_MAGIC:
        raise FrameError("bad packed-frame magic")
    version, codec, rank = struct.unpack_from(">BBB", buf, offset + 2)
    if version != PACK_VERSION:
        raise FrameError(f"unsupported packed-frame version {version}")
    pos = offset + 5
    dims = struct.unpack_from(f">{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    qmin, qscale, raw_len = struct.unpack_from(">ffI", buf, pos)
    pos += 12
    if codec == CODEC_NONE:
        data_len = raw_len
    elif codec == CODEC_SHUFFLED_LOSSLESS:
        data_len = compressed_length(buf, pos)
    else:
        raise FrameError(f"unknown codec {codec}")
    data = buf[pos:pos + data_len]
    if len(data) != data_len:
        raise FrameError("truncated packed frame")
    return PackedPayload(tuple(dims), float(qmin), float(qscale), codec, raw_len, data), pos + data_len


@dataclass
class PackEstimator:
    """Pack-cost model: calibrated throughput plus per-split ratio EWMA."""

    pack_mbps: float = 200.0        # raw float32 MB/s through the pipeline
    ewma_alpha: float = 0.25
    default_ratio: float = 6.0      # raw bytes / packed bytes before any observation
    ratios: dict[int, float] | None = None

    def __post_init__(self):
        if self.ratios is None:
            self.ratios = {}

    def pack_ms(self, raw_bytes: float) -> float:
        return raw_bytes / (self.pack_mbps * 1000.0)

    def ratio(self, split_id: int) -> float:
        return self.ratios.get(split_id, self.default_ratio)

    def observe(self, split_id: int, raw_bytes: int, packed_bytes: int) -> None:
        obs = raw_bytes / max(packed_bytes, 1)
        prev = self.ratios.get(split_id)
        if prev is None:
            self.ratios[split_id] = obs
        else:
            self.ratios[split_id] = (1 - self.ewma_alpha) * prev + self.ewma_alpha * obs


def should_compress(raw_bytes: float, est_pack_ms: float, est_ratio: float,
                    bandwidth_mbps: float) -> bool:
    """True when packing time plus the packed transfer beats the raw transfer.

    Only payload serialisation terms matter: the latency floor is paid either
    way and cancels.
    """
    if bandwidth_mbps <= 0:
        raise ValueError("bandwidth must be positive")
    raw_ms = (8.0 * raw_bytes) / (1000.0 * bandwidth_mbps)
    packed_ms = (8.0 * raw_bytes / est_ratio) / (1000.0 * bandwidth_mbps)
    return est_pack_ms + packed_ms < raw_ms


def calibrate_pack_mbps(sample_bytes: int = 1 << 20, seed: int = 0) -> float:
    """Measure the pipeline's raw-float32 throughput in MB/s.

    Run once at profile-generation time; the result is frozen into the
    platform profile so replays stay deterministic.
    """
    import time

    rng = np.random.default_rng(seed)
    values = rng.standard_normal(sample_bytes // 4).astype(np.float32)
    mask = rng.random(values.size) < 0.8
    values[mask] = 0.0
    start = time.perf_counter()
    reps = 3
    for _ in range(reps):
        codes, _, _ = quantize(values)
        compress(codes, stride=1)
    elapsed = time.perf_counter() - start
    return (reps * sample_bytes / 1e6) / elapsed
