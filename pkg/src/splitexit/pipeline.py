"""Two-stage packing pipeline: a quantize worker feeding a compress worker
through bounded queues, order-preserving per request.

Used by the real-transport client so packing overlaps transmission; the
simulator models pack cost analytically instead.
"""

from __future__ import annotations

import queue
import threading

import numpy as np

from .packing import (
    CODEC_NONE,
    CODEC_SHUFFLED_LOSSLESS,
    PackedPayload,
    compress,
    quantize,
)

_STOP = object()


class PackPipeline:
    def __init__(self, queue_depth: int = 8):
        # Stage handoff is bounded (backpressure); the output side is not,
        # so a producer can run ahead of a slow collector without deadlock.
        self._in: queue.Queue = queue.Queue(maxsize=queue_depth)
        self._to_compress: queue.Queue = queue.Queue(maxsize=queue_depth)
        self._done: queue.Queue = queue.Queue()
        self._quantizer = threading.Thread(target=self._quantize_loop, daemon=True)
        self._compressor = threading.Thread(target=self._compress_loop, daemon=True)

    def __enter__(self) -> "PackPipeline":
        self._quantizer.start()
        self._compressor.start()
        return self

    def __exit__(self, *exc) -> None:
        self._in.put(_STOP)
        self._quantizer.join()
        self._compressor.join()

    def submit(self, tag, values: np.ndarray) -> None:
        self._in.put((tag, np.ascontiguousarray(values, dtype=np.float32)))

    def collect(self) -> tuple[object, PackedPayload]:
        return self._done.get()

    def _quantize_loop(self) -> None:
        while True:
            item = self._in.get()
            if item is _STOP:
                self._to_compress.put(_STOP)
                return
            tag, values = item
            codes, qmin, qscale = quantize(values)
            qscale = float(np.float32(qscale))
            self._to_compress.put((tag, values.shape, codes, qmin, qscale))

    def _compress_loop(self) -> None:
        while True:
            item = self._to_compress.get()
            if item is _STOP:
                return
            tag, dims, codes, qmin, qscale = item
            framed = compress(codes, stride=1)
            if len(framed) >= len(codes):
                payload = PackedPayload(dims, qmin, qscale, CODEC_NONE, len(codes), codes)
            else:
                payload = PackedPayload(dims, qmin, qscale, CODEC_SHUFFLED_LOSSLESS,
                                        len(codes), framed)
            self._done.put((tag, payload))
