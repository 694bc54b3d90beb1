"""Synthetic activation tensors that stand in for real feature maps.

Layer execution is simulated, so payload contents only need to (a) look
like post-ReLU activations for the compressor (mostly exact zeros) and
(b) carry the sample identity to the server.  The identity rides in the
sign pattern of the first 32 elements with magnitudes far above the 8-bit
quantization step, so it survives the lossy packing pipeline bit-exactly.
"""

from __future__ import annotations

import numpy as np

_ID_BITS = 32
_MARK = 4.0          # magnitude of the sign-encoded id elements
_VALUE_LO = 0.5      # non-zero activations stay >= one quantization step


def build_activation(sample_id: int, n_elems: int, sparsity: float = 0.8) -> np.ndarray:
    """Deterministic float32 activation for (sample, size); ~``sparsity``
    of the tail elements are exact zeros."""
    if n_elems < _ID_BITS + 8:
        n_elems = _ID_BITS + 8
    rng = np.random.default_rng((0x5E17, sample_id & 0xFFFFFFFF, n_elems))
    values = np.zeros(n_elems, dtype=np.float32)
    bits = (sample_id >> np.arange(_ID_BITS)) & 1
    values[:_ID_BITS] = np.where(bits == 1, _MARK, -_MARK)
    tail = n_elems - _ID_BITS
    active = rng.random(tail) >= sparsity
    mags = rng.uniform(_VALUE_LO, _MARK, size=tail).astype(np.float32)
    values[_ID_BITS:] = np.where(active, mags, 0.0)
    return values


def decode_sample_id(tensor: np.ndarray) -> int:
    flat = np.asarray(tensor).ravel()
    if flat.size < _ID_BITS:
        raise ValueError("tensor too small to carry a sample id")
    bits = (flat[:_ID_BITS] > 0).astype(np.uint64)
    return int((bits << np.arange(_ID_BITS, dtype=np.uint64)).sum())
