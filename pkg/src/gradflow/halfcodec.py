"""IEEE 754 binary16 wire codec (round-to-nearest-even, clamp on overflow)."""

import numpy as np

HALF_MAX = 65504.0


def to_half(values) -> np.ndarray:
    """Round to float16, clamping magnitudes beyond the largest finite half.

    NaN passes through unchanged; +-inf clamp to +-65504 like any overflow.
    """
    x = np.asarray(values, dtype=np.float32)
    return np.clip(x, -HALF_MAX, HALF_MAX).astype(np.float16)


def encode_half(values) -> bytes:
    return to_half(values).astype("<f2", copy=False).tobytes()


def decode_half(data) -> np.ndarray:
    data = bytes(data)
    if len(data) % 2:
        raise ValueError(f"half-precision payload has odd length {len(data)}")
    return np.frombuffer(data, dtype="<f2").astype(np.float32)
