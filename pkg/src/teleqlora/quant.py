"""Blockwise 4-bit NormalFloat (NF4) quantization of frozen weight matrices.

Weights are split into fixed-size blocks, each block is normalized by its
absolute maximum, and every element is snapped to the nearest entry of a
16-value codebook placed at standard-normal quantiles. Codes are stored two
per byte; scales are kept at full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm


@dataclass(frozen=True)
class Nf4Codebook:
    """16 strictly increasing values in [-1, 1] with an exact zero entry."""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != 16:
            raise ValueError("codebook must have exactly 16 values")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ValueError("codebook values must be strictly increasing")
        if self.values[0] != -1.0 or self.values[-1] != 1.0:
            raise ValueError("codebook endpoints must be -1 and +1")
        if self.values.count(0.0) != 1:
            raise ValueError("codebook must contain exactly one zero")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def build_nf4_codebook() -> Nf4Codebook:
    """Build the 16-value NF4 codebook from standard-normal quantiles.

    Asymmetric construction: 8 quantiles on the positive side, an exact zero,
    and 7 on the negative side, with the outermost probability offset chosen
    as 1 - (1/32 + 1/30)/2 so the endpoint quantiles stay finite. The result
    is normalized so the extremes land exactly on -1 and +1.
    """
    offset = 1.0 - 0.5 * (1.0 / 32.0 + 1.0 / 30.0)
    positive = norm.ppf(np.linspace(offset, 0.5, 9))[:-1]
    negative = -norm.ppf(np.linspace(offset, 0.5, 8))[:-1]
    values = np.sort(np.concatenate([negative, [0.0], positive]))
    values = values / values[-1]
    return Nf4Codebook(tuple(float(v) for v in values))


@dataclass
class QuantizedTensor:
    """NF4-encoded matrix: packed 4-bit codes plus one scale per block.

    `codes` normally holds two 4-bit indices per byte (low nibble first).
    An unpacked uint8 array (one code per byte) is also accepted, which is
    where out-of-range code values become detectable.
    """

    codes: np.ndarray
    scales: np.ndarray
    block_size: int
    shape: tuple[int, ...]
    dtype_tag: str = "float32"

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.numel / self.block_size)

    @property
    def padded_numel(self) -> int:
        return self.num_blocks * self.block_size


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack 4-bit code indices two per byte, low nibble first."""
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    pairs = codes.reshape(-1, 2)
    return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, count: int) -> np.ndarray:
    """Inverse of pack_codes; `count` recovers odd-length code streams."""
    packed = np.asarray(packed, dtype=np.uint8)
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


def _nearest_codes(normalized: np.ndarray, values: np.ndarray) -> np.ndarray:
    # argmin takes the first minimum, so ties resolve to the lower index
    dist = np.abs(normalized.astype(np.float64)[:, None] - values[None, :])
    return dist.argmin(axis=1).astype(np.uint8)


def quantize_blockwise(
    data: np.ndarray, block_size: int, codebook: Nf4Codebook
) -> QuantizedTensor:
    """Quantize an array blockwise: absmax scale per block, nearest-code lookup.

    All-zero blocks store scale 0 with every code pointing at the zero entry.
    Trailing elements are zero-padded to a full block; padding is dropped on
    dequantization via the recorded shape.
    """
    data = np.asarray(data, dtype=np.float32)
    if data.size == 0:
        raise ValueError("empty tensor")
    if block_size < 1:
        raise ValueError("block size must be >= 1")

    flat = data.reshape(-1)
    n_blocks = math.ceil(flat.size / block_size)
    padded = np.zeros(n_blocks * block_size, dtype=np.float32)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)

    scales = np.abs(blocks).max(axis=1).astype(np.float32)
    safe = np.where(scales > 0, scales, 1.0).astype(np.float32)
    normalized = blocks / safe[:, None]

    codes = _nearest_codes(normalized.reshape(-1), codebook.as_array())
    return QuantizedTensor(
        codes=pack_codes(codes),
        scales=scales,
        block_size=int(block_size),
        shape=tuple(int(d) for d in data.shape),
    )


def _validated_codes(qt: QuantizedTensor) -> np.ndarray:
    padded = qt.padded_numel
    size = qt.codes.size
    if size == math.ceil(padded / 2):
        return unpack_codes(qt.codes, padded)
    if size == padded:
        codes = np.asarray(qt.codes, dtype=np.uint8)
        if (codes > 15).any():
            raise ValueError("corrupt code stream")
        return codes
    raise ValueError("corrupt code stream")


def dequantize(qt: QuantizedTensor, codebook: Nf4Codebook) -> np.ndarray:
    """Reconstruct the float32 array: element i = scale[block(i)] * codebook[code(i)]."""
    if qt.scales.size != qt.num_blocks:
        raise ValueError("corrupt code stream")
    if (np.asarray(qt.scales) < 0).any():
        raise ValueError("corrupt code stream")
    codes = _validated_codes(qt)
    values = codebook.as_array().astype(np.float32)
    out = values[codes].reshape(qt.num_blocks, qt.block_size)
    out = out * np.asarray(qt.scales, dtype=np.float32)[:, None]
    return out.reshape(-1)[: qt.numel].reshape(qt.shape)


def code_stream_digest(qt: QuantizedTensor) -> str:
    """Stable hex digest of the packed code stream; used to assert the frozen base."""
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(qt.codes).tobytes())
    h.update(np.ascontiguousarray(qt.scales, dtype=np.float32).tobytes())
    return h.hexdigest()
