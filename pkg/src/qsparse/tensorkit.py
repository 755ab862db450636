"""Channel-last address arithmetic and bitmap-compressed channel storage.

Activations are ``(C, H, W)`` arrays and weights are ``(C, K, R, S)`` arrays.
Both are stored channel-last: the input channel index varies slowest, so one
channel occupies a contiguous address range and can be fetched as a unit.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError


def _check_index(idx, dims):
    if len(idx) != len(dims):
        raise IndexError(f"expected {len(dims)} indices, got {len(idx)}")
    for i, n in zip(idx, dims):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(idx)} out of range for dims {tuple(dims)}")


def addr_activation(c, h, w, dims):
    """Linear address of activation element ``(c, h, w)`` in a ``(C, H, W)`` tensor."""
    _check_index((c, h, w), dims)
    _, H, W = dims
    return (c * H + h) * W + w


def addr_weight(c, k, r, s, dims):
    """Linear address of weight ``(c, k, r, s)`` in a ``(C, K, R, S)`` tensor."""
    _check_index((c, k, r, s), dims)
    _, K, R, S = dims
    return ((c * K + k) * R + r) * S + s


def as_activation(x, dtype=None):
    """Validate a ``(C, H, W)`` activation array."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3:
        raise DomainError(f"activation must be (C, H, W), got shape {x.shape}")
    return x


def as_weight(w, dtype=None):
    """Validate a ``(C, K, R, S)`` weight array."""
    w = np.asarray(w, dtype=dtype)
    if w.ndim != 4:
        raise DomainError(f"weight must be (C, K, R, S), got shape {w.shape}")
    return w


@dataclass(frozen=True, eq=False)
class CompressedChannel:
    """Nonzero values of one channel plus a one-bit-per-element occupancy map.

    ``bitmap`` is packed little-endian within each byte: element ``i`` lives in
    bit ``i % 8`` of byte ``i // 8``.
    """

    bitmap: np.ndarray
    values: np.ndarray
    n: int

    def __post_init__(self):
        if self.bitmap.dtype != np.uint8 or self.bitmap.size != (self.n + 7) // 8:
            raise FormatError(f"bitmap must hold {(self.n + 7) // 8} bytes for {self.n} elements")

    @property
    def mask(self):
        return np.unpackbits(self.bitmap, count=self.n, bitorder="little").astype(bool)

    @property
    def nnz(self):
        return int(self.values.size)

    def nbytes(self, value_bits):
        """Storage footprint with ``value_bits`` per stored value."""
        return self.bitmap.size + (self.nnz * value_bits + 7) // 8

    def __eq__(self, other):
        if not isinstance(other, CompressedChannel):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.bitmap, other.bitmap)
            and np.array_equal(self.values, other.values)
        )


def compress_channel(values):
    """Compress a channel (any shape, flattened in C order) to bitmap + nonzeros.

    Zeros are detected by exact equality.
    """
    flat = np.asarray(values).reshape(-1)
    mask = flat != 0
    bitmap = np.packbits(mask, bitorder="little")
    return CompressedChannel(bitmap=bitmap, values=flat[mask].copy(), n=flat.size)


def decompress_channel(cc, n=None):
    """Inverse of :func:`compress_channel`; returns a flat array of ``n`` elements."""
    if n is None:
        n = cc.n
    if n != cc.n:
        raise FormatError(f"bitmap covers {cc.n} elements, expected {n}")
    mask = cc.mask
    if int(mask.sum()) != cc.values.size:
        raise FormatError(
            f"bitmap has {int(mask.sum())} set bits but {cc.values.size} values are stored"
        )
    out = np.zeros(n, dtype=cc.values.dtype)
    out[mask] = cc.values
    return out


def compress_activation(x):
    """Compress every channel of a ``(C, H, W)`` tensor."""
    x = as_activation(x)
    return [compress_channel(ch) for ch in x]


def decompress_activation(channels, dims):
    C, H, W = dims
    if len(channels) != C:
        raise FormatError(f"expected {C} channels, got {len(channels)}")
    return np.stack([decompress_channel(cc, H * W).reshape(H, W) for cc in channels])
