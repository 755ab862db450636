"""Uniform symmetric quantization with per-tensor, per-channel and per-block scales.

Grouping convention: axis 0 of the input is the channel axis. Per-block groups are
``block_size`` consecutive elements of one channel in C order; blocks never
straddle channels and the last block of a channel may be short.
"""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DomainError

GRANULARITIES = ("per-tensor", "per-channel", "per-block")
SCALE_KINDS = ("real", "pow2", "fp8-e4m3")

FP8_E4M3_MAX = 448.0
FP8_E4M3_MIN_SUBNORMAL = 2.0**-9
_FP8_E4M3_MIN_NORMAL_EXP = -6
_FP8_E4M3_MANTISSA_BITS = 3


@dataclass(frozen=True)
class QuantFormat:
    """Description of an integer code format and how its scales are formed.

    ``passthrough`` formats (fp16) leave values untouched and only matter for
    cost accounting; they report ``bits == 16``.
    """

    name: str
    bits: int
    signed: bool = True
    granularity: str = "per-tensor"
    block_size: int | None = None
    scale_kind: str = "real"
    passthrough: bool = False

    def __post_init__(self):
        if self.passthrough:
            if self.bits != 16:
                raise DomainError("passthrough formats are 16-bit")
            return
        if self.bits not in (4, 8):
            raise DomainError(f"bits must be 4 or 8, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise DomainError(f"unknown granularity {self.granularity!r}")
        if self.scale_kind not in SCALE_KINDS:
            raise DomainError(f"unknown scale kind {self.scale_kind!r}")
        if self.granularity == "per-block":
            if self.block_size is None or self.block_size < 1:
                raise DomainError("per-block granularity needs block_size >= 1")

    @property
    def q_max(self):
        if self.passthrough:
            raise DomainError(f"{self.name} has no integer code range")
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    @property
    def q_min(self):
        return -self.q_max if self.signed else 0

    @property
    def scale_bits(self):
        """Storage bits of one encoded scale factor."""
        if self.passthrough:
            return 0
        return {"real": 16, "pow2": 8, "fp8-e4m3": 8}[self.scale_kind]


FORMATS = {
    "fp16": QuantFormat("fp16", 16, passthrough=True),
    "int8": QuantFormat("int8", 8, granularity="per-channel"),
    "mxint8": QuantFormat("mxint8", 8, granularity="per-block", block_size=32, scale_kind="pow2"),
    "int4": QuantFormat("int4", 4, granularity="per-channel"),
    "int4-vsq": QuantFormat("int4-vsq", 4, granularity="per-block", block_size=16),
    "int4-fp8s": QuantFormat(
        "int4-fp8s", 4, granularity="per-block", block_size=16, scale_kind="fp8-e4m3"
    ),
    "uint4-fp8s": QuantFormat(
        "uint4-fp8s", 4, signed=False, granularity="per-block", block_size=16,
        scale_kind="fp8-e4m3",
    ),
}


def get_format(fmt):
    if isinstance(fmt, QuantFormat):
        return fmt
    try:
        return FORMATS[fmt]
    except KeyError:
        raise DomainError(f"unknown format {fmt!r}; known: {sorted(FORMATS)}") from None


# -- scale encoding ---------------------------------------------------------


def _fp8_e4m3(s):
    s = np.asarray(s, dtype=np.float64)
    _, ex = np.frexp(s)
    exp = np.maximum(ex - 1, _FP8_E4M3_MIN_NORMAL_EXP)
    step = np.ldexp(1.0, exp - _FP8_E4M3_MANTISSA_BITS)
    q = np.rint(s / step) * step
    return np.clip(q, FP8_E4M3_MIN_SUBNORMAL, FP8_E4M3_MAX)


def _pow2_ceil(s):
    s = np.asarray(s, dtype=np.float64)
    m, ex = np.frexp(s)
    return np.ldexp(1.0, np.where(m == 0.5, ex - 1, ex))


def _check_positive(s):
    if not (s > 0 and math.isfinite(s)):
        raise DomainError(f"scale must be positive and finite, got {s}")


def encode_scale_fp8(s):
    """Round a positive scale to the nearest FP8 E4M3 value, saturating at 448.

    Scales below the smallest subnormal are raised to it so they stay positive.
    """
    _check_positive(s)
    return float(_fp8_e4m3(s))


def encode_scale_pow2(s):
    """Smallest power of two that is >= ``s``."""
    _check_positive(s)
    return float(_pow2_ceil(s))


def _encode_scales(raw, kind):
    if kind == "real":
        return raw
    if kind == "pow2":
        return _pow2_ceil(raw)
    return _fp8_e4m3(raw)


# -- grouping ---------------------------------------------------------------


def _as_rows(x, fmt):
    """View ``x`` as ``(groups_rows, row_len)`` following the format's granularity."""
    if fmt.granularity == "per-tensor":
        return x.reshape(1, -1)
    if x.ndim == 0:
        return x.reshape(1, 1)
    return x.reshape(x.shape[0], -1)


def _group_absmax(rows, fmt):
    if fmt.granularity != "per-block":
        return np.abs(rows).max(axis=1, keepdims=True)
    bs = fmt.block_size
    n_rows, n = rows.shape
    nb = -(-n // bs)
    padded = np.zeros((n_rows, nb * bs), dtype=np.float64)
    padded[:, :n] = np.abs(rows)
    return padded.reshape(n_rows, nb, bs).max(axis=2)


def _expand(scales, fmt, row_len):
    """Broadcast ``(rows, groups)`` scales to one scale per element."""
    if fmt.granularity != "per-block":
        return np.repeat(scales, row_len, axis=1)
    return np.repeat(scales, fmt.block_size, axis=1)[:, :row_len]


def compute_scales(x, fmt):
    """Encoded scale per group, shaped ``(rows, groups_per_row)``."""
    fmt = get_format(fmt)
    rows = _as_rows(np.asarray(x, dtype=np.float64), fmt)
    raw = _group_absmax(rows, fmt) / fmt.q_max
    raw = np.where(raw > 0, raw, 1.0)
    return _encode_scales(raw, fmt.scale_kind)


def scale_map(scales, fmt, shape):
    """Per-element scale array of ``shape`` for ``(rows, groups)`` scales."""
    fmt = get_format(fmt)
    dummy = np.empty(shape)
    row_len = _as_rows(dummy, fmt).shape[1]
    return _expand(np.asarray(scales), fmt, row_len).reshape(shape)


def _codes(x, smap, fmt):
    return np.clip(np.rint(x / smap), fmt.q_min, fmt.q_max).astype(np.int32)


def _validate_input(x, fmt):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise DomainError("input contains non-finite values")
    if not fmt.passthrough and not fmt.signed and np.any(x < 0):
        raise DomainError(f"negative input for unsigned format {fmt.name}")
    return x


# -- public API -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes, their group scales, and the format that produced them."""

    codes: np.ndarray
    scales: np.ndarray
    format: QuantFormat

    @property
    def shape(self):
        return self.codes.shape

    def scale_map(self):
        if self.format.passthrough:
            return np.ones(self.codes.shape)
        return scale_map(self.scales, self.format, self.codes.shape)


def quantize(x, fmt):
    """Quantize ``x`` with scale ``max|x_g| / q_max`` per group and half-to-even rounding.

    All-zero groups get scale 1.0. Codes are clamped to ``[-q_max, q_max]`` for
    signed formats (the most negative two's-complement code is unused) and to
    ``[0, q_max]`` for unsigned ones.
    """
    fmt = get_format(fmt)
    x = _validate_input(x, fmt)
    if fmt.passthrough:
        return QuantizedTensor(codes=x.copy(), scales=np.ones((1, 1)), format=fmt)
    scales = compute_scales(x, fmt)
    smap = scale_map(scales, fmt, x.shape)
    return QuantizedTensor(codes=_codes(x, smap, fmt), scales=scales, format=fmt)


def dequantize(q):
    if q.format.passthrough:
        return np.asarray(q.codes, dtype=np.float64).copy()
    return q.codes * q.scale_map()


def fake_quantize(x, fmt):
    return dequantize(quantize(x, fmt))


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x / (1.0 + np.exp(-x))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def code_utilization(q):
    """(distinct codes present, number of representable codes).

    Meaningful as a whole-tensor metric for per-tensor formats; for finer
    granularities it counts distinct codes across all groups.
    """
    if q.format.passthrough:
        raise DomainError("passthrough formats have no code set")
    return int(np.unique(q.codes).size), 2**q.format.bits


def sqnr(reference, approx):
    """Signal-to-quantization-noise ratio in dB; ``math.inf`` for an exact match."""
    ref = np.asarray(reference, dtype=np.float64)
    app = np.asarray(approx, dtype=np.float64)
    if ref.shape != app.shape:
        raise DomainError(f"shape mismatch: {ref.shape} vs {app.shape}")
    signal = float(np.sum(ref * ref))
    if signal == 0.0:
        raise DomainError("reference is all zeros")
    noise = float(np.sum((ref - app) ** 2))
    if noise == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / noise)


class BlockQuantizer(TransformerMixin, BaseEstimator):
    """Post-training quantizer: ``fit`` calibrates scales, ``transform`` emits codes.

    Data passed to ``transform`` after fitting on calibration data saturates at
    the calibrated range. ``inverse_transform`` maps codes back to reals.
    Axis 0 of ``X`` is the channel axis.
    """

    def __init__(self, fmt="int4-fp8s"):
        self.fmt = fmt

    def _format(self):
        fmt = get_format(self.fmt)
        if fmt.passthrough:
            raise DomainError("BlockQuantizer needs an integer format")
        return fmt

    def fit(self, X, y=None):
        fmt = self._format()
        X = _validate_input(X, fmt)
        self.scales_ = compute_scales(X, fmt)
        self.shape_ = X.shape
        self.format_ = fmt
        return self

    def _check_shape(self, X):
        if X.shape != self.shape_:
            raise DomainError(f"expected shape {self.shape_}, got {X.shape}")

    def transform(self, X):
        check_is_fitted(self, "scales_")
        X = _validate_input(X, self.format_)
        self._check_shape(X)
        return _codes(X, scale_map(self.scales_, self.format_, X.shape), self.format_)

    def inverse_transform(self, X):
        check_is_fitted(self, "scales_")
        X = np.asarray(X)
        self._check_shape(X)
        return X * scale_map(self.scales_, self.format_, X.shape)

    def to_quantized(self, X):
        return QuantizedTensor(codes=self.transform(X), scales=self.scales_, format=self.format_)
