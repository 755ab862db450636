import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from qsparse.errors import DomainError
from qsparse.quant import (
    FORMATS, BlockQuantizer, QuantFormat, code_utilization, dequantize, encode_scale_fp8,
    encode_scale_pow2, quantize, relu, silu, sqnr,
)

INT4 = QuantFormat("t-int4", 4)
UINT4 = QuantFormat("t-uint4", 4, signed=False)


def e4m3_values():
    """All finite non-negative E4M3 values, decoded from bit patterns."""
    vals = []
    for e in range(16):
        for m in range(8):
            if e == 15 and m == 7:
                continue  # NaN encoding
            vals.append(2.0**-6 * m / 8 if e == 0 else 2.0 ** (e - 7) * (1 + m / 8))
    return np.array(sorted(vals))


def nearest_e4m3(s, table=e4m3_values()):
    if s >= table[-1]:
        return table[-1]
    i = np.searchsorted(table, s)
    lo, hi = table[i - 1], table[i]
    if s - lo < hi - s:
        return lo
    if hi - s < s - lo:
        return hi
    # tie: even mantissa (even index in the ordered table of a binade)
    return lo if (i - 1) % 2 == 0 else hi


def test_q_max():
    assert INT4.q_max == 7 and UINT4.q_max == 15
    assert FORMATS["int8"].q_max == 127
    assert FORMATS["mxint8"].block_size == 32
    with pytest.raises(DomainError):
        QuantFormat("bad", 4, granularity="per-block")
    with pytest.raises(DomainError):
        QuantFormat("bad", 6)


def test_quantize_per_tensor_example():
    q = quantize([1.0, -2.0, 0.5], INT4)
    assert q.scales.item() == pytest.approx(2 / 7)
    assert q.codes.tolist() == [4, -7, 2]
    np.testing.assert_allclose(dequantize(q), [8 / 7, -2.0, 4 / 7])


def test_quantize_all_zero_group():
    q = quantize([0.0, 0.0, 0.0, 0.0], INT4)
    assert q.scales.item() == 1.0
    assert q.codes.tolist() == [0, 0, 0, 0]
    assert dequantize(q).tolist() == [0, 0, 0, 0]


def test_quantize_per_channel_example():
    q = quantize(np.array([[1.0], [4.0]]), FORMATS["int4"])
    np.testing.assert_allclose(q.scales.ravel(), [1 / 7, 4 / 7])
    assert q.codes.ravel().tolist() == [7, 7]


def test_rounding_is_half_to_even():
    # scale = 7/7 = 1 -> 0.5 and 2.5 are exact ties
    q = quantize([7.0, 0.5, 2.5, -1.5], INT4)
    assert q.codes.tolist() == [7, 0, 2, -2]


def test_quantize_errors():
    with pytest.raises(DomainError):
        quantize([-1.0, 2.0], UINT4)
    with pytest.raises(DomainError):
        quantize([], INT4)


@pytest.mark.parametrize("s, expected", [(1.0, 1.0), (0.3, 0.3125), (500.0, 448.0)])
def test_encode_fp8_examples(s, expected):
    assert encode_scale_fp8(s) == expected


def test_encode_fp8_matches_enumeration():
    rng = np.random.default_rng(1)
    samples = np.concatenate([
        np.exp(rng.uniform(np.log(2.0**-9), np.log(600), 5000)),
        e4m3_values()[1:],
        (e4m3_values()[1:-1] + e4m3_values()[2:]) / 2,  # exact midpoints
    ])
    for s in samples:
        assert encode_scale_fp8(float(s)) == nearest_e4m3(float(s)), s


@pytest.mark.parametrize("s, expected", [(1.0, 1.0), (0.3, 0.5), (5.0, 8.0), (0.25, 0.25)])
def test_encode_pow2_examples(s, expected):
    assert encode_scale_pow2(s) == expected


@pytest.mark.parametrize("fn", [encode_scale_fp8, encode_scale_pow2])
@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_encode_rejects_non_positive(fn, bad):
    with pytest.raises(DomainError):
        fn(bad)


def test_silu_values():
    assert silu(0.0) == 0.0
    assert silu(1.0) == pytest.approx(0.7311, abs=1e-4)
    assert silu(-1.0) == pytest.approx(-0.269, abs=1e-3)
    x = np.linspace(-20, 20, 400001)
    assert silu(x).min() == pytest.approx(-0.278, abs=1e-3)
    assert silu(x).min() >= -0.2785


def test_relu_values():
    assert relu(-2.0) == 0.0
    assert relu(3.0) == 3.0
    assert relu(np.linspace(-5, 5, 101)).min() >= 0.0


def test_code_utilization():
    x = np.linspace(-1, 1, 20001)
    used, total = code_utilization(quantize(silu(x), INT4))
    assert total == 16 and used in (10, 11)
    assert code_utilization(quantize(relu(x), UINT4)) == (16, 16)
    assert code_utilization(quantize(np.zeros(10), INT4)) == (1, 16)


def test_sqnr_values():
    ref = np.array([1.0, -2.0, 3.0])
    assert sqnr(ref, ref) == math.inf
    assert sqnr(ref, np.zeros(3)) == pytest.approx(0.0)
    assert sqnr(ref, ref * 1.01) == pytest.approx(40.0)
    with pytest.raises(DomainError):
        sqnr(ref, ref[:2])
    with pytest.raises(DomainError):
        sqnr(np.zeros(3), ref)


def scalar_block_quantize(x, fmt):
    """Independent path: quantize each block separately with a per-tensor format."""
    per_tensor = QuantFormat("pt", fmt.bits, fmt.signed, "per-tensor", None, fmt.scale_kind)
    rows = x.reshape(x.shape[0], -1)
    codes = np.empty(rows.shape, dtype=np.int64)
    for c, row in enumerate(rows):
        for start in range(0, row.size, fmt.block_size):
            codes[c, start:start + fmt.block_size] = quantize(row[start:start + fmt.block_size], per_tensor).codes
    return codes.reshape(x.shape)


@pytest.mark.parametrize("name", ["mxint8", "int4-vsq", "int4-fp8s"])
def test_per_block_equals_per_block_scalar_path(name):
    fmt = FORMATS[name]
    rng = np.random.default_rng(3)
    for _ in range(50):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        x = rng.standard_normal(shape) * np.exp(rng.uniform(-4, 4))
        np.testing.assert_array_equal(quantize(x, fmt).codes, scalar_block_quantize(x, fmt))


def test_blocks_do_not_straddle_channels():
    x = np.zeros((2, 20))
    x[0, :] = 1.0
    x[1, :] = 100.0
    q = quantize(x, FORMATS["int4-vsq"])
    assert q.scales.shape == (2, 2)
    np.testing.assert_allclose(q.scales[0], 1 / 7)
    np.testing.assert_allclose(q.scales[1], 100 / 7)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 40)), elements=finite),
       st.sampled_from(["int8", "int4", "int4-vsq", "mxint8"]))
def test_roundtrip_error_bound(x, name):
    fmt = FORMATS[name]
    q = quantize(x, fmt)
    err = np.abs(x - dequantize(q))
    assert np.all(err <= q.scale_map() / 2 * (1 + 1e-12) + 1e-300)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=finite))
def test_max_magnitude_maps_to_qmax(x):
    q = quantize(x, INT4)
    i = int(np.argmax(np.abs(x)))
    if x[i] != 0:
        assert abs(q.codes[i]) == 7


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 50), elements=finite))
def test_codes_monotone_in_input(x):
    q = quantize(x, INT4)
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(q.codes[order]) >= 0)


def test_codes_never_use_most_negative_value():
    rng = np.random.default_rng(5)
    q = quantize(rng.standard_normal((8, 64)), FORMATS["int4-fp8s"])
    assert q.codes.min() >= -7 and q.codes.max() <= 7


def test_fp16_passthrough():
    x = np.array([0.1, -3.3, 7.0])
    q = quantize(x, "fp16")
    np.testing.assert_array_equal(dequantize(q), x)


def test_block_quantizer_estimator():
    rng = np.random.default_rng(2)
    calib = rng.standard_normal((4, 32))
    est = BlockQuantizer("int4-vsq").fit(calib)
    codes = est.transform(calib)
    np.testing.assert_array_equal(codes, quantize(calib, "int4-vsq").codes)
    np.testing.assert_allclose(est.inverse_transform(codes), dequantize(quantize(calib, "int4-vsq")))
    # new data beyond the calibrated range saturates
    assert np.abs(est.transform(calib * 10)).max() == 7
    assert est.get_params() == {"fmt": "int4-vsq"}
    assert est.fit_transform(calib).shape == calib.shape
