import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import conv_loops
from refqsr.errors import InvalidPolicyError
from refqsr.quantizer import (
    BitPolicy,
    LayerQuantConfig,
    QuantParams,
    calibrate,
    derive_bit_policy,
    fake_quant,
    quantize,
    quantize_codes,
    quantized_conv,
    step_size,
)
from refqsr.tensor_core import conv2d


def random_case(rng, max_bits=16):
    """One randomized (x, params) draw; x spills past both clip bounds."""
    bits = int(rng.integers(2, max_bits + 1))
    alpha = float(rng.uniform(-5, 5))
    beta = alpha + float(rng.uniform(1e-3, 10))
    lo, hi = alpha - 0.5 * (beta - alpha), beta + 0.5 * (beta - alpha)
    x = rng.uniform(lo, hi, size=int(rng.integers(1, 64))).astype(np.float32)
    return x, QuantParams(alpha, beta, bits)


def nearest_level_codes(x, p):
    """Exhaustive nearest-grid-point search (ties toward the higher code)."""
    levels = p.alpha + np.arange(2**p.bits, dtype=np.float64) * step_size(p)
    xc = np.clip(np.asarray(x, dtype=np.float64), p.alpha, p.beta)
    d = np.abs(xc[:, None] - levels[None, :])
    # last minimum = highest code among ties
    return len(levels) - 1 - np.argmin(d[:, ::-1], axis=1)


def check_idempotent(x, p):
    q = quantize(x, p)
    return np.array_equal(quantize(q, p), q)


def check_monotone(x, p):
    xs = np.sort(x)
    return bool(np.all(np.diff(quantize(xs, p).astype(np.float64)) >= 0))


def check_levels(x, p):
    return len(np.unique(quantize(x, p))) <= 2**p.bits


def check_error_bound(x, p):
    inside = np.clip(x.astype(np.float64), p.alpha, p.beta).astype(np.float32)
    err = np.abs(quantize(inside, p).astype(np.float64) - inside.astype(np.float64))
    # the float32 output cast adds at most half an ulp at the bound magnitude
    half_ulp = 0.5 * float(np.spacing(np.float32(max(abs(p.alpha), abs(p.beta)))))
    return bool(np.all(err <= step_size(p) / 2 + 1e-7 + half_ulp))


def check_codes(x, p):
    return np.array_equal(quantize_codes(x, p), nearest_level_codes(x, p))


def test_step_size_examples():
    assert step_size(QuantParams(0, 1, 2)) == pytest.approx(1 / 3)
    assert step_size(QuantParams(-1, 1, 8)) == pytest.approx(2 / 255)
    assert step_size(QuantParams(0, 255, 8)) == 1.0


def test_quantize_examples():
    p = QuantParams(0.0, 1.0, 2)
    assert quantize(np.array([1.0]), p)[0] == 1.0
    assert np.all(quantize(np.array([-3.0, 0.0]), p) == 0.0)
    assert quantize(np.array([0.4]), p)[0] == np.float32(1 / 3)
    x = np.random.default_rng(0).standard_normal(1000).astype(np.float32)
    p32 = QuantParams(float(x.min()), float(x.max()), 32)
    assert np.abs(quantize(x, p32) - x).max() <= step_size(p32) / 2 + 1e-7


def test_quant_params_validation():
    with pytest.raises(ValueError):
        QuantParams(1.0, 1.0, 8)
    with pytest.raises(ValueError):
        QuantParams(0.0, 1.0, 1)
    with pytest.raises(ValueError):
        QuantParams(0.0, 1.0, 33)


@pytest.mark.parametrize("check", [check_idempotent, check_monotone, check_levels, check_error_bound])
def test_quantizer_properties_randomized(check):
    rng = np.random.default_rng(zlib.crc32(check.__name__.encode()))
    for _ in range(2000):
        x, p = random_case(rng)
        assert check(x, p), (x, p)


def test_integer_code_oracle_randomized():
    rng = np.random.default_rng(11)
    for _ in range(2000):
        x, p = random_case(rng, max_bits=8)
        assert check_codes(x, p), (x, p)


@given(arrays(np.float32, st.integers(1, 40), elements=st.floats(-100, 100, width=32)),
       st.floats(-50, 50), st.floats(1e-2, 50), st.integers(2, 12))
def test_quantizer_hypothesis(x, alpha, width, bits):
    p = QuantParams(alpha, alpha + width, bits)
    q = quantize(x, p)
    assert np.all(q >= np.float32(p.alpha)) and np.all(q <= np.float32(p.beta))
    assert check_idempotent(x, p) and check_monotone(x, p) and check_levels(x, p)
    assert check_error_bound(x, p)


def test_calibrate_and_fake_quant():
    x = np.array([0.0, 0.5, 2.0], dtype=np.float32)
    p = calibrate(x, 4)
    assert (p.alpha, p.beta, p.bits) == (0.0, 2.0, 4)
    assert calibrate(np.full(4, 3.0), 8) is None
    c = np.full(5, 3.0, dtype=np.float32)
    assert np.array_equal(fake_quant(c, 4), c)
    assert fake_quant(x, 32) is x
    assert np.array_equal(fake_quant(x, 2, (0.0, 1.0)), quantize(x, QuantParams(0.0, 1.0, 2)))


def test_quantized_conv():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    off = LayerQuantConfig.passthrough()
    assert np.array_equal(quantized_conv(x, w, b, off, padding=1), conv2d(x, w, b, padding=1))
    tight = LayerQuantConfig(QuantParams(float(w.min()), float(w.max()), 32),
                             QuantParams(float(x.min()), float(x.max()), 32))
    ref = conv2d(x, w, b, padding=1)
    got = quantized_conv(x, w, b, tight, padding=1)
    assert np.abs(got - ref).max() <= 1e-4 * np.abs(ref).max()
    # 2-bit weights on [-1, 1] take values {-1, -1/3, 1/3, 1}
    wp = QuantParams(-1.0, 1.0, 2)
    cfg = LayerQuantConfig(wp, None, True, False)
    wq = quantize(w, wp)
    grid = np.array([-1.0, -1 / 3, 1 / 3, 1.0])
    assert np.all(np.abs(wq.reshape(-1, 1) - grid).min(axis=1) < 1e-7)
    assert np.abs(quantized_conv(x, w, b, cfg, padding=1) - conv_loops(x, wq, b, 1, 1)).max() < 1e-5


@pytest.mark.parametrize("hi,lo,med", [(8, 4, 6), (8, 3, 6), (4, 3, 4), (8, 8, 8), (32, 2, 17)])
def test_b_medium(hi, lo, med):
    p = derive_bit_policy(hi, lo)
    assert p.b_medium == med and lo <= p.b_medium <= hi


def test_policy_validation_and_override():
    with pytest.raises(InvalidPolicyError):
        derive_bit_policy(3, 8)
    with pytest.raises(InvalidPolicyError):
        derive_bit_policy(8, 1)
    p = derive_bit_policy(8, 3, {5: 6})
    assert p.high_bits(5) == 6 and p.medium_bits(5) == 5 and p.high_bits(4) == 8
    with pytest.raises(TypeError):
        p.per_layer_override[1] = 4
    assert BitPolicy(8, 3).to_dict()["b_medium"] == 6
