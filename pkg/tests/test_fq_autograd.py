import numpy as np
import pytest

from errors import ConfigError, FormatError, ForwardNotCalledError, ShapeError, TensorFileError
from formats import GseSpec, nf4_quantize
from fq_autograd import (
    LoraLinear,
    QuantConfig,
    backward,
    forward,
    identity_quantizer_mode,
    load_layer,
    qcd_matmul,
    quantized_mode,
    save_layer,
)
from gse_kernels import GroupAxis, dequantize_matrix, gse_gemm, quantize_matrix

ROWS = GroupAxis.ALONG_ROWS
COLS = GroupAxis.ALONG_COLS


def make_layer(rng, oc=8, ic=8, rank=4, b_std=0.5):
    w = rng.normal(0.0, 1.0 / np.sqrt(ic), size=(oc, ic))
    layer = LoraLinear.from_dense(w, rank, rng, a_std=0.3)
    layer.b = rng.normal(0.0, b_std, size=(oc, rank))
    return layer


# --------------------------------------------------------------------------
# QuantConfig
# --------------------------------------------------------------------------

def test_notation_round_trip():
    cfg = QuantConfig(6, 7, group_size=16, rank=8)
    assert cfg.notation == "4-6-7"
    assert cfg.adapter_bits == 6
    assert QuantConfig.from_notation(cfg.notation, group_size=16, rank=8) == cfg
    assert QuantConfig.from_dict(cfg.to_dict()) == cfg


def test_sixteen_bit_notation_is_identity_baseline():
    cfg = QuantConfig.from_notation("4-16-16", rank=64)
    assert cfg.identity and cfg.adapter_bits == 16
    assert cfg.act_spec is None and cfg.grad_spec is None


@pytest.mark.parametrize("text", ["8-8-8", "4-8", "four-8-8", "4-4-8"])
def test_bad_notation(text):
    with pytest.raises(ConfigError):
        QuantConfig.from_notation(text)


def test_bits_out_of_range():
    with pytest.raises(ConfigError):
        QuantConfig(act_bits=4)
    with pytest.raises(ConfigError):
        QuantConfig(act_bits=16)
    with pytest.raises(ConfigError):
        QuantConfig(rank=0)


def test_identity_mode_toggles_back():
    cfg = QuantConfig(8, 8, group_size=8, rank=4)
    on = identity_quantizer_mode(cfg)
    assert on.identity and on.act_spec is None
    assert quantized_mode(on) == cfg
    assert cfg.act_spec == GseSpec(8, 8)


# --------------------------------------------------------------------------
# QCD matmul
# --------------------------------------------------------------------------

def test_qcd_zero_operand():
    spec = GseSpec(8, 8)
    out = qcd_matmul(np.random.default_rng(0).normal(size=(3, 16)), np.zeros((16, 2)), spec, spec)
    np.testing.assert_array_equal(out, np.zeros((3, 2)))


def test_qcd_exact_on_small_integers():
    rng = np.random.default_rng(1)
    p = rng.integers(-127, 128, size=(5, 24)).astype(float)
    q = rng.integers(-127, 128, size=(24, 3)).astype(float)
    spec = GseSpec(8, 8)
    np.testing.assert_array_equal(qcd_matmul(p, q, spec, spec), p @ q)


def test_qcd_matches_dequantized_oracle():
    rng = np.random.default_rng(2)
    p, q = rng.normal(size=(4, 64)), rng.normal(size=(64, 3))
    spec = GseSpec(6, 32)
    pd_ = dequantize_matrix(quantize_matrix(p, ROWS, spec))
    qd = dequantize_matrix(quantize_matrix(q, COLS, spec))
    bound = 1e-12 * (np.abs(pd_) @ np.abs(qd))
    assert np.all(np.abs(qcd_matmul(p, q, spec, spec) - pd_ @ qd) <= bound)
    np.testing.assert_array_equal(qcd_matmul(p, q, None, None), p @ q)
    with pytest.raises(ShapeError):
        qcd_matmul(p, q.T, spec, spec)


# --------------------------------------------------------------------------
# Forward
# --------------------------------------------------------------------------

def test_zero_adapter_leaves_frozen_path():
    rng = np.random.default_rng(3)
    layer = make_layer(rng)
    layer.a = np.zeros_like(layer.a)
    cfg = QuantConfig(8, 8, group_size=8, rank=4)
    x = rng.normal(size=(4, 8))
    base = qcd_matmul(x, layer.dense_weight().T, cfg.act_spec, cfg.act_spec)
    np.testing.assert_array_equal(forward(x, layer, cfg), base)


def test_identity_forward_is_dense_lora():
    rng = np.random.default_rng(4)
    layer = make_layer(rng)
    cfg = identity_quantizer_mode(QuantConfig(8, 8, group_size=8, rank=4))
    x = rng.normal(size=(3, 8))
    expected = x @ layer.dense_weight().T + (x @ layer.a.T) @ layer.b.T
    np.testing.assert_allclose(forward(x, layer, cfg), expected, rtol=1e-14, atol=1e-14)


def test_forward_is_the_composition_of_primitives():
    rng = np.random.default_rng(5)
    layer = make_layer(rng)
    cfg = QuantConfig(8, 8, group_size=8, rank=4)
    act, adapter = cfg.act_spec, cfg.adapter_spec
    x = rng.normal(size=(2, 8))
    xq = quantize_matrix(x, ROWS, act)
    base = gse_gemm(xq, quantize_matrix(layer.dense_weight().T, COLS, act))
    h = gse_gemm(xq, quantize_matrix(layer.a.T, COLS, adapter))
    lora = gse_gemm(quantize_matrix(h, ROWS, adapter), quantize_matrix(layer.b.T, COLS, adapter))
    y = forward(x, layer, cfg)
    np.testing.assert_array_equal(y, base + lora)
    exact = x @ layer.dense_weight().T + (x @ layer.a.T) @ layer.b.T
    assert np.linalg.norm(y - exact) <= 0.05 * np.linalg.norm(exact)


def test_identical_rows_give_identical_outputs():
    rng = np.random.default_rng(6)
    layer = make_layer(rng)
    row = rng.normal(size=(1, 8))
    y = forward(np.repeat(row, 3, axis=0), layer, QuantConfig(5, 5, group_size=8, rank=4))
    np.testing.assert_array_equal(y[0], y[1])
    np.testing.assert_array_equal(y[0], y[2])


def test_forward_validates_input():
    rng = np.random.default_rng(7)
    layer = make_layer(rng)
    layer.name = "proj"
    cfg = QuantConfig(8, 8, group_size=8, rank=4)
    with pytest.raises(ShapeError):
        forward(np.ones((2, 7)), layer, cfg)
    bad = np.ones((2, 8))
    bad[1, 3] = np.nan
    with pytest.raises(FormatError, match="proj"):
        forward(bad, layer, cfg)


def test_layer_shape_checks():
    w = nf4_quantize(np.ones((8, 6)))
    with pytest.raises(ShapeError):
        LoraLinear(w, np.zeros((2, 5)), np.zeros((8, 2)))
    with pytest.raises(ShapeError):
        LoraLinear(w, np.zeros((2, 6)), np.zeros((8, 3)))


# --------------------------------------------------------------------------
# Backward
# --------------------------------------------------------------------------

def test_backward_needs_forward():
    layer = make_layer(np.random.default_rng(8))
    with pytest.raises(ForwardNotCalledError, match="forward not called"):
        backward(np.ones((2, 8)), layer, QuantConfig(8, 8, group_size=8, rank=4))


def test_zero_upstream_gradient():
    rng = np.random.default_rng(9)
    layer = make_layer(rng)
    cfg = QuantConfig(6, 6, group_size=8, rank=4)
    forward(rng.normal(size=(3, 8)), layer, cfg)
    grads = backward(np.zeros((3, 8)), layer, cfg)
    assert grads.d_a.shape == (4, 8) and grads.d_b.shape == (8, 4) and grads.d_x.shape == (3, 8)
    for g in (grads.d_a, grads.d_b, grads.d_x):
        assert not g.any()


def test_backward_shape_mismatch():
    rng = np.random.default_rng(10)
    layer = make_layer(rng)
    cfg = QuantConfig(8, 8, group_size=8, rank=4)
    forward(rng.normal(size=(3, 8)), layer, cfg)
    with pytest.raises(ShapeError):
        backward(np.ones((2, 8)), layer, cfg)


def test_identity_backward_is_analytic_lora_gradient():
    rng = np.random.default_rng(11)
    layer = make_layer(rng, oc=6, ic=10, rank=3)
    cfg = identity_quantizer_mode(QuantConfig(8, 8, group_size=8, rank=3))
    x = rng.normal(size=(5, 10))
    d_y = rng.normal(size=(5, 6))
    forward(x, layer, cfg)
    grads = backward(d_y, layer, cfg)
    a, b, w = layer.a, layer.b, layer.dense_weight()
    np.testing.assert_allclose(grads.d_a, b.T @ d_y.T @ x, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(grads.d_b, d_y.T @ x @ a.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(grads.d_x, d_y @ (w + b @ a), rtol=1e-12, atol=1e-12)


def test_backward_is_the_composition_of_primitives():
    rng = np.random.default_rng(12)
    layer = make_layer(rng)
    cfg = QuantConfig(7, 6, adapter_bits=8, group_size=8, rank=4)
    act, grad, adapter = cfg.act_spec, cfg.grad_spec, cfg.adapter_spec
    x = rng.normal(size=(4, 8))
    d_y = rng.normal(size=(4, 8))
    forward(x, layer, cfg)
    grads = backward(d_y, layer, cfg)

    a, b, w = layer.a, layer.b, layer.dense_weight()
    xq = quantize_matrix(x, ROWS, act)
    g_ra = gse_gemm(quantize_matrix(b.T, ROWS, adapter), quantize_matrix(d_y.T, COLS, grad))
    d_a = gse_gemm(quantize_matrix(g_ra, ROWS, grad), quantize_matrix(dequantize_matrix(xq), COLS, act))
    h = gse_gemm(xq, quantize_matrix(a.T, COLS, adapter))
    d_b = gse_gemm(quantize_matrix(d_y.T, ROWS, grad), quantize_matrix(h, COLS, adapter))
    dyq = quantize_matrix(d_y, ROWS, grad)
    g_br = gse_gemm(dyq, quantize_matrix(b, COLS, adapter))
    d_x = gse_gemm(dyq, quantize_matrix(w, COLS, act)) + gse_gemm(
        quantize_matrix(g_br, ROWS, grad), quantize_matrix(a, COLS, adapter))

    np.testing.assert_array_equal(grads.d_a, d_a)
    np.testing.assert_array_equal(grads.d_b, d_b)
    np.testing.assert_array_equal(grads.d_x, d_x)


@pytest.mark.parametrize("alpha", [0.25, 2.0, 8.0])
def test_power_of_two_scaling_is_exact(alpha):
    rng = np.random.default_rng(13)
    layer = make_layer(rng)
    cfg = QuantConfig(6, 5, group_size=8, rank=4)
    forward(rng.normal(size=(4, 8)), layer, cfg)
    d_y = rng.normal(size=(4, 8))
    base = backward(d_y, layer, cfg)
    scaled = backward(alpha * d_y, layer, cfg)
    np.testing.assert_array_equal(scaled.d_a, alpha * base.d_a)
    np.testing.assert_array_equal(scaled.d_b, alpha * base.d_b)
    np.testing.assert_array_equal(scaled.d_x, alpha * base.d_x)


def _relative_error(got, ref):
    return np.linalg.norm(got - ref) / np.linalg.norm(ref)


def test_gradient_error_shrinks_with_grad_bits():
    errors = {bits: [] for bits in (5, 6, 7, 8)}
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        layer = make_layer(rng, oc=16, ic=16, rank=4)
        x = rng.normal(size=(8, 16))
        d_y = rng.normal(size=(8, 16))
        exact_cfg = identity_quantizer_mode(QuantConfig(8, 8, group_size=8, rank=4))
        forward(x, layer, exact_cfg)
        exact = backward(d_y, layer, exact_cfg)
        for bits in errors:
            cfg = QuantConfig(8, bits, adapter_bits=8, group_size=8, rank=4)
            forward(x, layer, cfg)
            got = backward(d_y, layer, cfg)
            errors[bits].append(np.mean([
                _relative_error(got.d_a, exact.d_a),
                _relative_error(got.d_b, exact.d_b),
                _relative_error(got.d_x, exact.d_x),
            ]))
    means = [np.mean(errors[bits]) for bits in (5, 6, 7, 8)]
    assert means[0] >= means[1] >= means[2] >= means[3]


def test_frozen_weight_never_changes():
    rng = np.random.default_rng(14)
    layer = make_layer(rng)
    before = layer.frozen_bytes()
    cfg = QuantConfig(5, 5, group_size=8, rank=4)
    for _ in range(3):
        forward(rng.normal(size=(2, 8)), layer, cfg)
        grads = backward(rng.normal(size=(2, 8)), layer, cfg)
        layer.a = layer.a - 0.1 * grads.d_a
        layer.b = layer.b - 0.1 * grads.d_b
    assert layer.frozen_bytes() == before


def test_weight_operand_is_cached_and_clone_is_independent():
    layer = make_layer(np.random.default_rng(15))
    spec = GseSpec(8, 8)
    assert layer.weight_operand(spec, True) is layer.weight_operand(spec, True)
    twin = layer.clone()
    twin.a[0, 0] += 1.0
    assert twin.a[0, 0] != layer.a[0, 0]
    assert twin.frozen_bytes() == layer.frozen_bytes()


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    layer = make_layer(np.random.default_rng(16), oc=12, ic=10, rank=3)
    layer.name = "block0.q"
    cfg = QuantConfig(6, 8, group_size=16, rank=3)
    save_layer(tmp_path / "a.gsql", layer, cfg)
    save_layer(tmp_path / "b.gsql", layer, cfg)
    assert (tmp_path / "a.gsql").read_bytes() == (tmp_path / "b.gsql").read_bytes()

    loaded, loaded_cfg = load_layer(tmp_path / "a.gsql")
    assert loaded_cfg == cfg
    assert loaded.name == "block0.q"
    assert loaded.frozen_bytes() == layer.frozen_bytes()
    np.testing.assert_array_equal(loaded.a, layer.a.astype(np.float32))
    np.testing.assert_array_equal(loaded.b, layer.b.astype(np.float32))


def test_checkpoint_rejects_damage(tmp_path):
    layer = make_layer(np.random.default_rng(17))
    path = tmp_path / "l.gsql"
    save_layer(path, layer, QuantConfig(8, 8, group_size=8, rank=4))
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(TensorFileError):
        load_layer(path)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(TensorFileError):
        load_layer(path)
