import math

import numpy as np
import pytest

from spgm import tensor as T
from spgm.layers import (ConfigError, ConvParams, InputTooShortError,
                         TransformerLayerParams, conv1d, conv_transpose1d,
                         multi_head_attention, pe_at, sinusoidal_pe,
                         transformer_layer_forward)
from spgm.tensor import Tape, Tensor, tsum

from conftest import SEEDS, gradcheck


def conv(kernel, bias=None, stride=1):
    kernel = np.asarray(kernel, dtype=float)
    return ConvParams(Tensor(kernel), None if bias is None else Tensor(bias), stride)


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 9))
    assert np.array_equal(conv1d(Tensor(x), conv([[[1.0]]])).data, x)


def test_conv1d_hand_case():
    y = conv1d(Tensor([[1.0, 2, 3, 4]]), conv([[[1.0, 1.0]]], stride=2))
    assert np.array_equal(y.data, [[3, 7]])


def test_conv1d_one_second_length():
    p = conv(np.zeros((2, 1, 16)), stride=8)
    assert conv1d(Tensor(np.zeros((1, 8000))), p).shape == (2, 999)


def test_conv1d_too_short():
    with pytest.raises(InputTooShortError):
        conv1d(Tensor(np.zeros((1, 3))), conv(np.zeros((1, 1, 4)), stride=2))


def test_kernel_shorter_than_stride_rejected():
    with pytest.raises(ConfigError):
        conv(np.zeros((1, 1, 2)), stride=4)


def test_conv_transpose_single_frame_gives_kernel():
    k = np.random.default_rng(1).normal(size=(1, 1, 6))
    y = conv_transpose1d(Tensor([[1.0]]), conv(k, stride=3))
    np.testing.assert_allclose(y.data, k[0])


def test_conv_transpose_one_second_length():
    p = conv(np.zeros((4, 1, 16)), stride=8)
    assert conv_transpose1d(Tensor(np.zeros((4, 999))), p).shape == (1, 8000)


@pytest.mark.parametrize("seed", range(10))
def test_conv_transpose_is_adjoint(seed):
    rng = np.random.default_rng(seed)
    cout, cin, ks, stride = rng.integers(1, 4), rng.integers(1, 4), rng.integers(2, 7), 0
    stride = int(rng.integers(1, ks + 1))
    t = int(rng.integers(ks, 40))
    p = conv(rng.normal(size=(cout, cin, ks)), stride=stride)
    x = rng.normal(size=(cin, t))
    y_len = (t - ks) // stride + 1
    y = rng.normal(size=(cout, y_len))
    lhs = np.sum(conv1d(Tensor(x), p).data * y)
    xt = conv_transpose1d(Tensor(y), p).data
    # transposed output may be shorter than x when (t - ks) % stride != 0
    rhs = np.sum(x[:, :xt.shape[1]] * xt)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradchecks(seed):
    rng = np.random.default_rng(seed)
    k, b = rng.normal(size=(3, 2, 4)), rng.normal(size=3)
    x = rng.normal(size=(2, 13))
    assert gradcheck(lambda t: conv1d(t, ConvParams(Tensor(k), Tensor(b), 2)), x, rng) < 1e-4
    assert gradcheck(lambda t: conv1d(Tensor(x), ConvParams(t, Tensor(b), 2)), k, rng) < 1e-4
    assert gradcheck(lambda t: conv1d(Tensor(x), ConvParams(Tensor(k), t, 2)), b, rng) < 1e-4
    y, bt = rng.normal(size=(3, 6)), rng.normal(size=2)
    assert gradcheck(lambda t: conv_transpose1d(t, ConvParams(Tensor(k), Tensor(bt), 2)), y, rng) < 1e-4
    assert gradcheck(lambda t: conv_transpose1d(Tensor(y), ConvParams(t, Tensor(bt), 2)), k, rng) < 1e-4
    assert gradcheck(lambda t: conv_transpose1d(Tensor(y), ConvParams(Tensor(k), t, 2)), bt, rng) < 1e-4


def _layer(seed, n=8, f=16, h=2):
    layer = TransformerLayerParams.init(np.random.default_rng(seed), n, f, h)
    # non-trivial norms and biases so every parameter gets a distinct gradient
    rng = np.random.default_rng(seed + 1000)
    for name, t in layer.named_parameters():
        if name.startswith("b") or name.endswith("_b"):
            t.assign(rng.normal(scale=0.1, size=t.shape))
        elif name.endswith("_g"):
            t.assign(1 + rng.normal(scale=0.1, size=t.shape))
    return layer


def test_layer_param_count_closed_form():
    layer = TransformerLayerParams.init(np.random.default_rng(0), 256, 1024, 8)
    enumerated = sum(t.size for _, t in layer.named_parameters())
    assert enumerated == TransformerLayerParams.param_count(256, 1024) == 789_760


def test_heads_must_divide_channels():
    with pytest.raises(ConfigError):
        TransformerLayerParams.init(np.random.default_rng(0), 10, 16, 4)


def test_mha_single_step_is_value_out_projection():
    p = _layer(0)
    x = Tensor(np.random.default_rng(2).normal(size=(1, 8)))
    expect = T.linear(T.linear(x, p.wv, p.bv), p.wo, p.bo)
    np.testing.assert_allclose(multi_head_attention(x, p).data, expect.data, atol=1e-12)


def test_mha_permutation_equivariant():
    rng = np.random.default_rng(3)
    p = _layer(1)
    x = rng.normal(size=(7, 8))
    perm = rng.permutation(7)
    out = multi_head_attention(Tensor(x), p).data
    out_p = multi_head_attention(Tensor(x[perm]), p).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)
    layer_out = transformer_layer_forward(Tensor(x), p).data
    np.testing.assert_allclose(transformer_layer_forward(Tensor(x[perm]), p).data,
                               layer_out[perm], atol=1e-12)


def test_mha_identical_rows_average_values():
    p = _layer(2)
    row = np.random.default_rng(4).normal(size=8)
    x = Tensor(np.tile(row, (5, 1)))
    out = multi_head_attention(x, p).data
    one = multi_head_attention(Tensor(row[None]), p).data
    np.testing.assert_allclose(out, np.tile(one, (5, 1)), atol=1e-12)


def test_mha_batched_matches_loop():
    p = _layer(3)
    x = np.random.default_rng(5).normal(size=(3, 6, 8))
    batched = multi_head_attention(Tensor(x), p).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], multi_head_attention(Tensor(x[i]), p).data,
                                   atol=1e-12)


def test_transformer_shape_preserved():
    p = _layer(4)
    assert transformer_layer_forward(Tensor(np.zeros((11, 8)) + 0.3), p).shape == (11, 8)


@pytest.mark.parametrize("seed", SEEDS)
def test_transformer_layer_gradcheck(seed):
    rng = np.random.default_rng(seed)
    p = _layer(seed)
    x = rng.normal(size=(2, 5, 8))
    assert gradcheck(lambda t: transformer_layer_forward(t, p), x, rng) < 1e-4
    # spot-check every weight tensor on a few entries
    for name, w in p.named_parameters():
        if name == "bk":
            continue
        def f(t, name=name):
            q = TransformerLayerParams(**{**{k: v for k, v in p.named_parameters()}, name: t},
                                       heads=p.heads)
            return transformer_layer_forward(Tensor(x), q)
        assert gradcheck(f, w.data, rng, max_elements=4) < 1e-4, name


def test_key_bias_gradient_vanishes():
    # adding b to every key shifts each query's logits by a constant
    p = _layer(2)
    x = np.random.default_rng(2).normal(size=(5, 8))
    with Tape() as tape:
        tape.backward(tsum(transformer_layer_forward(Tensor(x), p)))
    assert np.max(np.abs(p.bk.grad)) < 1e-12
    assert np.max(np.abs(p.bq.grad)) > 1e-6


def test_positional_encoding():
    pe = sinusoidal_pe(10, 6).data
    assert pe.shape == (10, 6)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1])
    for t in (0.0, 1.3, 7.0):
        a, b = pe_at([t, t + 2 * math.pi], 6)[:, 0]
        assert a == pytest.approx(b, abs=1e-12)
    np.testing.assert_allclose(pe[3, 0], math.sin(3.0))
    np.testing.assert_allclose(pe[3, 3], math.cos(3.0 / 10000 ** (2 / 6)))
    with pytest.raises(ConfigError):
        sinusoidal_pe(4, 5)
