import numpy as np
import pytest

from rnp.nets import (Dense, EncoderWeights, MlpWeights, ResBlock, RnnWeights, dense_apply, encoder_apply,
                      encoder_output_size, init_encoder, mlp_apply, rnn_step)
from rnp.tape import Tensor, grad_check, ops


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def elu(v):
    return np.where(v > 0, v, np.expm1(np.minimum(v, 0)))


def conv_ref(x, k, stride, pad):
    """Direct nested-loop cross-correlation, x (C, H, W), k (O, C, kh, kw)."""
    C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - kh) // stride + 1, (W + 2 * pad - kw) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                out[o, i, j] = np.sum(xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw] * k[o])
    return out


def test_zero_mlp_with_sigmoid_gives_half():
    w = MlpWeights([Dense(T(np.zeros((5, 4))), T(np.zeros(4))), Dense(T(np.zeros((4, 3))), T(np.zeros(3)))],
                   final="sigmoid")
    np.testing.assert_array_equal(mlp_apply(w, T(np.arange(5.0))).data, [0.5] * 3)


def test_single_identity_layer():
    x = np.array([0.3, -1.2, 4.0])
    w = MlpWeights([Dense(T(np.eye(3)), T(np.zeros(3)))])
    np.testing.assert_array_equal(mlp_apply(w, T(x)).data, x)


def test_mlp_matches_straight_line_evaluation():
    rng = np.random.default_rng(11)
    Ws = [rng.standard_normal(s) for s in ((7, 5), (5, 5), (5, 2))]
    bs = [rng.standard_normal(s[1]) for s in ((7, 5), (5, 5), (5, 2))]
    x = rng.standard_normal(7)
    h1 = elu(x @ Ws[0] + bs[0])
    h2 = elu(h1 @ Ws[1] + bs[1])
    expected = np.tanh(h2 @ Ws[2] + bs[2])
    w = MlpWeights([Dense(T(W), T(b)) for W, b in zip(Ws, bs)], final="tanh")
    np.testing.assert_allclose(mlp_apply(w, T(x)).data, expected, rtol=1e-13)


def test_mlp_rejects_unchained_layers():
    with pytest.raises(ValueError, match="chain"):
        MlpWeights([Dense(T(np.zeros((3, 4))), T(np.zeros(4))), Dense(T(np.zeros((5, 2))), T(np.zeros(2)))])


def test_mlp_rejects_wrong_input_dim():
    w = MlpWeights([Dense(T(np.zeros((3, 4))), T(np.zeros(4)))])
    with pytest.raises(ValueError, match="input dim"):
        mlp_apply(w, T(np.zeros(5)))


def test_per_sample_weights_match_separate_calls():
    rng = np.random.default_rng(2)
    W, b, x = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    out = dense_apply(Dense(T(W), T(b)), T(x)).data
    for i in range(3):
        np.testing.assert_allclose(out[i], x[i] @ W[i] + b[i], rtol=1e-13)


def test_zero_rnn_gives_zero_state():
    w = RnnWeights(T(np.zeros((4, 4))), T(np.zeros((3, 4))), T(np.zeros(4)))
    np.testing.assert_array_equal(rnn_step(w, T(np.ones(4)), T(np.ones(3))).data, np.zeros(4))


def test_rnn_linear_regime_passes_input_through():
    x = np.array([1e-4, -2e-4, 3e-4])
    w = RnnWeights(T(np.zeros((3, 3))), T(np.eye(3)), T(np.zeros(3)))
    np.testing.assert_allclose(rnn_step(w, T(np.ones(3)), T(x)).data, x, rtol=1e-7)


def test_rnn_matches_formula():
    rng = np.random.default_rng(4)
    Wh, Wx, b = rng.standard_normal((6, 6)), rng.standard_normal((6, 6)), rng.standard_normal(6)
    h, x = rng.standard_normal(6), rng.standard_normal(6)
    out = rnn_step(RnnWeights(T(Wh), T(Wx), T(b)), T(h), T(x)).data
    np.testing.assert_allclose(out, np.tanh(h @ Wh + x @ Wx + b), rtol=1e-13)


def test_rnn_rejects_dim_mismatch():
    w = RnnWeights(T(np.zeros((4, 4))), T(np.zeros((3, 4))), T(np.zeros(4)))
    with pytest.raises(ValueError):
        rnn_step(w, T(np.zeros(4)), T(np.zeros(5)))


def _zero(w: EncoderWeights) -> EncoderWeights:
    for blk in w.blocks:
        for t in (blk.conv1, blk.b1, blk.conv2, blk.b2) + ((blk.proj,) if blk.proj is not None else ()):
            t.data = np.zeros_like(t.data)
    for d in w.fc + [w.mu, w.logvar]:
        d.W.data, d.b.data = np.zeros_like(d.W.data), np.zeros_like(d.b.data)
    return w


def test_zero_encoder_gives_zero_outputs():
    w = _zero(init_encoder(np.random.default_rng(0), 16, dtype=np.float64))
    mu, lv = encoder_apply(w, T(np.random.default_rng(1).random((28, 28))))
    assert not mu.data.any() and not lv.data.any()


@pytest.mark.parametrize("z", [16, 32, 96])
def test_encoder_output_shapes(z):
    w = init_encoder(np.random.default_rng(0), z)
    mu, lv = encoder_apply(w, Tensor(np.zeros((2, 28, 28), np.float32)))
    assert mu.shape == (2, z) and lv.shape == (2, z)


def test_encoder_downsamples_twice():
    assert encoder_output_size(28, 5, (0, 2)) == 7
    w = init_encoder(np.random.default_rng(0), 8)
    assert [b.stride for b in w.blocks] == [2, 1, 2, 1, 1]
    assert w.fc[0].dims == (32 * 7 * 7, 64)


def test_encoder_rejects_wrong_size():
    w = init_encoder(np.random.default_rng(0), 8)
    with pytest.raises(ValueError, match="28x28"):
        encoder_apply(w, Tensor(np.zeros((1, 27, 27), np.float32)))


def test_single_block_encoder_vs_hand_evaluation():
    rng = np.random.default_rng(9)
    n, ch, z = 6, 3, 4
    k1, k2 = rng.standard_normal((ch, 1, 3, 3)) * 0.5, rng.standard_normal((ch, ch, 3, 3)) * 0.5
    b1, b2, proj = rng.standard_normal(ch), rng.standard_normal(ch), rng.standard_normal((ch, 1, 1, 1))
    fcW, fcb = rng.standard_normal((ch * 3 * 3, 5)) * 0.3, rng.standard_normal(5)
    muW, mub = rng.standard_normal((5, z)), rng.standard_normal(z)
    lvW, lvb = rng.standard_normal((5, z)), rng.standard_normal(z)
    w = EncoderWeights([ResBlock(T(k1), T(b1), T(k2), T(b2), stride=2, proj=T(proj))],
                       [Dense(T(fcW), T(fcb))], Dense(T(muW), T(mub)), Dense(T(lvW), T(lvb)), image_size=n)
    img = rng.random((n, n))

    x = img[None]
    h = elu(conv_ref(x, k1, 2, 1) + b1[:, None, None])
    h = conv_ref(h, k2, 1, 1) + b2[:, None, None]
    y = elu(conv_ref(x, proj, 2, 0) + h)
    f = elu(y.reshape(-1) @ fcW + fcb)
    mu, lv = encoder_apply(w, T(img))
    np.testing.assert_allclose(mu.data[0], f @ muW + mub, rtol=1e-12)
    np.testing.assert_allclose(lv.data[0], f @ lvW + lvb, rtol=1e-12)


def test_evaluators_are_pure():
    w = init_encoder(np.random.default_rng(0), 8)
    img = Tensor(np.random.default_rng(1).random((2, 28, 28)).astype(np.float32))
    a, b = encoder_apply(w, img)[0].data, encoder_apply(w, img)[0].data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("family", ["mlp", "rnn", "encoder"])
def test_each_family_passes_grad_check(family):
    rng = np.random.default_rng(3)
    if family == "mlp":
        x, b1 = rng.standard_normal(4), T(rng.standard_normal(5))
        second = Dense(T(rng.standard_normal((5, 3))), T(rng.standard_normal(3)))
        f = lambda W: ops.sum(mlp_apply(MlpWeights([Dense(W, b1), second], "sigmoid"), T(x)))
        x0 = T(rng.standard_normal((4, 5)))
    elif family == "rnn":
        Wx, b, h = T(rng.standard_normal((3, 3))), T(rng.standard_normal(3)), rng.standard_normal(3)
        x = rng.standard_normal(3)
        f = lambda Wh: ops.sum(ops.square(rnn_step(RnnWeights(Wh, Wx, b), T(h), T(x))))
        x0 = T(rng.standard_normal((3, 3)))
    else:
        w = init_encoder(rng, 4, image_size=8, channels=2, n_blocks=2, downsample=(0,), fc_layers=1,
                         fc_width=5, dtype=np.float64)
        img = rng.random((1, 8, 8))

        def f(k):
            w.blocks[1].conv1 = k
            mu, lv = encoder_apply(w, T(img))
            return ops.sum(ops.add(ops.square(mu), lv))
        x0 = T(w.blocks[1].conv1.data)
    assert grad_check(f, x0, eps=1e-5) < 1e-6
