import math

import numpy as np
import pytest

from vmmt import nn
from vmmt import tensor as T
from vmmt.model import ModelConfig, TranslationModel


def zero_lstm(n_in, hidden):
    p = {}
    nn.init_rnn(p, "c", "lstm", n_in, hidden, np.random.default_rng(0))
    for t in p.values():
        t.data = np.zeros_like(t.data)
    return p


def test_lstm_zero_params_zero_state():
    p = zero_lstm(3, 1)
    st = nn.rnn_cell_step("lstm", T.constant(np.array([[5.0, -2.0, 1.0]])),
                          nn.RnnState(T.constant([[0.0]]), T.constant([[0.0]])), p, "c")
    assert st.h.data[0, 0] == 0.0 and st.c.data[0, 0] == 0.0


def test_lstm_zero_params_carry():
    p = zero_lstm(3, 1)
    st = nn.rnn_cell_step("lstm", T.constant(np.ones((1, 3))),
                          nn.RnnState(T.constant([[0.0]]), T.constant([[2.0]])), p, "c")
    assert st.c.data[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert st.h.data[0, 0] == pytest.approx(0.5 * math.tanh(1.0), abs=1e-15)
    assert st.h.data[0, 0] == pytest.approx(0.3808, abs=1e-4)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_lstm_step_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    D, H = 4, 4
    p = {}
    nn.init_rnn(p, "c", "lstm", D, H, rng)
    p["c.b"].data = rng.normal(size=4 * H)
    x, h0, c0 = rng.normal(size=D), rng.normal(size=H), rng.normal(size=H)
    st = nn.rnn_cell_step("lstm", T.constant(x[None]),
                          nn.RnnState(T.constant(h0[None]), T.constant(c0[None])), p, "c")
    Wx, Wh, b = p["c.W_x"].data, p["c.W_h"].data, p["c.b"].data
    for k in range(H):
        pre = [sum(x[d] * Wx[d, g * H + k] for d in range(D))
               + sum(h0[j] * Wh[j, g * H + k] for j in range(H)) + b[g * H + k] for g in range(4)]
        i, f, g, o = _sig(pre[0]), _sig(pre[1]), math.tanh(pre[2]), _sig(pre[3])
        c = f * c0[k] + i * g
        assert st.c.data[0, k] == pytest.approx(c, abs=1e-13)
        assert st.h.data[0, k] == pytest.approx(o * math.tanh(c), abs=1e-13)


def test_gru_step_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    D, H = 3, 2
    p = {}
    nn.init_rnn(p, "g", "gru", D, H, rng)
    p["g.b"].data = rng.normal(size=3 * H)
    p["g.b_h"].data = rng.normal(size=3 * H)
    x, h0 = rng.normal(size=D), rng.normal(size=H)
    st = nn.rnn_cell_step("gru", T.constant(x[None]), nn.RnnState(T.constant(h0[None])), p, "g")
    Wx, Wh, b, bh = (p[k].data for k in ("g.W_x", "g.W_h", "g.b", "g.b_h"))
    xp = x @ Wx + b
    hp = h0 @ Wh + bh
    for k in range(H):
        r = _sig(xp[k] + hp[k])
        u = _sig(xp[H + k] + hp[H + k])
        n = math.tanh(xp[2 * H + k] + r * hp[2 * H + k])
        assert st.h.data[0, k] == pytest.approx((1 - u) * n + u * h0[k], abs=1e-13)


def test_masked_rows_keep_state():
    rng = np.random.default_rng(3)
    p = {}
    nn.init_rnn(p, "c", "lstm", 2, 3, rng)
    h0, c0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    st = nn.rnn_cell_step("lstm", T.constant(rng.normal(size=(2, 2))),
                          nn.RnnState(T.constant(h0), T.constant(c0)), p, "c", mask=np.array([1.0, 0.0]))
    np.testing.assert_array_equal(st.h.data[1], h0[1])
    np.testing.assert_array_equal(st.c.data[1], c0[1])


def test_birnn_shape_single_token():
    p = {}
    nn.init_birnn(p, "e", "lstm", 3, 5, np.random.default_rng(0))
    out = nn.birnn("lstm", p, "e", T.constant(np.ones((1, 1, 3))), np.ones((1, 1)))
    assert out.shape == (1, 1, 10)


def test_birnn_palindrome_symmetry():
    rng = np.random.default_rng(4)
    p = {}
    nn.init_birnn(p, "e", "lstm", 3, 4, rng)
    for k in ("W_x", "W_h", "b"):
        p[f"e.bwd.{k}"] = p[f"e.fwd.{k}"]
    a, b = rng.normal(size=3), rng.normal(size=3)
    xs = np.stack([a, b, rng.normal(size=3), b, a])[None]
    out = nn.birnn("lstm", p, "e", T.constant(xs), np.ones((1, 5))).data[0]
    for i in range(5):
        np.testing.assert_allclose(out[i, :4], out[4 - i, 4:], atol=1e-14)


def test_birnn_matches_unrolled_steps():
    rng = np.random.default_rng(5)
    p = {}
    nn.init_birnn(p, "e", "lstm", 2, 4, rng)
    xs = rng.normal(size=(1, 3, 2))
    out = nn.birnn("lstm", p, "e", T.constant(xs), np.ones((1, 3))).data[0]

    def unroll(prefix, order):
        st = nn.zero_state("lstm", 1, 4)
        res = {}
        for t in order:
            st = nn.rnn_cell_step("lstm", T.constant(xs[:, t]), st, p, prefix)
            res[t] = st.h.data[0]
        return res

    fwd, bwd = unroll("e.fwd", [0, 1, 2]), unroll("e.bwd", [2, 1, 0])
    for t in range(3):
        np.testing.assert_allclose(out[t], np.concatenate([fwd[t], bwd[t]]), atol=1e-14)


def test_attention_singleton_and_identical_keys():
    rng = np.random.default_rng(6)
    w = T.constant(rng.normal(size=(4, 3)))
    q = T.constant(rng.normal(size=(1, 3)))
    k1 = rng.normal(size=(1, 1, 4))
    np.testing.assert_allclose(nn.bilinear_attention(q, T.constant(k1), np.ones((1, 1)), w).data,
                               k1[:, 0], atol=1e-15)
    k = rng.normal(size=4)
    keys = np.tile(k, (1, 5, 1))
    np.testing.assert_allclose(nn.bilinear_attention(q, T.constant(keys), np.ones((1, 5)), w).data[0],
                               k, atol=1e-14)


def test_attention_hand_calculation():
    w = T.constant(np.array([[1.0, 0.0], [0.0, 2.0]]))
    keys = T.constant(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    q = T.constant(np.array([[0.5, 1.0]]))
    # scores: q.W.h1 = 0.5, q.W.h2 = 2.0
    e1, e2 = math.exp(0.5), math.exp(2.0)
    a1, a2 = e1 / (e1 + e2), e2 / (e1 + e2)
    ctx, weights = nn.attend(q, nn.attention_memory(keys, np.ones((1, 2)), w))
    np.testing.assert_allclose(weights.data, [[a1, a2]], atol=1e-15)
    np.testing.assert_allclose(ctx.data, [[a1, a2]], atol=1e-15)


def test_attention_weights_are_distribution_over_unmasked():
    rng = np.random.default_rng(7)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1.0]])
    mem = nn.attention_memory(T.constant(rng.normal(size=(2, 5, 6))), mask,
                              T.constant(rng.normal(size=(6, 3))))
    _, w = nn.attend(T.constant(rng.normal(size=(2, 3)) * 5), mem)
    assert np.all(w.data >= 0)
    np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w.data[0, 3:] == 0.0)
    with pytest.raises(ValueError):
        nn.attention_memory(T.constant(np.ones((1, 2, 6))), np.zeros((1, 2)), T.constant(np.ones((6, 3))))


def make_mlp(n_in, n_hidden, n_out, seed=0):
    p = {}
    nn.init_mlp(p, "m", n_in, n_hidden, n_out, np.random.default_rng(seed))
    return p


def test_mlp_zero_weights_and_relu_cut():
    p = make_mlp(2, 3, 2)
    for t in p.values():
        t.data = np.zeros_like(t.data)
    p["m.l2.b"].data = np.array([0.7, -0.2])
    np.testing.assert_array_equal(nn.mlp(p, "m", T.constant(np.ones((1, 2)))).data, [[0.7, -0.2]])
    q = make_mlp(1, 1, 1)
    q["m.l1.W"].data = np.array([[1.0]])
    q["m.l2.W"].data = np.array([[1.0]])
    q["m.l2.b"].data = np.array([0.25])
    assert nn.mlp(q, "m", T.constant([[-3.0]])).data[0, 0] == 0.25


def test_mlp_matches_matrix_arithmetic():
    rng = np.random.default_rng(8)
    p = make_mlp(3, 5, 2)
    for t in p.values():
        t.data = rng.normal(size=t.shape)
    x = rng.normal(size=(4, 3))
    h = np.maximum(x @ p["m.l1.W"].data + p["m.l1.b"].data, 0)
    np.testing.assert_allclose(nn.mlp(p, "m", T.constant(x)).data,
                               h @ p["m.l2.W"].data + p["m.l2.b"].data, atol=1e-14)
    with pytest.raises(T.ShapeError):
        nn.mlp(p, "m", T.constant(np.ones((1, 4))))


def test_adam_first_step():
    x = T.parameter(np.array([1.0]))
    nn.Adam(lr=0.002).step({"x": x}, {"x": np.array([1.0])})
    assert x.data[0] - 1.0 == pytest.approx(-0.002 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_is_identity():
    rng = np.random.default_rng(9)
    x = T.parameter(rng.normal(size=(3, 2)))
    before = x.data.copy()
    opt = nn.Adam()
    for _ in range(3):
        opt.step({"x": x}, {"x": np.zeros((3, 2))})
    np.testing.assert_array_equal(x.data, before)


def test_adam_three_steps_hand_iteration():
    lr, b1, b2, eps = 0.002, 0.9, 0.999, 1e-8
    x = T.parameter(np.array([1.0]))
    opt = nn.Adam(lr, b1, b2, eps)
    xv, m, v = 1.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2 * x.data.copy()
        opt.step({"x": x}, {"x": g})
        gh = 2 * xv
        m = b1 * m + (1 - b1) * gh
        v = b2 * v + (1 - b2) * gh * gh
        xv -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert x.data[0] == pytest.approx(xv, abs=1e-15)


def test_adam_skips_nonfinite(caplog):
    x = T.parameter(np.array([1.0, 2.0]))
    opt = nn.Adam()
    assert opt.step({"x": x}, {"x": np.array([np.nan, 1.0])}) is False
    np.testing.assert_array_equal(x.data, [1.0, 2.0])
    assert opt.t == 0
    assert "non-finite" in caplog.text


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert nn.clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0, abs=1e-9)
    g = {"a": np.array([3.0])}
    nn.clip_grad_norm(g, 0)
    assert g["a"][0] == 3.0


@pytest.mark.parametrize("variant", ["nmt", "vmmt_f", "vmmt_c"])
def test_init_invariants(variant):
    cfg = ModelConfig(variant, 11, 13, embed_dim=6, hidden_dim=5, latent_dim=3, image_dim=4)
    m = TranslationModel(cfg, seed=3)
    for name, p in m.params.items():
        if name.endswith(".b") or name.endswith(".b_h"):
            assert np.all(p.data == 0.0), name
        else:
            assert np.all(np.abs(p.data) < 0.1), name
    keys = m.encode(np.array([[4, 5]]), np.ones((1, 2)))
    assert keys.shape == (1, 2, 10)


def test_encoder_ignores_padding():
    cfg = ModelConfig("nmt", 10, 10, embed_dim=4, hidden_dim=3)
    m = TranslationModel(cfg, seed=1)
    src = np.array([[4, 5, 6]])
    padded = np.array([[4, 5, 6, 0, 0]])
    a = m.encode(src, np.ones((1, 3))).data
    b = m.encode(padded, np.array([[1, 1, 1, 0, 0.0]])).data
    np.testing.assert_allclose(b[:, :3], a, atol=1e-15)


def test_unknown_cell_rejected():
    with pytest.raises(nn.ConfigError):
        nn.init_rnn({}, "x", "rnn", 2, 2, np.random.default_rng(0))
