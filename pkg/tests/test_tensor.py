import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glucocrnn import tensor as T

from conftest import fd_max_rel_err, tape_grads


def smooth_sum(tape, out):
    # a weighted sum keeps the loss smooth (no MAE kinks) for FD checks
    w = np.linspace(-1.0, 1.5, out.value.size).reshape(out.shape)
    return T.dense(T.reshape(out, (1, -1), tape=tape), w.reshape(1, -1), np.zeros(1), tape=tape)


def scalar(tape, out):
    return T.reshape(smooth_sum(tape, out), (), tape=tape)


# --------------------------------------------------------------------------
# arrays


def test_as_array_rejects_nonfinite():
    with pytest.raises(ValueError):
        T.as_array([1.0, np.nan])
    with pytest.raises(ValueError):
        T.as_array([1.0, 2.0, 3.0], shape=(2, 2))
    assert T.as_array(range(6), shape=(2, 3)).shape == (2, 3)


# --------------------------------------------------------------------------
# conv1d


def conv_oracle(x, k, b, pad):
    steps, cin = x.shape
    kk, _, cout = k.shape
    xp = np.vstack([np.zeros((pad, cin)), x])
    out = np.zeros((steps + pad - kk + 1, cout))
    for m in range(out.shape[0]):
        for o in range(cout):
            s = b[o]
            for i in range(kk):
                for c in range(cin):
                    s += xp[m + i, c] * k[i, c, o]
            out[m, o] = s
    return out


def test_conv1d_identity_kernel():
    x = np.arange(5.0).reshape(5, 1)
    out = T.conv1d(x, np.ones((1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv1d_matches_loop_oracle(rng):
    x = rng.normal(size=(6, 1))
    k = rng.normal(size=(2, 1, 1))
    b = rng.normal(size=1)
    np.testing.assert_allclose(T.conv1d(x, k, b), conv_oracle(x, k, b, 1), rtol=0, atol=1e-12)


def test_conv1d_param_count():
    assert (4 * 3 + 1) * 8 == 104


def test_conv1d_batched_equals_per_sample(rng):
    x = rng.normal(size=(3, 7, 2))
    k = rng.normal(size=(4, 2, 5))
    b = rng.normal(size=5)
    batched = T.conv1d(x, k, b)
    for n in range(3):
        np.testing.assert_allclose(batched[n], conv_oracle(x[n], k, b, 3), atol=1e-12)


def test_conv1d_shape_errors():
    with pytest.raises(ValueError):
        T.conv1d(np.zeros((5, 2)), np.zeros((4, 3, 8)), np.zeros(8))
    with pytest.raises(ValueError):
        T.conv1d(np.zeros((5, 3)), np.zeros((4, 3, 8)), np.zeros(7))


@settings(max_examples=30, deadline=None)
@given(steps=st.integers(4, 30), k=st.integers(1, 4), cin=st.integers(1, 3), cout=st.integers(1, 4))
def test_conv1d_causal_padding_preserves_length(steps, k, cin, cout):
    out = T.conv1d(np.ones((steps, cin)), np.ones((k, cin, cout)), np.zeros(cout))
    assert out.shape == (steps, cout)


def test_conv1d_is_causal(rng):
    x = rng.normal(size=(10, 2))
    k = rng.normal(size=(4, 2, 3))
    b = np.zeros(3)
    y = T.conv1d(x, k, b)
    x2 = x.copy()
    x2[6:] += 5.0
    np.testing.assert_array_equal(T.conv1d(x2, k, b)[:6], y[:6])


# --------------------------------------------------------------------------
# maxpool1d


def test_maxpool_example():
    out, arg = T.maxpool1d(np.array([3, 1, 4, 1, 5, 9.0]).reshape(6, 1))
    np.testing.assert_array_equal(out[:, 0], [3, 4, 9])
    np.testing.assert_array_equal(arg[:, 0], [0, 2, 5])


def test_maxpool_lengths_and_constant():
    out, _ = T.maxpool1d(np.full((24, 8), 2.5))
    assert out.shape == (12, 8)
    assert np.all(out == 2.5)


def test_maxpool_errors():
    with pytest.raises(ValueError):
        T.maxpool1d(np.zeros((1, 1)), size=2, stride=2)
    with pytest.raises(ValueError):
        T.maxpool1d(np.zeros((5, 1)), size=2, stride=2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_maxpool_backward_conserves_gradient_mass(half, d, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2 * half, d))
    g_out = r.normal(size=(half, d))
    tape = T.Tape()
    xv = T.Var(x)
    out, _ = T.maxpool1d(xv, tape=tape)
    (gx,) = tape.records[-1].vjp([g_out])
    assert math.isclose(gx.sum(), g_out.sum(), rel_tol=1e-12, abs_tol=1e-12)
    assert np.count_nonzero(gx) <= g_out.size


# --------------------------------------------------------------------------
# dense / activations / dropout / loss


def test_dense_examples():
    assert T.dense(np.array([4.0, 5.0]), np.array([[1.0, 2.0]]), np.array([3.0]))[0] == 17.0
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_array_equal(T.dense(x, np.eye(3), np.zeros(3)), x)
    assert (64 + 1) * 256 == 16640


def test_dense_shape_error():
    with pytest.raises(ValueError):
        T.dense(np.zeros(3), np.zeros((2, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        T.dense(np.zeros(3), np.zeros((2, 3)), np.zeros(2), act="softmax")


def test_dropout_identities(rng):
    x = rng.normal(size=50)
    assert T.dropout(x, 0.0, rng, training=True) is x
    assert T.dropout(x, 0.7, rng, training=False) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, rng, training=True)


def test_dropout_preserves_mean():
    n = 100_000
    out = T.dropout(np.ones(n), 0.5, np.random.default_rng(3), training=True)
    sigma = math.sqrt(0.5 * 0.5 / n) * 2.0  # survivors are scaled by 2
    assert abs(out.mean() - 1.0) < 3 * sigma
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_mae_examples():
    assert float(T.mae_loss(np.array([1.0, 3.0]), np.array([2.0, 5.0]))) == 1.5
    assert float(T.mae_loss(np.ones(4), np.ones(4))) == 0.0
    with pytest.raises(ValueError):
        T.mae_loss(np.array([]), np.array([]))


def test_mae_zero_residual_subgradient_is_zero():
    tape = T.Tape()
    p = T.Var(np.array([1.0, 2.0, 3.0]))
    loss = T.mae_loss(p, np.array([1.0, 0.0, 5.0]), tape=tape)
    (g,) = T.backward(tape, loss, [p])
    np.testing.assert_array_equal(g, [0.0, 1 / 3, -1 / 3])


# --------------------------------------------------------------------------
# LSTM


def zero_lstm(cells, inp, b_f=0.0, b_i=0.0, b_o=0.0, b_g=0.0):
    z = lambda *s: np.zeros(s)
    return T.LstmParams(z(cells, inp), z(cells, inp), z(cells, inp), z(cells, inp),
                        z(cells, cells), z(cells, cells), z(cells, cells), z(cells, cells),
                        np.full(cells, b_f), np.full(cells, b_i), np.full(cells, b_o), np.full(cells, b_g))


def sig(a):
    return 1.0 / (1.0 + math.exp(-a))


def test_lstm_zero_weights_scalar_hand_computation():
    p = zero_lstm(1, 1, b_f=0.3, b_i=-0.4, b_o=0.9, b_g=1.1)
    h, c = T.lstm_step(np.array([0.7]), np.zeros(1), np.zeros(1), p)
    c_ref = sig(0.3) * 0.0 + sig(-0.4) * math.tanh(math.tanh(1.1))
    assert c[0] == pytest.approx(c_ref, abs=1e-15)
    assert h[0] == pytest.approx(sig(0.9) * math.tanh(c_ref), abs=1e-15)


def test_lstm_param_count():
    assert T.LstmParams.count(32, 64) == 24832
    assert len(T.LstmParams.names()) == 12


def test_lstm_shape_error():
    p = zero_lstm(3, 2)
    with pytest.raises(ValueError):
        T.lstm_step(np.zeros(4), np.zeros(3), np.zeros(3), p)


# --------------------------------------------------------------------------
# gradients


def random_lstm(r, cells, inp, scale=0.5):
    shapes = [(cells, inp)] * 4 + [(cells, cells)] * 4 + [(cells,)] * 4
    return [r.normal(scale=scale, size=s) for s in shapes]


@pytest.mark.parametrize("seed", range(5))
def test_op_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 8, 3))
    k = r.normal(size=(3, 3, 4))
    b = r.normal(size=4)

    def conv_loss(tape, vs):
        return scalar(tape, T.conv1d(vs[0], vs[1], vs[2], tape=tape))

    arrays = [x, k, b]
    grads = tape_grads(conv_loss, arrays)
    assert fd_max_rel_err(lambda: T.conv1d(x, k, b).ravel() @ np.linspace(-1, 1.5, x.shape[0] * 8 * 4),
                          arrays, grads) < 1e-4

    xp = r.normal(size=(6, 3))
    grads = tape_grads(lambda tape, vs: scalar(tape, T.maxpool1d(vs[0], tape=tape)[0]), [xp])
    assert fd_max_rel_err(lambda: T.maxpool1d(xp)[0].ravel() @ np.linspace(-1, 1.5, 9), [xp], grads) < 1e-4

    for act in T.ACTIVATIONS:
        xd, W, bd = r.normal(size=(3, 5)), r.normal(size=(4, 5)), r.normal(size=4)
        if act == "relu":
            xd += np.sign(xd) * 0.1  # stay away from the kink
        grads = tape_grads(lambda tape, vs: scalar(tape, T.dense(vs[0], vs[1], vs[2], act, tape=tape)),
                           [xd, W, bd])
        w = np.linspace(-1, 1.5, 12)
        assert fd_max_rel_err(lambda: T.dense(xd, W, bd, act).ravel() @ w, [xd, W, bd], grads) < 1e-4

    pred, target = r.normal(size=7), r.normal(size=7)
    grads = tape_grads(lambda tape, vs: T.mae_loss(vs[0], target, tape=tape), [pred])
    assert fd_max_rel_err(lambda: T.mae_loss(pred, target), [pred], grads) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_lstm_gradients_through_time(seed):
    r = np.random.default_rng(100 + seed)
    cells, inp, steps = 3, 2, 4
    plist = random_lstm(r, cells, inp)
    xs = r.normal(size=(2, steps, inp))
    w = r.normal(size=(2, cells))

    def run(vals, tape=None):
        p = T.LstmParams(*vals[1:])
        h = np.zeros((2, cells))
        c = np.zeros((2, cells))
        for t in range(steps):
            xt = T.take(vals[0], (slice(None), t), tape=tape) if tape is not None else vals[0][:, t]
            h, c = T.lstm_step(xt, h, c, p, tape=tape)
        return h

    def build(tape, vs):
        h = run(vs, tape)
        return T.reshape(T.dense(T.reshape(h, (1, -1), tape=tape), w.reshape(1, -1), np.zeros(1),
                                 tape=tape), (), tape=tape)

    arrays = [xs] + plist
    grads = tape_grads(build, arrays)
    assert fd_max_rel_err(lambda: float(np.sum(run(arrays) * w)), arrays, grads) < 1e-4


def test_backward_rejects_nonscalar_loss():
    tape = T.Tape()
    v = T.Var(np.ones(3))
    out = T.relu(v, tape=tape)
    with pytest.raises(ValueError):
        T.backward(tape, out, [v])


def test_unused_parameter_gets_zero_gradient():
    tape = T.Tape()
    a, b = T.Var(np.array([1.0, -2.0])), T.Var(np.ones((2, 2)))
    loss = T.mae_loss(a, np.zeros(2), tape=tape)
    ga, gb = T.backward(tape, loss, [a, b])
    np.testing.assert_array_equal(gb, np.zeros((2, 2)))
    np.testing.assert_array_equal(ga, [0.5, -0.5])


def test_identical_tapes_give_identical_gradients(rng):
    x, k, b = rng.normal(size=(8, 3)), rng.normal(size=(4, 3, 2)), rng.normal(size=2)

    def build(tape, vs):
        return scalar(tape, T.relu(T.conv1d(vs[0], vs[1], vs[2], tape=tape), tape=tape))

    g1 = tape_grads(build, [x, k, b])
    g2 = tape_grads(build, [x, k, b])
    for a, c in zip(g1, g2):
        assert a.tobytes() == c.tobytes()


# --------------------------------------------------------------------------
# RMSprop


def test_rmsprop_zero_gradient_is_noop():
    p = [np.array([1.0, 2.0])]
    T.rmsprop_step(p, [np.zeros(2)], T.RmspropState())
    np.testing.assert_array_equal(p[0], [1.0, 2.0])


def test_rmsprop_single_step_hand_value():
    p = [np.array([0.0])]
    state = T.RmspropState(lr=0.1, rho=0.9, eps=1e-8)
    T.rmsprop_step(p, [np.array([2.0])], state)
    assert state.sq[0][0] == pytest.approx(0.4, abs=1e-15)
    assert p[0][0] == pytest.approx(-0.1 * 2 / (math.sqrt(0.4) + 1e-8), abs=1e-15)


def test_rmsprop_constant_gradient_step_tends_to_lr():
    p = [np.array([0.0])]
    state = T.RmspropState(lr=0.01)
    prev = 0.0
    for _ in range(300):
        T.rmsprop_step(p, [np.array([3.0])], state)
        step, prev = prev - p[0][0], p[0][0]
    assert step == pytest.approx(0.01, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_rmsprop_squared_average_nonnegative(gs):
    p = [np.zeros(1)]
    state = T.RmspropState()
    for g in gs:
        T.rmsprop_step(p, [np.array([g])], state)
        assert state.sq[0][0] >= 0.0
