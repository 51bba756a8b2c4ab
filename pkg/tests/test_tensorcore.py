import numpy as np
import pytest

import tensorcore as tc
from exceptions import NumericError, ShapeMismatchError, ValidationError
from tensorcore import Tape, Tensor


def _numeric_grad(fn, arrays, i, eps=1e-6):
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[i])
    for idx in np.ndindex(base[i].shape):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[i][idx] += eps
        minus[i][idx] -= eps
        f_plus = fn(*[Tensor(a) for a in plus]).item()
        f_minus = fn(*[Tensor(a) for a in minus]).item()
        grad[idx] = (f_plus - f_minus) / (2 * eps)
    return grad


def check_grad(fn, *arrays, rtol=1e-5, atol=1e-8):
    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*params)
    grads = tc.backward(tape, out, params)
    for i in range(len(arrays)):
        np.testing.assert_allclose(grads[i], _numeric_grad(fn, arrays, i), rtol=rtol, atol=atol)


def test_add_mul_broadcast_over_leading_axes(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))
    check_grad(lambda x, y: tc.sum(tc.mul(tc.add(x, y), x)), a, b)


def test_suffix_broadcast_only():
    with pytest.raises(ShapeMismatchError):
        tc.add(np.ones((3, 4)), np.ones((3,)))


def test_matmul_batched(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 5))
    check_grad(lambda x, y: tc.sum(tc.matmul(x, y)), a, b)
    with pytest.raises(ShapeMismatchError):
        tc.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_concat_reshape_relu_exp(rng):
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(2, 2))
    check_grad(lambda x, y: tc.sum(tc.exp(tc.relu(tc.reshape(tc.concat([x, y], axis=1), (5, 2))))), a, b)


def test_log_with_floor_zeroes_clamped_gradient():
    x = Tensor(np.array([1e-40, 0.5]), requires_grad=True)
    with Tape() as tape:
        y = tc.sum(tc.log(x, floor=1e-30))
    g = tc.backward(tape, y, [x])[0]
    assert g[0] == 0.0
    assert g[1] == pytest.approx(2.0)
    assert y.item() == pytest.approx(np.log(1e-30) + np.log(0.5))


def test_log_softmax_rows_normalize_and_gradient(rng):
    x = rng.normal(size=(4, 6)) * 10
    out = tc.log_softmax(Tensor(x))
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)
    w = rng.normal(size=(4, 6))
    check_grad(lambda t: tc.sum(tc.mul(tc.log_softmax(t), w)), x)


def test_log_softmax_large_values_stay_finite():
    out = tc.log_softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]])))
    assert np.all(np.isfinite(out.data))
    assert out.data[0, 0] == pytest.approx(0.0)


def test_mean_and_sum_axis(rng):
    a = rng.normal(size=(3, 4, 2))
    check_grad(lambda x: tc.sum(tc.mean(x, axis=0)), a)
    check_grad(lambda x: tc.mean(tc.sum(x, axis=2)), a)


def test_gather_and_scatter(rng):
    x = rng.normal(size=(4, 3))
    idx = np.array([0, 2, 2, 3, 0])
    w = rng.normal(size=(5, 3))
    check_grad(lambda t: tc.sum(tc.mul(tc.gather_rows(t, idx), w)), x)

    y = rng.normal(size=(5, 3))
    w2 = rng.normal(size=(4, 3))
    check_grad(lambda t: tc.sum(tc.mul(tc.scatter_add_rows(t, idx, 4), w2)), y)
    out = tc.scatter_add_rows(Tensor(np.ones((5, 1))), idx, 4)
    np.testing.assert_array_equal(out.data[:, 0], [2, 0, 2, 1])


def test_backward_unused_param_gets_zeros():
    used = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = tc.sum(tc.mul(used, used))
    gu, gz = tc.backward(tape, y, [used, unused])
    np.testing.assert_allclose(gu, [2.0, 4.0])
    np.testing.assert_array_equal(gz, np.zeros((2, 2)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = tc.mul(x, 2.0)
    with pytest.raises(ShapeMismatchError):
        tc.backward(tape, y, [x])


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = tc.exp(x)
    assert not y.requires_grad
    with Tape() as tape:
        tc.exp(x)
        tc.exp(Tensor(np.ones(2)))
    assert tape.ops() == ["exp"]
    assert Tape.current() is None


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        tc.log(Tensor(np.array([0.0])))


def test_negative_log_likelihood_ignores_unlabeled(rng):
    logits = rng.normal(size=(4, 3))
    labels = np.array([0, -1, 2, 1])
    loss = tc.softmax_cross_entropy(logits, np.array([0, 2, 1]))
    lp = tc.log_softmax(Tensor(logits)).data
    expected = -(lp[0, 0] + lp[2, 2] + lp[3, 1]) / 3
    nll = tc.negative_log_likelihood(Tensor(lp), labels)
    assert nll.item() == pytest.approx(expected)
    assert loss.shape == ()
    with pytest.raises(ValidationError):
        tc.negative_log_likelihood(Tensor(lp), np.array([-1, -1, -1, -1]))


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    check_grad(lambda t: tc.softmax_cross_entropy(t, labels), logits)


def test_init_params_deterministic_and_glorot():
    a = tc.init_params([3, 0], (16, 64, 64, 1))
    b = tc.init_params([3, 0], (16, 64, 64, 1))
    c = tc.init_params([3, 1], (16, 64, 64, 1))
    assert a.dims == (16, 64, 64, 1)
    for x, y in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(x.data, y.data)
    assert not np.array_equal(a.weights[0].data, c.weights[0].data)
    limit = np.sqrt(6.0 / (16 + 64))
    assert np.abs(a.weights[0].data).max() <= limit
    np.testing.assert_array_equal(a.biases[0].data, np.zeros(64))


def test_mlp_apply_keeps_leading_axes(rng):
    p = tc.init_params(0, (6, 5, 1))
    x = rng.normal(size=(2, 3, 6))
    out = tc.mlp_apply(p, x)
    assert out.shape == (2, 3, 1)
    h = np.maximum(x.reshape(-1, 6) @ p.weights[0].data + p.biases[0].data, 0.0)
    np.testing.assert_allclose(out.data.reshape(-1), (h @ p.weights[1].data + p.biases[1].data).reshape(-1))
    with pytest.raises(ShapeMismatchError):
        tc.mlp_apply(p, np.ones((2, 5)))


def test_mlp_gradient(rng):
    p = tc.init_params(1, (4, 3, 1))
    x = rng.normal(size=(7, 4))
    arrays = [t.data.copy() for t in p.parameters()]

    def fn(*ts):
        q = tc.MLPParams(tuple(ts[0::2]), tuple(ts[1::2]))
        return tc.sum(tc.mlp_apply(q, x))

    check_grad(fn, *arrays)


def test_outer_add_values_and_gradient(rng):
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(4, 2))
    out = tc.outer_add(a, b)
    assert out.shape == (3, 4, 2)
    np.testing.assert_allclose(out.data[1, 2], a[1] + b[2])
    w = rng.normal(size=(3, 4, 2))
    check_grad(lambda x, y: tc.sum(tc.mul(tc.outer_add(x, y), w)), a, b)
    with pytest.raises(ShapeMismatchError):
        tc.outer_add(np.ones((3, 2)), np.ones((4, 3)))


@pytest.mark.parametrize("cols_first", [False, True])
def test_mlp_apply_outer_matches_concatenated_input(rng, cols_first):
    p = tc.init_params(2, (5, 4, 3, 1))
    rows = rng.normal(size=(6, 3))
    cols = rng.normal(size=(4, 2))
    out = tc.mlp_apply_outer(p, rows, cols, cols_first=cols_first)
    assert out.shape == (6, 4, 1)

    r = np.broadcast_to(rows[:, None, :], (6, 4, 3))
    c = np.broadcast_to(cols[None, :, :], (6, 4, 2))
    x = np.concatenate([c, r] if cols_first else [r, c], axis=-1)
    np.testing.assert_allclose(out.data, tc.mlp_apply(p, x).data, rtol=1e-12, atol=1e-12)


def test_mlp_apply_outer_gradient(rng):
    p = tc.init_params(3, (4, 3, 1))
    rows = rng.normal(size=(5, 2))
    cols = rng.normal(size=(3, 2))
    arrays = [t.data.copy() for t in p.parameters()]

    def fn(*ts):
        q = tc.MLPParams(tuple(ts[0::2]), tuple(ts[1::2]))
        return tc.sum(tc.mlp_apply_outer(q, rows, cols, cols_first=True))

    check_grad(fn, *arrays)
    with pytest.raises(ShapeMismatchError):
        tc.mlp_apply_outer(p, rows, np.ones((3, 3)))


def test_sgd_momentum_step_by_hand():
    params = [np.array([1.0, 2.0])]
    state = tc.OptimizerState((np.zeros(2),), momentum=0.9)
    new, state = tc.sgd_momentum_step(params, [np.array([1.0, -1.0])], state, lr=0.1)
    np.testing.assert_allclose(new[0], [0.9, 2.1])
    new, state = tc.sgd_momentum_step(new, [np.array([1.0, -1.0])], state, lr=0.1)
    # v = 0.9*1 + 1 = 1.9
    np.testing.assert_allclose(new[0], [0.9 - 0.19, 2.1 + 0.19])
    assert state.iteration == 2


def test_sgd_shape_mismatch():
    state = tc.OptimizerState((np.zeros(2),))
    with pytest.raises(ShapeMismatchError):
        tc.sgd_momentum_step([np.zeros(3)], [np.zeros(3)], state, 0.1)


def test_lr_schedule():
    assert tc.lr_at(0) == 0.01
    assert tc.lr_at(4999) == 0.01
    assert tc.lr_at(5000) == pytest.approx(0.001)
    assert tc.lr_at(10000) == pytest.approx(0.0001)
    with pytest.raises(ValidationError):
        tc.lr_at(-1)


def test_tapes_are_thread_local():
    from concurrent.futures import ThreadPoolExecutor

    def work(seed):
        x = Tensor(np.full(3, float(seed)), requires_grad=True)
        with Tape() as tape:
            y = tc.sum(tc.mul(x, x))
        return tc.backward(tape, y, [x])[0]

    with ThreadPoolExecutor(max_workers=4) as pool:
        results = list(pool.map(work, range(8)))
    for seed, g in enumerate(results):
        np.testing.assert_allclose(g, np.full(3, 2.0 * seed))
