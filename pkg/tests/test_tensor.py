"""Tensor core: ops against numpy/loop oracles, tape mechanics, broadcasting."""

import numpy as np
import pytest

import tcpool as tp
from tcpool.tensor import (
    add,
    batch_norm,
    concat,
    dropout,
    grad_check,
    index_select,
    log,
    matmul,
    mean_over,
    mul,
    reciprocal,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    sqrt,
    stack,
    sub,
    transpose,
)

DOUBLE = np.float64


def T(arr):
    return tp.Tensor(np.asarray(arr, dtype=DOUBLE))


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 5))
    want = np.zeros((3, 5))
    for i in range(3):
        for j in range(5):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = matmul(T(a), T(b)).data
    assert np.abs(got - want).max() <= 1e-12


def test_matmul_batched_matches_per_slab():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal((4, 5, 2))
    got = matmul(T(a), T(b)).data
    for m in range(4):
        assert np.abs(got[m] - a[m] @ b[m]).max() <= 1e-12


def test_elementwise_ops_match_numpy():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 4))
    p = np.abs(x) + 0.5
    assert np.allclose(add(T(x), T(p)).data, x + p)
    assert np.allclose(sub(T(x), T(p)).data, x - p)
    assert np.allclose(mul(T(x), T(p)).data, x * p)
    assert np.allclose(scale(T(x), 2.5).data, 2.5 * x)
    assert np.allclose(relu(T(x)).data, np.maximum(x, 0))
    assert np.allclose(sigmoid(T(x)).data, 1 / (1 + np.exp(-x)))
    assert np.allclose(sqrt(T(p)).data, np.sqrt(p))
    assert np.allclose(log(T(p)).data, np.log(p))
    assert np.allclose(reciprocal(T(p)).data, 1 / p)
    assert np.allclose(transpose(T(x)).data, x.T)


def test_softmax_rows_matches_numpy_and_is_shift_stable():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 7))
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    want = e / e.sum(axis=-1, keepdims=True)
    got = softmax_rows(T(x)).data
    assert np.abs(got - want).max() <= 1e-12
    assert np.allclose(got.sum(axis=-1), 1.0)
    shifted = softmax_rows(T(x + 1000.0)).data
    assert np.isfinite(shifted).all()
    assert np.abs(shifted - want).max() <= 1e-9


def test_mean_over_matches_numpy():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 4))
    assert np.allclose(mean_over(T(x), 0).data, x.mean(axis=0))
    assert np.allclose(mean_over(T(x), (1, 2)).data, x.mean(axis=(1, 2)))
    total = mean_over(T(x), (0, 1, 2))
    assert np.allclose(np.asarray(total.data), x.mean())


def test_broadcast_accepted_patterns():
    rng = np.random.default_rng(5)
    cases = [
        ((2, 3), (1, 3)),
        ((2, 3), (2, 1)),
        ((2, 3), (3,)),
        ((2, 3, 4), (3, 4)),
        ((2, 3, 4), (2, 1, 4)),
        ((2, 3, 4), (2, 3, 1)),
        ((2, 3, 4), (1, 1)),
    ]
    for sa, sb in cases:
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        assert np.allclose(add(T(a), T(b)).data, a + b), (sa, sb)
        assert np.allclose(mul(T(a), T(b)).data, a * b), (sa, sb)


def test_broadcast_rejected_patterns():
    rng = np.random.default_rng(6)
    cases = [
        ((2, 3), (3, 2)),          # incompatible outright
        ((2, 3, 4), (1, 3, 4)),    # size-1 axis that is neither padded nor trailing
        ((4, 2, 3, 5), (4, 1, 3, 5)),
    ]
    for sa, sb in cases:
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        with pytest.raises(tp.ShapeError):
            add(T(a), T(b))


def test_broadcast_gradient_sums_to_source_shape():
    a = T(np.ones((2, 3)))
    b = T(np.ones((1, 3)))
    with tp.Tape() as tape:
        tape.watch(a, b)
        loss = mean_over(mul(add(a, b), T(np.arange(6.0).reshape(2, 3))), (0, 1))
        tape.backward(loss)
    ga, gb = tape.grad(a), tape.grad(b)
    assert ga.shape == (2, 3)
    assert gb.shape == (1, 3)
    # d loss / d b_j sums the weight over the broadcast rows
    want = np.arange(6.0).reshape(2, 3).sum(axis=0, keepdims=True) / 6.0
    assert np.allclose(gb, want)


def test_tensor_data_is_immutable():
    t = T(np.ones((2, 2)))
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0


def test_tape_diamond_gradients_by_hand():
    x = T([[2.0]])
    y = T([[3.0]])
    with tp.Tape() as tape:
        tape.watch(x, y)
        # f = x*x + x*y; df/dx = 2x + y = 7, df/dy = x = 2
        f = add(mul(x, x), mul(x, y))
        tape.backward(f)
    assert np.allclose(tape.grad(x), 7.0)
    assert np.allclose(tape.grad(y), 2.0)


def test_backward_twice_is_bit_identical():
    rng = np.random.default_rng(7)
    x = T(rng.standard_normal((3, 3)))
    with tp.Tape() as tape:
        tape.watch(x)
        loss = mean_over(mul(x, sigmoid(x)), (0, 1))
        tape.backward(loss)
        g1 = tape.grad(x).copy()
        tape.backward(loss)
        g2 = tape.grad(x)
    assert np.array_equal(g1, g2)


def test_unwatched_tensor_has_no_grad():
    x = T(np.ones((2, 2)))
    c = T(np.ones((2, 2)))
    with tp.Tape() as tape:
        tape.watch(x)
        loss = mean_over(add(x, c), (0, 1))
        tape.backward(loss)
        with pytest.raises(ValueError):
            tape.grad(c)


def test_nested_tape_raises():
    with tp.Tape():
        with pytest.raises(RuntimeError):
            with tp.Tape():
                pass


def test_non_scalar_backward_raises():
    x = T(np.ones((2, 2)))
    with tp.Tape() as tape:
        tape.watch(x)
        y = scale(x, 2.0)
        with pytest.raises(tp.ShapeError):
            tape.backward(y)


def test_index_select_accumulates_duplicate_rows():
    x = T(np.arange(6.0).reshape(3, 2))
    with tp.Tape() as tape:
        tape.watch(x)
        y = index_select(x, 0, np.array([0, 0, 1], dtype=np.int64))
        assert np.allclose(y.data, x.data[[0, 0, 1]])
        loss = mean_over(y, (0, 1))
        tape.backward(loss)
    g = tape.grad(x)
    # row 0 selected twice, row 1 once, row 2 never
    assert np.allclose(g[0], 2.0 / 6.0)
    assert np.allclose(g[1], 1.0 / 6.0)
    assert np.allclose(g[2], 0.0)


def test_concat_and_stack_roundtrip_values():
    rng = np.random.default_rng(8)
    parts = [rng.standard_normal((2, 3)) for _ in range(3)]
    cat = concat([T(p) for p in parts], axis=0)
    assert np.allclose(cat.data, np.concatenate(parts, axis=0))
    stk = stack([T(p) for p in parts])
    assert np.allclose(stk.data, np.stack(parts))


def test_batch_norm_training_and_running_stats_by_hand():
    rng = np.random.default_rng(9)
    state = tp.NormState.init("bn", 3, dtype=DOUBLE)
    xs = [rng.standard_normal((6, 3)) for _ in range(2)]
    run_mean = np.zeros(3)
    run_var = np.ones(3)
    for x in xs:
        out = batch_norm(T(x), state, training=True)
        mu, var = x.mean(axis=0), x.var(axis=0)
        want = (x - mu) / np.sqrt(var + state.eps)
        assert np.abs(out.data - want).max() <= 1e-10
        m = state.momentum
        run_mean = m * run_mean + (1 - m) * mu
        run_var = m * run_var + (1 - m) * var
    assert np.abs(state.running_mean - run_mean).max() <= 1e-12
    assert np.abs(state.running_var - run_var).max() <= 1e-12
    # eval mode uses the running statistics and leaves them alone
    x = rng.standard_normal((4, 3))
    out = batch_norm(T(x), state, training=False)
    want = (x - run_mean) / np.sqrt(run_var + state.eps)
    assert np.abs(out.data - want).max() <= 1e-10
    assert np.abs(state.running_mean - run_mean).max() == 0.0


def test_dropout_eval_is_identity_and_train_rescales():
    rng = np.random.default_rng(10)
    x = T(rng.standard_normal((100, 20)))
    assert dropout(x, 0.5, None, training=False) is x
    assert dropout(x, 0.0, None, training=True) is x
    out = dropout(x, 0.5, np.random.default_rng(0), training=True)
    kept = out.data != 0
    assert 0.3 < kept.mean() < 0.7
    assert np.allclose(out.data[kept], 2.0 * x.data[kept])
    with pytest.raises(ValueError):
        dropout(x, 0.5, None, training=True)
    with pytest.raises(ValueError):
        dropout(x, 1.0, np.random.default_rng(0), training=True)


def test_primitive_gradients_against_central_differences():
    rng = np.random.default_rng(11)
    x = tp.Parameter("x", T(rng.standard_normal((3, 4))))
    w = tp.Parameter("w", T(rng.standard_normal((4, 3))))
    pos = tp.Parameter("pos", T(np.abs(rng.standard_normal((3, 4))) + 0.5))
    probe_sq = T(rng.standard_normal((3, 3)))
    probe_x = T(rng.standard_normal((3, 4)))

    def scalar(t):
        return mean_over(t, tuple(range(t.ndim)))

    cases = [
        ("matmul", lambda: scalar(mul(matmul(x.tensor, w.tensor), probe_sq)), [x, w]),
        ("softmax", lambda: scalar(mul(softmax_rows(x.tensor), probe_x)), [x]),
        ("sigmoid", lambda: scalar(sigmoid(x.tensor)), [x]),
        ("log", lambda: scalar(log(pos.tensor)), [pos]),
        ("sqrt", lambda: scalar(sqrt(pos.tensor)), [pos]),
        ("reciprocal", lambda: scalar(reciprocal(pos.tensor)), [pos]),
    ]
    for name, f, params in cases:
        err = grad_check(f, params)
        assert err <= 1e-6, f"{name}: {err}"
