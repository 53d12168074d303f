import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stageflow import tensor as T
from stageflow.rng import SeededRng
from stageflow.tensor import (
    DualTensor,
    GradTape,
    Parameter,
    ShapeError,
    TapeError,
    Tensor,
    backward,
    jvp,
)
from util import fd_directional, rel_err, tape_grads


def test_add_identity():
    out = T.add(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(out.data, np.ones((2, 3), dtype=np.float32))


def test_matmul_shape():
    a = Tensor(np.ones((4, 5)))
    b = Tensor(np.ones((5, 7)))
    assert T.matmul(a, b).shape == (4, 7)
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(a, Tensor(np.ones((4, 7))))


def test_relu_definition():
    out = T.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_shape_mismatch_names_kernel_and_shapes():
    with pytest.raises(ShapeError) as exc:
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    msg = str(exc.value)
    assert "add" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_backward_quadratic():
    w = Parameter(np.array([1.0, 2.0, 3.0]))
    grads = tape_grads(lambda: T.sum_over(T.multiply(w, w)), {"w": w})
    np.testing.assert_allclose(grads["w"].data, 2 * w.data, rtol=1e-6)


def test_backward_unreached_param_zero():
    w = Parameter(np.array([1.0, 2.0]))
    unused = Parameter(np.array([[5.0, 1.0]]))
    grads = tape_grads(lambda: T.sum_over(w), {"w": w, "unused": unused})
    np.testing.assert_array_equal(grads["unused"].data, np.zeros((1, 2), dtype=np.float32))


def test_backward_requires_scalar_loss():
    w = Parameter(np.ones(3))
    tape = GradTape()
    with tape:
        tape.watch("w", w)
        out = T.multiply(w, w)
    with pytest.raises(TapeError, match="scalar"):
        backward(out, tape)


def test_double_backward_rejected():
    w = Parameter(np.ones(3))
    tape = GradTape()
    with tape:
        tape.watch("w", w)
        loss = T.sum_over(w)
    backward(loss, tape)
    with pytest.raises(TapeError, match="consumed"):
        backward(loss, tape)


def _two_layer(params, x):
    h = T.relu(T.add(T.matmul(x, params["w1"]), params["b1"]))
    y = T.add(T.matmul(h, params["w2"]), params["b2"])
    return T.mean_over(T.multiply(y, y))


def test_two_layer_grads_match_finite_differences():
    rng = SeededRng(7)
    x = Tensor(rng.normal((4, 5)))
    params = {
        "w1": Parameter(rng.normal((5, 6), scale=0.5)),
        "b1": Parameter(rng.normal((6,), scale=0.1)),
        "w2": Parameter(rng.normal((6, 3), scale=0.5)),
        "b2": Parameter(rng.normal((3,), scale=0.1)),
    }
    grads = tape_grads(lambda: _two_layer(params, x), params)

    for name, p in params.items():
        def loss_at(arr, name=name):
            saved = p.data.copy()
            p.data[...] = arr
            val = _two_layer(params, x).item()
            p.data[...] = saved
            return val

        fd = np.zeros(p.data.shape, dtype=np.float64)
        flat_fd = fd.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-3
            lp = _two_layer(params, x).item()
            flat[i] = orig - 1e-3
            lm = _two_layer(params, x).item()
            flat[i] = orig
            flat_fd[i] = (lp - lm) / 2e-3
        assert rel_err(grads[name].data, fd) <= 1e-3, name


def test_jvp_square():
    value, deriv = jvp(lambda x: T.multiply(x, x), [np.array([3.0])], [np.array([1.0])])
    assert value.item() == pytest.approx(9.0)
    assert deriv.item() == pytest.approx(6.0)


def test_jvp_linear_map_matches_matrix_oracle():
    rng = SeededRng(11)
    a = Tensor(rng.normal((6, 4)))
    b = Tensor(rng.normal((3, 4)))
    z = rng.normal((3, 6))
    v = rng.normal((3, 6))

    def f(zt):
        return T.add(T.matmul(zt, a), b)

    value, deriv = jvp(f, [z], [v])
    np.testing.assert_allclose(value.data, z @ a.data + b.data, rtol=1e-5)
    np.testing.assert_allclose(deriv.data, v @ a.data, rtol=1e-5, atol=1e-6)


def test_jvp_zero_tangent_stays_zero():
    rng = SeededRng(3)
    w = Tensor(rng.normal((4, 4)))

    def f(x):
        return T.relu(T.matmul(T.sin(x), w))

    _, deriv = jvp(f, [rng.normal((2, 4))], [np.zeros((2, 4), dtype=np.float32)])
    np.testing.assert_array_equal(deriv.data, np.zeros((2, 4), dtype=np.float32))


def test_jvp_no_tape_needed_and_primal_recorded_when_active():
    rng = SeededRng(5)
    w = Parameter(rng.normal((3, 3)))
    x = rng.normal((2, 3))
    # no tape: works
    val, _ = jvp(lambda z: T.matmul(z, w), [x], [np.ones_like(x)])
    # with tape: primal half is on the tape, tangent is not
    tape = GradTape()
    with tape:
        tape.watch("w", w)
        val, dval = jvp(lambda z: T.matmul(z, w), [x], [np.ones_like(x)])
        loss = T.sum_over(val)
    grads = backward(loss, tape)
    assert grads["w"].data.shape == (3, 3)
    assert np.any(grads["w"].data != 0)


def _kink_free_probe(rng, w1, b1, shape, h):
    # a central difference is only a valid derivative oracle when no relu
    # unit changes sign across [x-hv, x+hv]; redraw until the probe is clean
    while True:
        x = rng.normal(shape)
        v = rng.normal(shape)
        hi = (x + h * v) @ w1.data + b1.data
        lo = (x - h * v) @ w1.data + b1.data
        if np.all((hi > 0) == (lo > 0)):
            return x, v


def test_jvp_matches_finite_differences_on_random_networks():
    # 10 random small nets, h=1e-3, norm-wise relative error <= 1e-4
    for trial in range(10):
        rng = SeededRng(100 + trial)
        w1 = Tensor(rng.normal((5, 8), scale=0.6))
        b1 = Tensor(rng.normal((8,), scale=0.1))
        w2 = Tensor(rng.normal((8, 4), scale=0.6))

        def f(x):
            return T.matmul(T.relu(T.add(T.matmul(x, w1), b1)), w2)

        def f_np(arrs):
            h = np.maximum(arrs[0].astype(np.float64) @ w1.data.astype(np.float64) + b1.data, 0.0)
            return h @ w2.data.astype(np.float64)

        x, v = _kink_free_probe(rng, w1, b1, (3, 5), 1e-3)
        _, deriv = jvp(f, [x], [v])
        fd = fd_directional(f_np, [x], [v], h=1e-3)
        assert rel_err(deriv.data, fd) <= 1e-4, trial


def test_reverse_forward_consistency():
    # <grad f, v> equals jvp with tangent v within 1e-5 relative
    for trial in range(5):
        rng = SeededRng(200 + trial)
        w1 = Parameter(rng.normal((5, 7), scale=0.5))
        w2 = Parameter(rng.normal((7, 1), scale=0.5))
        x0 = rng.normal((1, 5))
        v = rng.normal((1, 5))

        def f(x):
            return T.sum_over(T.matmul(T.relu(T.matmul(x, w1)), w2))

        xin = Tensor(x0, requires_grad=True)
        tape = GradTape()
        with tape:
            tape.watch("x", xin)
            loss = f(xin)
        g = backward(loss, tape)["x"].data
        _, deriv = jvp(f, [x0], [v])
        inner = float((g.astype(np.float64) * v.astype(np.float64)).sum())
        assert abs(inner - deriv.item()) / (abs(inner) + 1e-8) <= 1e-5


@settings(max_examples=50, deadline=None)
@given(
    st.integers(1, 4),
    st.integers(1, 4),
    st.booleans(),
    st.booleans(),
    st.integers(0, 2**31 - 1),
)
def test_broadcast_add_associative(m, n, collapse_a, collapse_b, seed):
    rng = SeededRng(seed)
    a = Tensor(rng.normal((1 if collapse_a else m, n)))
    b = Tensor(rng.normal((m, 1 if collapse_b else n)))
    c = Tensor(rng.normal((m, n)))
    left = T.add(T.add(a, b), c)
    right = T.add(a, T.add(b, c))
    np.testing.assert_allclose(left.data, right.data, rtol=1e-6, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_reshape_bijective_on_data(m, n, seed):
    rng = SeededRng(seed)
    x = Tensor(rng.normal((m, n)))
    back = T.reshape(T.reshape(x, (n * m,)), (m, n))
    np.testing.assert_array_equal(back.data, x.data)


def test_dual_propagates_through_composites():
    x = DualTensor(Tensor([0.5, -0.2]), Tensor([1.0, 1.0]))
    out = T.scale(T.cos(x), 2.0)
    np.testing.assert_allclose(out.primal.data, 2 * np.cos([0.5, -0.2]), rtol=1e-6)
    np.testing.assert_allclose(out.tangent.data, -2 * np.sin([0.5, -0.2]), rtol=1e-6)


def test_concat_and_split_gradients():
    a = Parameter(np.ones((2, 2)))
    b = Parameter(np.ones((2, 3)))

    def loss():
        joined = T.concat([a, b], axis=1)
        return T.sum_over(T.multiply(joined, joined))

    grads = tape_grads(loss, {"a": a, "b": b})
    np.testing.assert_allclose(grads["a"].data, 2 * np.ones((2, 2)), rtol=1e-6)
    np.testing.assert_allclose(grads["b"].data, 2 * np.ones((2, 3)), rtol=1e-6)


def test_mean_and_permute_gradients():
    w = Parameter(np.arange(12, dtype=np.float32).reshape(3, 4))

    def loss():
        return T.mean_over(T.transpose_last2(w))

    grads = tape_grads(loss, {"w": w})
    np.testing.assert_allclose(grads["w"].data, np.full((3, 4), 1 / 12), rtol=1e-6)


def test_detach_blocks_gradient():
    w = Parameter(np.array([2.0]))

    def loss():
        return T.sum_over(T.multiply(w.detach(), w))

    grads = tape_grads(loss, {"w": w})
    # only the attached factor contributes: d/dw (c * w) = c = 2
    np.testing.assert_allclose(grads["w"].data, [2.0], rtol=1e-6)


def test_seeded_rng_reproducible_and_children_independent():
    a = SeededRng(42).normal((4, 4))
    b = SeededRng(42).normal((4, 4))
    np.testing.assert_array_equal(a, b)
    r = SeededRng(42)
    c1 = r.child("x").normal((4,))
    c2 = r.child("y").normal((4,))
    assert not np.array_equal(c1, c2)
    np.testing.assert_array_equal(c1, SeededRng(42).child("x").normal((4,)))
