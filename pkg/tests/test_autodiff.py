import numpy as np
import pytest

from adaptsearch.autodiff import (
    ParamBlock,
    Tape,
    Tensor,
    add,
    add_bias_param,
    cosine_distance_matrix,
    forward_linear,
    gradcheck,
    matmul_const,
    matmul_param,
    sgd_step,
    softmax_nll_from_distances,
    sum_all,
    zero_grads,
)


def block(name, value, trainable=True):
    return ParamBlock(name, np.asarray(value, dtype=np.float64), trainable=trainable)


def test_forward_linear_identity_case():
    x = Tensor([[1.0, 0.0]])
    w = block("w", np.eye(2))
    b = block("b", np.zeros(2))
    y = forward_linear(x, w, b, "identity")
    np.testing.assert_array_equal(y.data, [[1.0, 0.0]])


def test_forward_linear_hand_arithmetic():
    y = forward_linear(Tensor([[1.0, 2.0]]), block("w", [[1.0], [1.0]]), block("b", [0.5]))
    np.testing.assert_array_equal(y.data, [[3.5]])


def test_relu_clamps_negative_preactivations():
    x = Tensor([[1.0, 1.0]])
    w = block("w", [[-1.0, 2.0], [0.0, 0.0]])
    y = forward_linear(x, w, block("b", np.zeros(2)), "relu")
    np.testing.assert_array_equal(y.data, [[0.0, 2.0]])


def test_forward_linear_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape mismatch"):
        forward_linear(Tensor([[1.0, 2.0, 3.0]]), block("w", np.eye(2)), block("b", np.zeros(2)))


def test_forward_is_deterministic():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((3, 4)))
    w = block("w", rng.standard_normal((4, 2)))
    b = block("b", rng.standard_normal(2))
    first = forward_linear(x, w, b, "tanh").data
    second = forward_linear(x, w, b, "tanh").data
    np.testing.assert_array_equal(first, second)


def test_backward_linear_derivative_is_xT_ones():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    w = block("w", np.zeros((2, 3)))
    b = block("b", np.zeros(3), trainable=False)
    tape = Tape()
    loss = sum_all(forward_linear(x, w, b, "identity", tape), tape)
    tape.backward(loss)
    expected = x.data.T @ np.ones((2, 3))
    np.testing.assert_array_equal(w.grad, expected)


def test_backward_leaves_frozen_blocks_at_zero():
    x = Tensor([[1.0, 2.0]])
    w = block("w", np.ones((2, 2)), trainable=False)
    b = block("b", np.zeros(2), trainable=False)
    before = w.value.copy()
    tape = Tape()
    loss = sum_all(forward_linear(x, w, b, "identity", tape), tape)
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, np.zeros_like(w.value))
    np.testing.assert_array_equal(b.grad, np.zeros_like(b.value))
    np.testing.assert_array_equal(w.value, before)


def test_backward_twice_on_one_tape_raises():
    x = Tensor([[1.0]])
    w = block("w", [[2.0]])
    tape = Tape()
    loss = sum_all(forward_linear(x, w, block("b", [0.0]), "identity", tape), tape)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="twice"):
        tape.backward(loss)


def test_backward_non_scalar_root_raises():
    x = Tensor([[1.0, 2.0]])
    tape = Tape()
    y = forward_linear(x, block("w", np.eye(2)), block("b", np.zeros(2)), "identity", tape)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_tensor_rejects_non_finite_data():
    with pytest.raises(ValueError, match="finite"):
        Tensor([[np.nan]])
    with pytest.raises(ValueError, match="finite"):
        ParamBlock("w", np.array([np.inf]))


def test_sgd_step_examples():
    w = block("w", [1.0])
    w.grad[:] = 2.0
    sgd_step([w], 0.1)
    np.testing.assert_allclose(w.value, [0.8])
    np.testing.assert_array_equal(w.grad, [0.0])

    w = block("w", [1.0])
    w.grad[:] = 2.0
    sgd_step([w], 0.0)
    np.testing.assert_array_equal(w.value, [1.0])
    np.testing.assert_array_equal(w.grad, [0.0])

    frozen = block("w", [1.0], trainable=False)
    frozen.grad[:] = 0.0
    sgd_step([frozen], 0.5)
    np.testing.assert_array_equal(frozen.value, [1.0])

    with pytest.raises(ValueError, match="non-negative"):
        sgd_step([block("w", [1.0])], -0.1)


def _finite_difference_losses():
    """Small compositions covering every op, each paired with its blocks."""
    rng = np.random.default_rng(42)
    cases = []

    for activation in ("identity", "relu", "tanh"):
        w = block("w", rng.standard_normal((4, 3)))
        b = block("b", rng.standard_normal(3))
        x = rng.standard_normal((5, 4))
        targets = rng.integers(0, 3, size=5)
        c = rng.standard_normal((3, 3))

        def loss_fn(w=w, b=b, x=x, targets=targets, c=c, activation=activation, tape=None):
            emb = forward_linear(Tensor(x), w, b, activation, tape)
            dist = cosine_distance_matrix(emb, Tensor(c), tape)
            return softmax_nll_from_distances(dist, targets, tape)

        cases.append((f"linear-{activation}", loss_fn, [w, b]))

    a = block("a", rng.standard_normal((4, 3)) * 0.3)
    w = block("w", rng.standard_normal((4, 3)))
    b = block("b", rng.standard_normal(3))
    x = rng.standard_normal((5, 4))
    targets = rng.integers(0, 3, size=5)
    c = rng.standard_normal((3, 3))

    def residual_loss(tape=None):
        h = Tensor(x)
        base = forward_linear(h, w, b, "relu", tape)
        emb = add(base, matmul_param(h, a, tape), tape)
        dist = cosine_distance_matrix(emb, Tensor(c), tape)
        return softmax_nll_from_distances(dist, targets, tape)

    cases.append(("residual-adapter", residual_loss, [w, b, a]))

    v = block("v", rng.standard_normal(3) * 0.3)

    def offset_loss(tape=None):
        base = forward_linear(Tensor(x), w, b, "relu", tape)
        emb = add_bias_param(base, v, tape)
        dist = cosine_distance_matrix(emb, Tensor(c), tape)
        return softmax_nll_from_distances(dist, targets, tape)

    cases.append(("offset-adapter", offset_loss, [w, b, v]))

    m = np.zeros((2, 5))
    m[0, :3] = 1.0 / 3.0
    m[1, 3:] = 0.5
    targets2 = rng.integers(0, 2, size=5)

    def centroid_loss(tape=None):
        emb = forward_linear(Tensor(x), w, b, "tanh", tape)
        centroids = matmul_const(m, emb, tape)
        dist = cosine_distance_matrix(emb, centroids, tape)
        return softmax_nll_from_distances(dist, targets2, tape)

    cases.append(("centroid-branch", centroid_loss, [w, b]))
    return cases


@pytest.mark.parametrize("name,loss_fn,blocks", _finite_difference_losses(), ids=lambda c: c if isinstance(c, str) else "")
def test_gradients_match_central_finite_differences(name, loss_fn, blocks):
    zero_grads(blocks)  # some blocks are shared between parametrized cases
    tape = Tape()
    loss = loss_fn(tape=tape)
    tape.backward(loss)
    analytic = {blk.id: blk.grad.copy() for blk in blocks}
    worst = gradcheck(lambda: float(loss_fn().data), blocks, analytic)
    assert worst < 1e-4


def test_ops_preserve_finiteness_on_random_inputs():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = Tensor(rng.standard_normal((4, 6)))
        w = block("w", rng.standard_normal((6, 5)))
        b = block("b", rng.standard_normal(5))
        y = forward_linear(x, w, b, "tanh")
        d = cosine_distance_matrix(y, Tensor(rng.standard_normal((3, 5))))
        loss = softmax_nll_from_distances(d, rng.integers(0, 3, size=4))
        assert np.isfinite(y.data).all()
        assert np.isfinite(d.data).all()
        assert np.isfinite(loss.data)
