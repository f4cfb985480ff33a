import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trajdistill import autodiff as ad
from trajdistill.autodiff import GraphError, NonFiniteError, ShapeError, Tensor

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    A = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_relu_definition():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = ad.grad((x * x).sum(), [x])
    assert g.data.tolist() == [2.0, 4.0]


def test_grad_of_constant_is_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor(3.0, requires_grad=True)
    (g,) = ad.grad(c * 2.0, [x])
    assert g.data.tolist() == [0.0, 0.0]


def test_grad_wrt_unrelated_leaf_is_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0], requires_grad=True)
    gx, gy = ad.grad((x * 3.0).sum(), [x, y])
    assert gy.data.tolist() == [0.0]
    assert gx.data.tolist() == [3.0, 3.0]


def test_hessian_vector_of_product():
    # f = x1 x2 ; ||grad f||^2 = x2^2 + x1^2 ; its gradient is 2x
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = ad.grad(x[0] * x[1], [x], create_graph=True)
    (hv,) = ad.grad((g * g).sum(), [x])
    fd = ad.finite_diff(lambda a: a[0] ** 2 + a[1] ** 2, [1.0, 2.0], 1e-5)
    assert ad.rel_error(hv, fd) < 1e-8
    np.testing.assert_allclose(hv.data, [2.0, 4.0])


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError, match="scalar"):
        ad.grad(x * 2.0, [x])


def test_graph_reuse_without_retain_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    ad.grad(loss, [x])
    with pytest.raises(GraphError, match="already differentiated"):
        ad.grad(loss, [x])


def test_retain_graph_allows_second_sweep():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    (g1,) = ad.grad(loss, [x], retain_graph=True)
    (g2,) = ad.grad(loss, [x])
    assert np.array_equal(g1.data, g2.data)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0, 1.0]))


def test_overflow_is_reported():
    with pytest.raises(NonFiniteError, match="exp"):
        ad.exp(Tensor([1000.0]))


def test_tensor_data_is_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_meta_loss_of_unrolled_sgd_matches_finite_differences():
    # two SGD steps on a quadratic, differentiated w.r.t. the step size
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    target = np.array([0.3, -0.2])

    def meta(alpha, track):
        a = Tensor(alpha, requires_grad=track)
        w = Tensor([[1.0], [1.0]], requires_grad=True)
        for _ in range(2):
            loss = ((Tensor(A) @ w) * w).sum() * 0.5
            (g,) = ad.grad(loss, [w], create_graph=True)
            w = w - a * g
        return a, ad.squared_distance(w.reshape(2), target)

    a, m = meta(0.1, True)
    (ga,) = ad.grad(m, [a])
    fd = ad.finite_diff(lambda v: meta(float(v), False)[1].item(), np.array(0.1))
    assert ad.rel_error(ga, fd) < 1e-4


def test_finite_diff_rejects_bad_eps():
    with pytest.raises(ValueError):
        ad.finite_diff(lambda x: 0.0, [1.0], eps=0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4,), elements=finite))
def test_broadcast_add_gradient_sums_over_broadcast_axis(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ga, gb = ad.grad((ta + tb).sum(), [ta, tb])
    assert np.array_equal(ga.data, np.ones((3, 4)))
    assert np.array_equal(gb.data, np.full(4, 3.0))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_matches_numpy_and_its_adjoint(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    out = ta @ tb
    np.testing.assert_allclose(out.data, a @ b)
    w = np.arange(4.0).reshape(2, 2)
    ga, gb = ad.grad((out * Tensor(w)).sum(), [ta, tb])
    np.testing.assert_allclose(ga.data, w @ b.T)
    np.testing.assert_allclose(gb.data, a.T @ w)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-2, 2)))
def test_second_order_matches_differences_of_gradient(x):
    # f = sum(exp(x) * x^2); check d/dx ||grad f||^2
    def grad_sq(v, create):
        t = Tensor(v, requires_grad=True)
        (g,) = ad.grad((ad.exp(t) * t * t).sum(), [t], create_graph=create)
        return t, (g * g).sum()

    t, s = grad_sq(x, True)
    (h,) = ad.grad(s, [t])
    fd = ad.finite_diff(lambda v: grad_sq(v, False)[1].item(), x)
    # relative 1e-4 plus an absolute term for points where the gradient vanishes
    assert np.linalg.norm(h.data - fd) <= 1e-4 * np.linalg.norm(fd) + 1e-7


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_log_softmax_is_stable_and_normalised(x):
    lp = ad.log_softmax(Tensor(x), axis=1).data
    assert np.all(np.isfinite(lp))
    np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, rtol=1e-12)


def test_cross_entropy_reductions_agree():
    logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]))
    y = [1, 2]
    per = ad.cross_entropy(logits, y, reduction="none").data
    assert ad.cross_entropy(logits, y, reduction="sum").item() == pytest.approx(per.sum())
    assert ad.cross_entropy(logits, y).item() == pytest.approx(per.mean())
    with pytest.raises(ValueError):
        ad.cross_entropy(logits, y, reduction="max")


def test_conv2d_matches_loop_definition(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 4))
    for o in range(3):
        for i in range(4):
            for j in range(4):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_instance_norm_zero_mean_unit_variance(rng):
    x = rng.normal(size=(2, 3, 4, 4)) * 5 + 2
    y = ad.instance_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, rtol=1e-3)


def test_avg_pool_and_l2_norm_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_allclose(ad.avg_pool2d(Tensor(x)).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    assert ad.l2_norm(Tensor([3.0, 4.0])).item() == pytest.approx(5.0)
    assert ad.squared_distance(Tensor([1.0, 2.0]), [0.0, 0.0]).item() == pytest.approx(5.0)
