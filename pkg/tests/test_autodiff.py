import numpy as np
import pytest

from marginlab import autodiff as ad
from marginlab.autodiff import Tensor


def test_add_elementwise():
    out = ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [7.0]])


def test_relu_values():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_shape_error_names_op():
    with pytest.raises(ValueError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_backward_linear_rule():
    x = Tensor(2.0, requires_grad=True)
    y = x * 3.0
    y.backward()
    assert x.grad == pytest.approx(3.0)


def test_backward_power_rule():
    x = Tensor(5.0, requires_grad=True)
    y = x ** 2
    y.backward()
    assert x.grad == pytest.approx(10.0)


def test_backward_dead_relu():
    x = Tensor(-1.0, requires_grad=True)
    y = ad.relu(x)
    y.backward()
    assert x.grad == pytest.approx(0.0)


def test_relu_subgradient_zero_at_kink():
    x = Tensor(0.0, requires_grad=True)
    ad.relu(x).backward()
    assert x.grad == pytest.approx(0.0)


def test_backward_requires_seed_for_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 2.0
    with pytest.raises(ValueError, match="seed"):
        y.backward()
    with pytest.raises(ValueError, match="seed shape"):
        y.backward(seed=np.ones(3))


def test_backward_on_leaf_fails():
    x = Tensor([1.0], requires_grad=False)
    y = x * 2.0
    with pytest.raises(ValueError, match="nothing recorded"):
        y.backward(seed=np.ones(1))


def test_gradient_accumulation_two_paths():
    x = Tensor([1.5, -0.5], requires_grad=True)
    y = (x * x).sum() + (x * 3.0).sum()
    y.backward()
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 3.0)


def test_grad_accumulates_across_backward_calls():
    x = Tensor(2.0, requires_grad=True)
    (x * 3.0).backward()
    (x * 3.0).backward()
    assert x.grad == pytest.approx(6.0)


def test_stop_gradient_value_and_zero_grad():
    x = Tensor(7.0, requires_grad=True)
    y = ad.stop_gradient(x)
    assert y.item() == 7.0
    z = y * 2.0
    assert not z.requires_grad
    assert x.grad is None


def test_stop_gradient_product_rule_one_factor_frozen():
    x = Tensor(3.0, requires_grad=True)
    y = x * ad.stop_gradient(x)
    y.backward()
    assert x.grad == pytest.approx(3.0)


def test_finite_diff_quadratic():
    g = ad.finite_diff_gradient(lambda p: float(p**2), np.array(3.0), h=1e-5)
    assert g == pytest.approx(6.0, abs=1e-7)


def test_finite_diff_linear_sum():
    g = ad.finite_diff_gradient(lambda p: float(p.sum()), np.array([1.0, -2.0, 0.3]))
    np.testing.assert_allclose(g, 1.0)


def test_finite_diff_rejects_bad_inputs():
    with pytest.raises(ValueError, match="positive"):
        ad.finite_diff_gradient(lambda p: float(p.sum()), np.zeros(2), h=0.0)
    with pytest.raises(ValueError, match="scalar"):
        ad.finite_diff_gradient(lambda p: p * 2.0, np.zeros(2))


# -----------------------------------------------------------------------
# backward vs finite differences, per op
# -----------------------------------------------------------------------

def _fd_check(build, x0, rel_tol=1e-4):
    """build(Tensor) -> scalar Tensor; compare backward grad to central FD."""
    x = Tensor(x0, requires_grad=True)
    out = build(x)
    out.backward()
    fd = ad.finite_diff_gradient(lambda p: build(Tensor(p)).item(), x0, h=1e-5)
    denom = np.maximum(np.abs(fd), 1e-6)
    rel = np.abs(x.grad - fd) / denom
    assert rel.max() < rel_tol, f"max rel err {rel.max():.3g}"


# each factory draws its auxiliary constants once, so FD probes and the
# backward pass see the same function
_OP_CASES = {
    "add": lambda a: lambda x: (x + Tensor(a)).sum(),
    "sub": lambda a: lambda x: (x - Tensor(a)).sum(),
    "mul": lambda a: lambda x: (x * Tensor(a)).sum(),
    "div": lambda a: lambda x: (x / Tensor(2.0 + np.abs(a))).sum(),
    "div_denominator": lambda a: lambda x: (Tensor(a) / (x * x + 1.0)).sum(),
    "neg": lambda a: lambda x: (-x).sum(),
    "pow": lambda a: lambda x: ((x * x + 0.5) ** 1.7).sum(),
    "relu": lambda a: lambda x: ad.relu(x).sum(),
    "exp": lambda a: lambda x: ad.exp(x).sum(),
    "log": lambda a: lambda x: ad.log(x * x + 0.5).sum(),
    "sqrt": lambda a: lambda x: ad.sqrt(x * x + 0.5).sum(),
    "abs": lambda a: lambda x: ad.absval(x).sum(),
    "mean": lambda a: lambda x: (x * x).mean(),
    "sum_axis": lambda a: lambda x: (ad.tsum(x.reshape(2, 3), axis=1) ** 2).sum(),
    "reshape": lambda a: lambda x: (x.reshape(3, 2) * Tensor(a.reshape(3, 2))).sum(),
    "pick": lambda a: lambda x: ad.pick(x.reshape(2, 3), [2, 0]).sum(),
    "matmul": lambda a: lambda x: (x.reshape(2, 3) @ Tensor(a.reshape(3, 2))).sum(),
    "broadcast_add": lambda a: lambda x: (x.reshape(2, 3) + Tensor(a[:3])).sum(),
}


@pytest.mark.parametrize("name", sorted(_OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    factory = _OP_CASES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        x0 = rng.normal(size=6)
        if name in ("relu", "abs"):
            # keep points away from the kink so FD is valid
            x0 = x0 + np.sign(x0) * 1e-3
        _fd_check(factory(rng.normal(size=6)), x0)


def test_conv2d_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(2, 2, 4, 4))
    k0 = rng.normal(size=(3, 2, 2, 2))
    w = rng.normal(size=(2, 3, 3, 3))

    def loss_x(p):
        return (ad.conv2d(Tensor(p), Tensor(k0)) * Tensor(w)).sum().item()

    def loss_k(p):
        return (ad.conv2d(Tensor(x0), Tensor(p)) * Tensor(w)).sum().item()

    x = Tensor(x0, requires_grad=True)
    k = Tensor(k0, requires_grad=True)
    (ad.conv2d(x, k) * Tensor(w)).sum().backward()
    np.testing.assert_allclose(x.grad, ad.finite_diff_gradient(loss_x, x0), atol=1e-8)
    np.testing.assert_allclose(k.grad, ad.finite_diff_gradient(loss_k, k0), atol=1e-8)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 2, 2))))
    with pytest.raises(ValueError, match="larger than"):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


def test_backward_determinism_bit_identical():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=8)
    w0 = rng.normal(size=(8, 3))

    def run():
        x = Tensor(x0, requires_grad=True)
        w = Tensor(w0, requires_grad=True)
        out = ad.relu(x.reshape(1, 8) @ w).sum() * 1.7
        out.backward()
        return np.array(x.grad), np.array(w.grad)

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_gradients_functional_does_not_touch_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    (gx,) = ad.gradients(y, [x])
    np.testing.assert_allclose(gx, [2.0, 4.0])
    assert x.grad is None


def test_gradients_unreached_tensor_gets_zeros():
    x = Tensor([1.0], requires_grad=True)
    z = Tensor([5.0], requires_grad=True)
    y = (x * 2.0).sum()
    gx, gz = ad.gradients(y, [x, z])
    np.testing.assert_allclose(gx, [2.0])
    np.testing.assert_allclose(gz, [0.0])


# -----------------------------------------------------------------------
# input jacobians
# -----------------------------------------------------------------------


class _LinearNet:
    """z = x @ W + b on batches; input_shape advertises the sample shape."""

    def __init__(self, w, b):
        self.w = Tensor(w)
        self.b = Tensor(b)
        self.input_shape = (w.shape[0],)

    def __call__(self, x):
        return x @ self.w + self.b


def test_input_jacobian_linear_net_equals_weight_matrix():
    rng = np.random.default_rng(11)
    w_logical = rng.normal(size=(3, 4))  # K x d map
    net = _LinearNet(w_logical.T, rng.normal(size=3))
    jac = ad.input_jacobian(net, rng.normal(size=4))
    np.testing.assert_allclose(jac, w_logical, atol=1e-12)


def test_input_jacobian_constant_net_is_zero():
    net = _LinearNet(np.zeros((4, 3)), np.array([1.0, -2.0, 0.5]))
    jac = ad.input_jacobian(net, np.ones(4))
    np.testing.assert_array_equal(jac, np.zeros((3, 4)))


def test_input_jacobian_rejects_batch_input():
    net = _LinearNet(np.zeros((4, 3)), np.zeros(3))
    with pytest.raises(ValueError, match="one sample at a time"):
        ad.input_jacobian(net, np.ones((2, 4)))


def _mlp_forward(w1, b1, w2, b2):
    def f(x):
        return ad.relu(x @ Tensor(w1) + Tensor(b1)) @ Tensor(w2) + Tensor(b2)

    return f


def test_input_jacobian_matches_finite_differences():
    rng = np.random.default_rng(23)
    w1, b1 = rng.normal(size=(4, 8)), rng.normal(size=8)
    w2, b2 = rng.normal(size=(8, 3)), rng.normal(size=3)
    f = _mlp_forward(w1, b1, w2, b2)
    f.input_shape = None  # plain callable, rank-1 rule applies

    x0 = rng.normal(size=4)
    f_plain = _mlp_forward(w1, b1, w2, b2)
    jac = ad.batch_input_jacobians(f_plain, x0[np.newaxis])[0]
    for k in range(3):
        fd = ad.finite_diff_gradient(
            lambda p, k=k: f_plain(Tensor(p[np.newaxis])).data[0, k], x0, h=1e-5
        )
        rel = np.abs(jac[k] - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-6


def test_input_jacobian_composition_with_linear_head():
    rng = np.random.default_rng(29)
    w1, b1 = rng.normal(size=(5, 7)), rng.normal(size=7)
    w2 = rng.normal(size=(7, 3))

    def hidden(x):
        return ad.relu(x @ Tensor(w1) + Tensor(b1))

    def full(x):
        return hidden(x) @ Tensor(w2)

    x0 = rng.normal(size=5)
    jac_full = ad.batch_input_jacobians(full, x0[np.newaxis])[0]
    jac_hidden = ad.batch_input_jacobians(hidden, x0[np.newaxis])[0]
    np.testing.assert_allclose(jac_full, w2.T @ jac_hidden, atol=1e-12)


def test_batch_jacobians_agree_with_per_sample():
    rng = np.random.default_rng(31)
    w1, b1 = rng.normal(size=(3, 6)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(6, 4)), rng.normal(size=4)
    f = _mlp_forward(w1, b1, w2, b2)
    batch = rng.normal(size=(5, 3))
    jacs = ad.batch_input_jacobians(f, batch)
    for i in range(5):
        per = ad.batch_input_jacobians(f, batch[i : i + 1])[0]
        np.testing.assert_allclose(jacs[i], per, rtol=0, atol=1e-13)
