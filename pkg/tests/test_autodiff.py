import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quadwm import autodiff as ad
from quadwm.dynamics import rk4_step
from quadwm.types import RigidBodyParams


def test_grad_square():
    val, g = ad.grad(lambda x: (x * x).sum(), np.array([3.0]))
    assert val == 9.0 and np.array_equal(g, [6.0])


def test_grad_sin_times_y():
    val, g = ad.grad(lambda v: ad.sin(v[0]) * v[1], np.array([0.0, 2.0]))
    assert val == 0.0
    assert np.allclose(g, [2.0, 0.0])


def test_grad_free_fall_rk4_matches_central_differences():
    p = RigidBodyParams()

    def f(force):
        w = ad.concat([force, np.zeros(3)])
        x = rk4_step(np.zeros(12), w, 0.05, p)
        return x[5] * x[5]

    assert ad.check_gradient(f, np.array([0.0, 0.0, 9.81])) < 1e-6


def test_check_gradient_cube():
    assert ad.check_gradient(lambda x: (x**3).sum(), np.array([2.0])) < 1e-8


def test_check_gradient_constant():
    assert ad.check_gradient(lambda x: 4.0, np.array([1.0, 2.0])) == 0.0


def test_check_gradient_rejects_bad_step():
    with pytest.raises(ValueError):
        ad.check_gradient(lambda x: x.sum(), np.ones(2), h=0.0)


def test_check_gradient_tanh_mlp():
    r = np.random.default_rng(7)
    w1, b1 = r.normal(size=(8, 16)) * 0.5, r.normal(size=16) * 0.1
    w2 = r.normal(size=(16, 1)) * 0.5

    def f(x):
        return ad.matmul(ad.tanh(ad.matmul(x, w1) + b1), w2).sum()

    assert ad.check_gradient(f, r.normal(size=8)) < 1e-5


def test_all_primitives_gradients():
    r = np.random.default_rng(3)
    x = r.uniform(0.2, 1.2, size=5)
    fns = [
        lambda v: ad.sin(v).sum(),
        lambda v: ad.cos(v).sum(),
        lambda v: ad.tan(v).sum(),
        lambda v: ad.tanh(v).sum(),
        lambda v: ad.sigmoid(v).sum(),
        lambda v: ad.exp(v).sum(),
        lambda v: ad.sqrt(v).sum(),
        lambda v: (1.0 / v).sum(),
        lambda v: (v / (v + 1.0)).sum(),
        lambda v: (-v * v).sum(),
        lambda v: ad.dot(v, v),
        lambda v: ad.matmul(np.arange(10.0).reshape(2, 5), v).sum(),
        lambda v: ad.stack([v[0], v[1] * v[2]]).sum(),
        lambda v: v.reshape(5, 1).T.sum() * v.mean(),
        lambda v: v[np.array([0, 0, 3])].sum(),
    ]
    for f in fns:
        assert ad.check_gradient(f, x) < 1e-7


def test_clamp_gradient_convention():
    _, g = ad.grad(lambda v: ad.clamp(v, 0.0, 1.0).sum(), np.array([-0.5, 0.0, 0.5, 1.0, 2.0]))
    assert np.array_equal(g, [0.0, 0.0, 1.0, 0.0, 0.0])


def test_non_finite_reports_node():
    with pytest.raises(ad.NonFiniteError) as info, np.errstate(invalid="ignore"):
        ad.grad(lambda v: ad.sqrt(v - 2.0).sum(), np.array([1.0]))
    assert info.value.node >= 0


@given(st.floats(-2, 2), st.floats(-2, 2), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_linearity(a, b, xs):
    x = np.array(xs)
    f = lambda v: (ad.sin(v) * v).sum()
    g = lambda v: (ad.exp(v) + v * v * v).sum()
    _, gf = ad.grad(f, x)
    _, gg = ad.grad(g, x)
    _, gh = ad.grad(lambda v: a * f(v) + b * g(v), x)
    assert np.allclose(gh, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_forward_matches_plain_arithmetic():
    r = np.random.default_rng(0)
    x = r.normal(size=6)
    f = lambda v: (ad.tanh(v) * ad.cos(v) + ad.sigmoid(v) / (2.0 + v * v)).sum()
    val, _ = ad.grad(f, x)
    assert abs(val - ad.evaluate(f, x)) <= 1e-14 * max(1.0, abs(val))


def test_gradients_deterministic():
    x = np.linspace(-1, 1, 7)
    f = lambda v: (ad.sin(v) * ad.exp(v)).sum()
    assert np.array_equal(ad.grad(f, x)[1], ad.grad(f, x)[1])


def test_backward_visits_each_node_once():
    tape = ad.Tape()
    x = tape.var(np.array(2.0))
    y = x * x
    z = y + y  # y has two consumers
    grads = tape.backward(z)
    assert grads[x.index] == pytest.approx(8.0)
