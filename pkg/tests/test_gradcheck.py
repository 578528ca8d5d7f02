import numpy as np
import pytest

from fpconv.errors import NonFiniteGradient
from fpconv.gradsuite import CASES, run_case, run_suite
from fpconv.nn import functional as F
from fpconv.nn.gradcheck import grad_check, rel_error
from fpconv.nn.layers import Conv2d, Linear
from fpconv.nn.tensor import Tensor, make_result

CHEAP = [n for n in CASES if not n.startswith(("fpconv", "residual", "parallel", "pointmlp"))]
HEAVY = [n for n in CASES if n not in CHEAP]


def test_linear_layer_gradient(rng):
    layer = Linear(3, 5, rng)
    x = Tensor(rng.standard_normal((4, 3)))
    report = grad_check(layer, [x], params=layer.parameters())
    assert report.max_rel_err < 1e-6


def test_conv2d_gradient(rng):
    conv = Conv2d(3, 2, 3, rng, padding=1)
    x = Tensor(rng.standard_normal((6, 6, 2)))
    report = grad_check(conv, [x], params=conv.parameters())
    assert report.max_rel_err < 1e-5


def test_leaky_relu_gradient_away_from_zero(rng):
    x = rng.uniform(0.1, 2.0, (5, 4)) * rng.choice([-1.0, 1.0], (5, 4))
    report = grad_check(F.leaky_relu, [Tensor(x)])
    assert report.max_rel_err < 1e-7


@pytest.mark.parametrize("name", CHEAP)
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_on_random_instances(name, seed):
    report = run_case(name, seed=seed)
    assert report.passed, (name, seed, report.max_rel_err)


@pytest.mark.parametrize("name", HEAVY)
def test_composite_gradients(name):
    report = run_case(name, seed=3)
    assert report.max_rel_err < 1e-4, report


def test_rel_error_floor_only_silences_tiny_pairs():
    a = np.array([1e-9, 1.0, 2e-8, 0.0])
    n = np.array([0.0, 1.0 + 1e-6, 1e-8, 0.0])
    err = rel_error(a, n)
    assert err[0] == 0.0 and err[3] == 0.0
    assert abs(err[1] - 1e-6 / (1 + 1e-6)) < 1e-15
    # a small but real gradient is still compared relatively
    assert err[2] == pytest.approx(0.5)


def test_tiny_tolerance_is_not_met():
    report = run_case("softmax", tolerance=1e-12, seed=0)
    assert report.max_rel_err > 0 and not report.passed


def test_nonfinite_gradient_raises():
    def bad(x):
        return make_result(x.data.copy(), (x,), lambda g: (g * np.nan,))

    with pytest.raises(NonFiniteGradient):
        grad_check(bad, [Tensor(np.ones(3))])


def test_requires_float64():
    with pytest.raises(TypeError):
        grad_check(F.leaky_relu, [Tensor(np.ones(3, dtype=np.float32))])


def test_unknown_op_name():
    with pytest.raises(KeyError):
        run_suite(["nope"])
