import numpy as np

from wisernet.autodiff import Tensor, check_gradients, numerical_grad, relative_error


def wrong_square(x):
    # backward off by a factor of two
    return Tensor._make(x.data * x.data, (x,), lambda g: (g * x.data,))


def test_numerical_grad_of_cubic_sum(f64):
    x = Tensor(np.array([1.0, -2.0, 0.5]))
    est = numerical_grad(lambda: x * x * x, x)
    np.testing.assert_allclose(est, 3 * x.data**2, rtol=1e-8)


def test_numerical_grad_subset_of_entries(f64):
    x = Tensor(np.arange(6.0).reshape(2, 3))
    est = numerical_grad(lambda: x * x, x, indices=[1, 4])
    np.testing.assert_allclose(est, [2.0, 8.0], rtol=1e-8)


def test_relative_error_floor_handles_zero_gradients():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 1e-9]), np.array([1.0, 0.0])) < 1e-5
    assert relative_error(np.array([2.0]), np.array([1.0])) == 1 / 3


def test_check_passes_correct_op_and_catches_wrong_one(f64):
    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    assert check_gradients(lambda: x * x, [x]) < 1e-8
    assert check_gradients(lambda: wrong_square(x), [x]) > 0.3


def test_check_probes_outputs_with_constant_sum(f64):
    # softmax-like normalization: the plain sum has zero gradient everywhere
    x = Tensor(np.random.default_rng(1).standard_normal((1, 4)), requires_grad=True)

    def bad_centering():
        return Tensor._make(x.data - x.data.mean(), (x,), lambda g: (g,))

    assert check_gradients(bad_centering, [x]) > 0.1


def test_check_with_sampled_entries(f64):
    x = Tensor(np.random.default_rng(2).standard_normal(50), requires_grad=True)
    assert check_gradients(lambda: (x * x).sum(), [x], max_entries=5) < 1e-8
