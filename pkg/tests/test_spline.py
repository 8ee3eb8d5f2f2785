"""Natural cubic spline fitting and evaluation."""

import numpy as np
import pytest

from flowcde.spline import SplinePath, fit_natural_cubic

from helpers import rel_err


def _three_knot():
    # knots (0,0), (1,1), (2,0): the interior system is 4*M1 = 6*(-2)
    return fit_natural_cubic(np.array([0.0, 1.0, 2.0]),
                             np.array([[0.0], [1.0], [0.0]]))


def test_two_knots_degenerate_to_linear():
    path = fit_natural_cubic(np.array([0.0, 1.0]), np.array([[5.0], [7.0]]))
    assert path.eval(0.5).item() == pytest.approx(6.0, abs=1e-12)
    for t in (0.0, 0.3, 1.0):
        assert path.derivative(t).item() == pytest.approx(2.0, abs=1e-12)
        assert path.second_derivative(t).item() == pytest.approx(0.0, abs=1e-12)


def test_three_knot_hand_solution():
    path = _three_knot()
    assert path.second_derivative(1.0).item() == pytest.approx(-3.0, abs=1e-12)
    assert path.eval(0.5).item() == pytest.approx(0.6875, abs=1e-12)
    assert path.eval(1.0).item() == pytest.approx(1.0, abs=1e-12)
    assert path.derivative(0.0).item() == pytest.approx(1.5, abs=1e-12)


def test_constant_observations_give_flat_path():
    times = np.linspace(0.0, 3.0, 7)
    path = fit_natural_cubic(times, np.full((7, 2), 4.25))
    for t in np.linspace(0.0, 3.0, 11):
        np.testing.assert_allclose(path.eval(t), 4.25, atol=1e-12)
        np.testing.assert_allclose(path.derivative(t), 0.0, atol=1e-12)


def test_knot_interpolation_natural_bc_and_c2_continuity():
    rng = np.random.default_rng(3)
    times = np.sort(rng.uniform(0.0, 10.0, size=9))
    times[0], times[-1] = 0.0, 10.0
    obs = rng.standard_normal((9, 3))
    path = fit_natural_cubic(times, obs)

    for i, t in enumerate(times):
        assert rel_err(path.eval(t), obs[i]) < 1e-12

    np.testing.assert_allclose(path.second_derivative(times[0]), 0.0, atol=1e-9)
    np.testing.assert_allclose(path.second_derivative(times[-1]), 0.0, atol=1e-9)

    # compare the left interval's polynomial extended to the knot against
    # the right interval's coefficients
    a, b, c, d = (path.coeffs[..., j] for j in range(4))
    h = np.diff(times)
    for i in range(len(times) - 2):
        u = h[i]
        left_val = a[i] + b[i] * u + c[i] * u ** 2 + d[i] * u ** 3
        left_d1 = b[i] + 2 * c[i] * u + 3 * d[i] * u ** 2
        left_d2 = 2 * c[i] + 6 * d[i] * u
        np.testing.assert_allclose(left_val, a[i + 1], atol=1e-9)
        np.testing.assert_allclose(left_d1, b[i + 1], atol=1e-9)
        np.testing.assert_allclose(left_d2, 2 * c[i + 1], atol=1e-9)


def test_affine_data_reproduced_everywhere():
    times = np.array([0.0, 0.7, 1.9, 3.0, 4.2])
    obs = (2.5 * times - 1.25).reshape(-1, 1)
    path = fit_natural_cubic(times, obs)
    for t in np.linspace(0.0, 4.2, 43):
        assert abs(path.eval(t).item() - (2.5 * t - 1.25)) < 1e-9


def test_refit_of_own_samples_is_identity():
    # the natural interpolant of given knot values is unique, so sampling a
    # fitted path at its knots and refitting must reproduce it everywhere
    rng = np.random.default_rng(8)
    times = np.linspace(0.0, 5.0, 6)
    path1 = fit_natural_cubic(times, rng.standard_normal((6, 2)))
    resampled = np.stack([path1.eval(t) for t in times])
    path2 = fit_natural_cubic(times, resampled)
    for t in np.linspace(0.0, 5.0, 31):
        np.testing.assert_allclose(path2.eval(t), path1.eval(t), atol=1e-9)
        np.testing.assert_allclose(path2.derivative(t), path1.derivative(t), atol=1e-9)


def test_derivative_matches_finite_differences():
    rng = np.random.default_rng(12)
    times = np.linspace(0.0, 2.0, 8)
    path = fit_natural_cubic(times, rng.standard_normal((8, 2)))
    h = 1e-6
    pts = rng.uniform(0.0 + 2 * h, 2.0 - 2 * h, size=1000)
    for t in pts:
        numeric = (path.eval(t + h) - path.eval(t - h)) / (2 * h)
        assert rel_err(path.derivative(t), numeric, guard=1e-8) < 1e-6


def test_fit_is_linear_in_observations():
    rng = np.random.default_rng(4)
    times = np.linspace(0.0, 1.0, 5)
    f = rng.standard_normal((5, 1))
    g = rng.standard_normal((5, 1))
    pf = fit_natural_cubic(times, f)
    pg = fit_natural_cubic(times, g)
    combo = fit_natural_cubic(times, 2.0 * f - 0.5 * g)
    for t in np.linspace(0.0, 1.0, 17):
        want = 2.0 * pf.eval(t) - 0.5 * pg.eval(t)
        np.testing.assert_allclose(combo.eval(t), want, atol=1e-9)


def test_channel_shape_preserved():
    times = np.linspace(0.0, 1.0, 4)
    obs = np.arange(4 * 2 * 3, dtype=np.float64).reshape(4, 2, 3)
    path = fit_natural_cubic(times, obs)
    assert path.eval(0.5).shape == (2, 3)
    assert path.derivative(0.5).shape == (2, 3)


def test_fit_rejects_bad_inputs():
    with pytest.raises(ValueError, match="increasing"):
        fit_natural_cubic(np.array([0.0, 0.0, 1.0]), np.zeros((3, 1)))
    with pytest.raises(ValueError, match="increasing"):
        fit_natural_cubic(np.array([1.0, 0.0]), np.zeros((2, 1)))
    with pytest.raises(ValueError, match="knots"):
        fit_natural_cubic(np.array([0.0]), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        fit_natural_cubic(np.array([0.0, 1.0]), np.array([[0.0], [np.nan]]))


def test_eval_outside_span_errors_with_span():
    path = _three_knot()
    with pytest.raises(ValueError, match=r"\[0.*2"):
        path.eval(2.5)
    with pytest.raises(ValueError):
        path.derivative(-0.1)
