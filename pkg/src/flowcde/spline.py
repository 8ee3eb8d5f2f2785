"""Natural cubic spline control paths.

Discrete observations become continuous, twice-differentiable paths that the
CDE solvers can sample for values and time derivatives.  Channels are fitted
independently; the tridiagonal system for the knot second derivatives is
solved with the Thomas algorithm, vectorized across channels.
"""

from __future__ import annotations

import numpy as np

__all__ = ["SplinePath", "fit_natural_cubic"]


class SplinePath:
    """Piecewise cubic ``s(t) = a + b*u + c*u^2 + d*u^3`` with ``u = t - t_i``.

    Immutable after fitting; safe for concurrent reads.  ``channel_shape``
    restores the original per-knot observation layout on evaluation.
    """

    def __init__(self, knot_times, coeffs, channel_shape):
        self.knot_times = knot_times          # (n,)
        self.coeffs = coeffs                  # (n-1, channels, 4) -> a, b, c, d
        self.channel_shape = channel_shape

    @property
    def t0(self) -> float:
        return float(self.knot_times[0])

    @property
    def t1(self) -> float:
        return float(self.knot_times[-1])

    @property
    def channels(self) -> int:
        return self.coeffs.shape[1]

    def _locate(self, t: float):
        times = self.knot_times
        span = times[-1] - times[0]
        tol = 1e-9 * span
        if t < times[0] - tol or t > times[-1] + tol:
            raise ValueError(
                f"time {t} outside fitted span [{times[0]}, {times[-1]}]"
            )
        t = min(max(t, times[0]), times[-1])
        i = int(np.searchsorted(times, t, side="right")) - 1
        i = min(max(i, 0), len(times) - 2)
        return i, t - times[i]

    def eval(self, t: float) -> np.ndarray:
        i, u = self._locate(t)
        a, b, c, d = self.coeffs[i].T
        return (a + u * (b + u * (c + u * d))).reshape(self.channel_shape)

    def derivative(self, t: float) -> np.ndarray:
        i, u = self._locate(t)
        _, b, c, d = self.coeffs[i].T
        return (b + u * (2.0 * c + 3.0 * u * d)).reshape(self.channel_shape)

    def second_derivative(self, t: float) -> np.ndarray:
        i, u = self._locate(t)
        c = self.coeffs[i, :, 2]
        d = self.coeffs[i, :, 3]
        return (2.0 * c + 6.0 * u * d).reshape(self.channel_shape)


def _solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm; rhs may carry multiple right-hand sides as columns."""
    n = diag.shape[0]
    d = diag.copy()
    r = rhs.copy()
    for i in range(1, n):
        w = lower[i - 1] / d[i - 1]
        d[i] -= w * upper[i - 1]
        r[i] -= w * r[i - 1]
    x = np.empty_like(r)
    x[-1] = r[-1] / d[-1]
    for i in range(n - 2, -1, -1):
        x[i] = (r[i] - upper[i] * x[i + 1]) / d[i]
    return x


def fit_natural_cubic(times, observations) -> SplinePath:
    """Fit a natural cubic spline through per-knot observations.

    ``observations`` has one leading knot axis; any trailing axes are
    flattened into independent channels.  Natural boundary conditions force
    zero second derivative at both ends, so two knots degenerate to the
    linear interpolant.
    """
    times = np.asarray(times, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    if times.ndim != 1 or len(times) < 2:
        raise ValueError(f"need at least 2 knots, got {len(times)}")
    if obs.shape[0] != len(times):
        raise ValueError(
            f"observation count {obs.shape[0]} does not match {len(times)} knots"
        )
    if np.any(np.diff(times) <= 0):
        raise ValueError("knot times must be strictly increasing")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observations contain non-finite values")

    channel_shape = obs.shape[1:]
    n = len(times)
    y = obs.reshape(n, -1)
    h = np.diff(times)

    # Second derivatives M at the knots; natural ends pin M[0] = M[-1] = 0.
    m = np.zeros_like(y)
    if n > 2:
        slopes = np.diff(y, axis=0) / h[:, None]
        rhs = 6.0 * (slopes[1:] - slopes[:-1])
        diag = 2.0 * (h[:-1] + h[1:])
        m[1:-1] = _solve_tridiagonal(h[1:-1], diag, h[1:-1], rhs)

    a = y[:-1]
    b = np.diff(y, axis=0) / h[:, None] - h[:, None] * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h[:, None])
    coeffs = np.stack([a, b, c, d], axis=-1)
    return SplinePath(times, coeffs, channel_shape)
