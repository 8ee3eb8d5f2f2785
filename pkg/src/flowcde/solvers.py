"""Fixed-step and adaptive integrators plus adjoint-mode gradients.

The steppers are generic over a tiny vector-space interface (``lin(a, s, b)
= a + s*b``), so one implementation serves tape-tracked tensors, plain
float64 arrays, and the detached replay the adjoint sweep runs on.
Controlled equations reduce to ODEs here: the caller folds the control-path
derivative into the vector field.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .tensor import Tensor, enable_grad, no_grad, vjp

__all__ = [
    "SolverConfig",
    "SolverError",
    "Trajectory",
    "integrate",
    "integrate_adaptive",
    "adjoint_backward",
    "odeint",
]

_METHODS = ("euler", "rk4", "adaptive_rk4")
_GRADIENT_MODES = ("backprop_through_solver", "adjoint")


class SolverError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: str = "rk4"
    step_size: float = 0.1
    rtol: float = 1e-3
    atol: float = 1e-5
    min_step: float = 1e-6
    max_step: float = 1.0
    gradient_mode: str = "backprop_through_solver"

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"unknown method '{self.method}', expected one of {_METHODS}")
        if self.gradient_mode not in _GRADIENT_MODES:
            raise ValueError(
                f"unknown gradient_mode '{self.gradient_mode}', expected one of {_GRADIENT_MODES}"
            )
        if self.step_size <= 0 or self.rtol <= 0 or self.atol <= 0:
            raise ValueError("step_size, rtol and atol must be positive")
        if not (0 < self.min_step <= self.max_step):
            raise ValueError("need 0 < min_step <= max_step")


@dataclass
class Trajectory:
    """States observed along one integration, plus the evaluation count."""

    times: list
    states: list
    nfe: int
    t_start: float = 0.0
    y0: object = None       # initial state; lets the adjoint replay the steps


def _tensor_lin(a, s, b):
    return a + Tensor(s) * b


def _array_lin(a, s, b):
    return a + s * b


def _euler_step(f, y, t, dt, lin):
    return lin(y, dt, f(y, t)), 1


def _rk4_step(f, y, t, dt, lin):
    k1 = f(y, t)
    k2 = f(lin(y, dt / 2.0, k1), t + dt / 2.0)
    k3 = f(lin(y, dt / 2.0, k2), t + dt / 2.0)
    k4 = f(lin(y, dt, k3), t + dt)
    acc = lin(lin(lin(k1, 2.0, k2), 2.0, k3), 1.0, k4)
    return lin(y, dt / 6.0, acc), 4


def _wrap_field(field, nfe_box):
    def f(y, t):
        try:
            dy = field(y, t)
        except FloatingPointError as e:
            raise SolverError(f"vector field failed at t={t}: {e}") from None
        nfe_box[0] += 1
        arr = dy.data if isinstance(dy, Tensor) else np.asarray(dy)
        if not np.all(np.isfinite(arr)):
            raise SolverError(f"vector field returned non-finite values at t={t}")
        return dy

    return f


def _advance_fixed(f, y, ta, tb, config, lin, record=None):
    """March [ta, tb] at step_size, shortening the final sub-step to land on tb."""
    step_fn = _euler_step if config.method == "euler" else _rk4_step
    span = tb - ta
    k = int(np.floor(span / config.step_size + 1e-12))
    rem = span - k * config.step_size
    total = 0
    for j in range(k):
        if record is not None:
            record.append((ta + j * config.step_size, config.step_size, y))
        y, n = step_fn(f, y, ta + j * config.step_size, config.step_size, lin)
        total += n
    if rem > 1e-12 * max(1.0, abs(span)):
        if record is not None:
            record.append((ta + k * config.step_size, rem, y))
        y, n = step_fn(f, y, ta + k * config.step_size, rem, lin)
        total += n
    return y, total


def _advance_adaptive(f, y, ta, tb, config, lin, to_array, record=None):
    """Step-doubling RK4 with per-component tolerance atol + rtol*|state|."""
    t = ta
    dt = min(config.max_step, tb - ta)
    tiny = 1e-12 * max(1.0, abs(tb - ta))
    while t < tb - tiny:
        dt = min(dt, tb - t)
        attempted = dt
        y_full, _ = _rk4_step(f, y, t, dt, lin)
        y_half, _ = _rk4_step(f, y, t, dt / 2.0, lin)
        y_two, _ = _rk4_step(f, y_half, t + dt / 2.0, dt / 2.0, lin)
        est = np.abs(to_array(y_two) - to_array(y_full)) / 15.0
        tol = config.atol + config.rtol * np.abs(to_array(y_two))
        ratio = float(np.max(est / tol))
        if ratio <= 1.0:
            if record is not None:
                # the accepted update is the two half steps, not y_full
                record.append((t, dt / 2.0, y))
                record.append((t + dt / 2.0, dt / 2.0, y_half))
            t = t + dt
            y = y_two
        elif attempted <= config.min_step + tiny:
            raise SolverError(
                f"adaptive step underflow below min_step={config.min_step} at t={t}"
            )
        if ratio == 0.0:
            dt = config.max_step
        else:
            dt = 0.9 * attempted * ratio ** -0.2
        dt = min(max(dt, config.min_step), config.max_step)
    return y


def integrate(field, h0, span, obs_times, config: SolverConfig) -> Trajectory:
    """Integrate ``dh/dt = field(h, t)`` over span, reporting states at obs_times.

    The state may be a Tensor (gradients flow through the solver arithmetic
    when tracking is on) or a plain ndarray.  Fixed-step methods partition
    the span at observation points, so chained sub-span calls reproduce a
    single call exactly.
    """
    t0, t1 = float(span[0]), float(span[1])
    if not t1 > t0:
        raise ValueError(f"span must satisfy t1 > t0, got [{t0}, {t1}]")
    obs = [float(t) for t in obs_times]
    if any(t < t0 - 1e-12 or t > t1 + 1e-12 for t in obs):
        raise ValueError(f"observation times must lie within [{t0}, {t1}]")
    if sorted(obs) != obs:
        raise ValueError("observation times must be sorted")

    report = list(obs)
    if not report or report[-1] < t1 - 1e-12:
        report.append(t1)

    is_tensor = isinstance(h0, Tensor)
    lin = _tensor_lin if is_tensor else _array_lin
    to_array = (lambda y: y.data) if is_tensor else (lambda y: y)
    nfe_box = [0]
    f = _wrap_field(field, nfe_box)

    states = []
    y = h0
    t_prev = t0
    for t_next in report:
        if t_next > t_prev + 1e-12:
            if config.method == "adaptive_rk4":
                y = _advance_adaptive(f, y, t_prev, t_next, config, lin, to_array)
            else:
                y, _ = _advance_fixed(f, y, t_prev, t_next, config, lin)
            t_prev = t_next
        states.append(y)
    return Trajectory(times=report, states=states, nfe=nfe_box[0], t_start=t0,
                      y0=h0)


def integrate_adaptive(field, h0, span, obs_times, config: SolverConfig) -> Trajectory:
    """Step-doubling RK4 with the error control described on SolverConfig."""
    cfg = SolverConfig(
        method="adaptive_rk4", step_size=config.step_size, rtol=config.rtol,
        atol=config.atol, min_step=config.min_step, max_step=config.max_step,
        gradient_mode=config.gradient_mode,
    )
    return integrate(field, h0, span, obs_times, cfg)


# -- adjoint-mode gradients ----------------------------------------------------


def adjoint_backward(field, trajectory: Trajectory, loss_gradient_at_t1, params,
                     config: SolverConfig):
    """Gradients of a terminal-state loss w.r.t. the initial state and params.

    Replays the forward integration on detached values, keeping one stored
    state per elementary step, then sweeps the steps in reverse and
    re-linearizes each one through a local tape (``.grad`` buffers elsewhere
    are never touched).  Differentiating the exact discrete steps keeps the
    result consistent with backprop through the solver at any step size,
    while holding at most one step's tape alive instead of the whole
    trajectory's.

    Returns ``(grad_h0, [grad per param])``.
    """
    t0 = trajectory.t_start
    t1 = float(trajectory.times[-1])
    h1 = trajectory.states[-1]
    h1 = h1.data if isinstance(h1, Tensor) else np.asarray(h1, dtype=np.float64)
    a1 = np.asarray(
        loss_gradient_at_t1.data if isinstance(loss_gradient_at_t1, Tensor)
        else loss_gradient_at_t1, dtype=np.float64)
    if a1.shape != h1.shape:
        raise ValueError(
            f"loss gradient shape {a1.shape} does not match terminal state {h1.shape}"
        )
    if trajectory.y0 is None:
        raise ValueError("trajectory does not carry its initial state; "
                         "pass one produced by integrate()")

    with no_grad():
        probe = field(Tensor(h1), t1)
    probe_arr = probe.data if isinstance(probe, Tensor) else np.asarray(probe)
    if probe_arr.shape != h1.shape:
        raise ValueError(
            f"field output shape {probe_arr.shape} does not match trajectory "
            f"state shape {h1.shape}; field and trajectory disagree"
        )

    y0 = trajectory.y0
    y0 = y0.data if isinstance(y0, Tensor) else np.asarray(y0, dtype=np.float64)

    nfe_box = [0]
    f = _wrap_field(field, nfe_box)
    record = []
    with no_grad():
        y = Tensor(y0)
        t_prev = t0
        for t_next in trajectory.times:
            if t_next > t_prev + 1e-12:
                if config.method == "adaptive_rk4":
                    y = _advance_adaptive(f, y, t_prev, t_next, config,
                                          _tensor_lin, lambda v: v.data,
                                          record=record)
                else:
                    y, _ = _advance_fixed(f, y, t_prev, t_next, config,
                                          _tensor_lin, record=record)
                t_prev = t_next
    if not np.allclose(y.data, h1, rtol=1e-9, atol=1e-9):
        raise ValueError("replayed terminal state does not match the "
                         "trajectory; field and trajectory disagree")

    step_fn = _euler_step if config.method == "euler" else _rk4_step
    a = a1
    param_grads = [np.zeros_like(p.data) for p in params]
    for t, dt, y_in in reversed(record):
        ht = Tensor(y_in.data, requires_grad=True)
        with enable_grad():
            y_out, _ = step_fn(field, ht, t, dt, _tensor_lin)
            grads = vjp(y_out, [ht] + list(params), seed=a)
        a = grads[id(ht)]
        for acc, p in zip(param_grads, params):
            acc += grads[id(p)]
    return a, param_grads


def odeint(field, params, h0: Tensor, span, obs_times, config: SolverConfig) -> Trajectory:
    """Integrate with gradients handled per ``config.gradient_mode``.

    ``backprop_through_solver`` runs the solver arithmetic on the tape.
    ``adjoint`` integrates without recording and splices a custom tape node
    whose backward rule solves the adjoint equations; only the terminal
    state carries gradients in that mode.
    """
    if config.gradient_mode == "backprop_through_solver":
        return integrate(field, h0, span, obs_times, config)

    with no_grad():
        traj = integrate(field, h0.detach(), span, obs_times, config)

    from .tensor import TapeNode, is_grad_enabled

    terminal = traj.states[-1]
    parents = tuple([h0] + list(params))
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out = Tensor.__new__(Tensor)
        out.data = terminal.data if isinstance(terminal, Tensor) else terminal
        out.grad = None
        out.name = None
        out.requires_grad = True

        def vjp_fn(g):
            grad_h0, param_grads = adjoint_backward(field, traj, g, list(params), config)
            return (grad_h0,) + tuple(param_grads)

        out.node = TapeNode("odeint_adjoint", parents, vjp_fn)
        traj.states[-1] = out
    return traj
