"""Embedded Dormand-Prince 5(4) integrator with dense output and events.

The stepper operates on states given as Python lists of scalars, which may be
plain floats or :class:`~orbitlab.expr.Dual` numbers.  Step-size control
always looks at the float part only, so a run with dual-valued state takes
exactly the accepted-step sequence of the corresponding float run and the
dual coefficients transport the sensitivities of the discrete solution map.

Dense output uses the quartic interpolant associated with the pair (local
order 4), and events are located by sign change plus bisection on the dense
interpolant down to a 1e-12 time tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OrbitLabError
from .expr import Dual, val_of

__all__ = ["EventSpec", "EventHit", "RKResult", "IntegrationError", "solve_rk45"]

_C = (0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0)

_A = (
    (),
    (1.0 / 5.0,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0),
    (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0),
)

# difference between 5th and embedded 4th order weights (7 stages)
_E = (
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
)

# dense-output interpolant coefficients (Shampine's quartic for this pair)
_P = np.array(
    [
        [
            1.0,
            -8048581381.0 / 2820520608.0,
            8663915743.0 / 2820520608.0,
            -12715105075.0 / 11282082432.0,
        ],
        [0.0, 0.0, 0.0, 0.0],
        [
            0.0,
            131558114200.0 / 32700410799.0,
            -68118460800.0 / 10900136933.0,
            87487479700.0 / 32700410799.0,
        ],
        [
            0.0,
            -1754552775.0 / 470086768.0,
            14199869525.0 / 1410260304.0,
            -10690763975.0 / 1880347072.0,
        ],
        [
            0.0,
            127303824393.0 / 49829197408.0,
            -318862633887.0 / 49829197408.0,
            701980252875.0 / 199316789632.0,
        ],
        [
            0.0,
            -282668133.0 / 205662961.0,
            2019193451.0 / 616988883.0,
            -1453857185.0 / 822651844.0,
        ],
        [
            0.0,
            40617522.0 / 29380423.0,
            -110615467.0 / 29380423.0,
            69997945.0 / 29380423.0,
        ],
    ]
)

_SAFETY = 0.9
_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA
_MAX_FACTOR = 5.0
_MIN_FACTOR = 0.1
_EVENT_TIME_TOL = 1e-12


class IntegrationError(OrbitLabError):
    def __init__(self, message: str, t=None, y=None):
        super().__init__(message)
        self.t = t
        self.y = y


@dataclass
class EventSpec:
    """Scalar event g(t, y); fires on sign change of the chosen direction."""

    fn: object
    direction: int = 0  # +1 upward crossings, -1 downward, 0 both
    terminal: bool = False
    name: str = ""


@dataclass
class EventHit:
    index: int
    name: str
    t: float
    y: np.ndarray


@dataclass
class DenseSegment:
    t0: float
    h: float
    y0: np.ndarray
    q: np.ndarray  # (d, 4) interpolant coefficients

    @property
    def t1(self) -> float:
        return self.t0 + self.h

    def eval(self, t: float) -> np.ndarray:
        theta = (t - self.t0) / self.h
        powers = np.array([theta, theta**2, theta**3, theta**4])
        return self.y0 + self.h * (self.q @ powers)

    def eval_derivative(self, t: float) -> np.ndarray:
        theta = (t - self.t0) / self.h
        powers = np.array([1.0, 2.0 * theta, 3.0 * theta**2, 4.0 * theta**3])
        return self.q @ powers


@dataclass
class RKResult:
    ts: np.ndarray
    ys: np.ndarray
    segments: list[DenseSegment]
    events: list[EventHit] = field(default_factory=list)
    y_final: list | None = None
    t_final: float = 0.0
    n_accepted: int = 0
    n_rejected: int = 0


def _float_state(y) -> np.ndarray:
    return np.array([val_of(c) for c in y], dtype=float)


def _error_norm(err, y0, y1, rtol, atol) -> float:
    acc = 0.0
    for e, a, b in zip(err, y0, y1):
        scale = atol + rtol * max(abs(val_of(a)), abs(val_of(b)))
        q = val_of(e) / scale
        acc += q * q
    return float(np.sqrt(acc / len(err)))


def _initial_step(f, t0, y0, f0, t1, rtol, atol, max_step) -> float:
    span = t1 - t0
    y = _float_state(y0)
    fv = _float_state(f0)
    scale = atol + rtol * np.abs(y)
    d0 = float(np.sqrt(np.mean((y / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((fv / scale) ** 2)))
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = [y0[i] + h0 * f0[i] for i in range(len(y0))]
    f1 = f(t0 + h0, y1)
    d2 = (
        float(
            np.sqrt(
                np.mean(((_float_state(f1) - fv) / scale) ** 2)
            )
        )
        / h0
    )
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    h = min(100.0 * h0, h1, span)
    if max_step is not None:
        h = min(h, max_step)
    return max(h, 1e-14 * max(abs(t0), 1.0))


def _bisect_event(segment: DenseSegment, g, t_lo: float, t_hi: float, sign_lo: float):
    while t_hi - t_lo > _EVENT_TIME_TOL:
        mid = 0.5 * (t_lo + t_hi)
        if np.sign(g(mid, segment.eval(mid))) == sign_lo:
            t_lo = mid
        else:
            t_hi = mid
    t_ev = 0.5 * (t_lo + t_hi)
    return t_ev, segment.eval(t_ev)


def solve_rk45(
    f,
    t_span,
    y0,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    max_step: float | None = None,
    events: tuple = (),
    dense: bool = True,
) -> RKResult:
    """Integrate y' = f(t, y) over t_span with the 5(4) pair.

    ``y0`` is a sequence of scalars (floats or duals).  Events and dense
    storage require a pure-float state.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must be increasing")
    if rtol < 1e-13:
        raise ValueError("relative tolerance must be at least 1e-13")
    y = list(y0)
    d = len(y)
    float_mode = not any(isinstance(c, Dual) for c in y)
    if (events or dense) and not float_mode:
        raise ValueError("events and dense output need a float state")

    result = RKResult(ts=np.empty(0), ys=np.empty((0, d)), segments=[])
    ts = [t0]
    ys = [_float_state(y)]

    k = [None] * 7
    t = t0
    fv = f(t, y)
    h = _initial_step(f, t0, y, fv, t1, rtol, atol, max_step)
    facold = 1e-4
    g_prev = None
    if events:
        g_prev = [ev.fn(t, ys[0]) for ev in events]
    finished = False

    while not finished:
        if h < 1e-14 * max(abs(t), 1.0):
            raise IntegrationError(
                f"step size underflow at t={t!r}", t=t, y=_float_state(y)
            )
        if max_step is not None:
            h = min(h, max_step)
        if t + h >= t1:
            h = t1 - t
            finished = True

        k[0] = fv
        for s in range(1, 7):
            a = _A[s]
            yt = [
                y[i] + h * sum(a[l] * k[l][i] for l in range(s) if a[l] != 0.0)
                for i in range(d)
            ]
            k[s] = f(t + _C[s] * h, yt)
        # k[6] is f at the 5th-order solution (FSAL)
        y_new = [
            y[i] + h * sum(_A[6][l] * k[l][i] for l in range(6) if _A[6][l] != 0.0)
            for i in range(d)
        ]
        err_vec = [
            h * sum(_E[l] * k[l][i] for l in range(7) if _E[l] != 0.0)
            for i in range(d)
        ]
        err = _error_norm(err_vec, y, y_new, rtol, atol)

        if err > 1.0:
            # reject: shrink and retry
            fac11 = err**_EXPO
            h = h / min(1.0 / _MIN_FACTOR, fac11 / _SAFETY)
            finished = False
            result.n_rejected += 1
            continue

        result.n_accepted += 1
        t_new = t + h
        segment = None
        if dense or events:
            kmat = np.array([[val_of(c) for c in stage] for stage in k])
            q = kmat.T @ _P
            segment = DenseSegment(t, h, ys[-1].copy(), q)
        if dense:
            result.segments.append(segment)

        stop_at = None
        if events:
            y_new_f = _float_state(y_new)
            g_new = [ev.fn(t_new, y_new_f) for ev in events]
            hits_here = []
            for idx, ev in enumerate(events):
                g0, g1 = g_prev[idx], g_new[idx]
                if g0 == 0.0 or np.sign(g0) == np.sign(g1):
                    continue
                rising = g1 > g0
                if ev.direction == 1 and not rising:
                    continue
                if ev.direction == -1 and rising:
                    continue
                t_ev, y_ev = _bisect_event(segment, ev.fn, t, t_new, np.sign(g0))
                hits_here.append((t_ev, idx, y_ev))
            for t_ev, idx, y_ev in sorted(hits_here):
                result.events.append(EventHit(idx, events[idx].name, t_ev, y_ev))
                if events[idx].terminal and stop_at is None:
                    stop_at = (t_ev, y_ev)
            g_prev = g_new

        if stop_at is not None:
            t_stop, y_stop = stop_at
            ts.append(t_stop)
            ys.append(y_stop)
            y = list(y_stop)
            t = t_stop
            finished = True
        else:
            t = t_new
            y = y_new
            ts.append(t)
            ys.append(_float_state(y))
            fv = k[6]  # FSAL: stage 7 is f at the accepted solution

        # PI step-size controller
        fac11 = max(err, 1e-10) ** _EXPO
        fac = fac11 / (facold**_BETA)
        fac = max(1.0 / _MAX_FACTOR, min(1.0 / _MIN_FACTOR, fac / _SAFETY))
        h = h / fac
        facold = max(err, 1e-4)

    result.ts = np.array(ts)
    result.ys = np.array(ys)
    result.y_final = y
    result.t_final = t
    return result
