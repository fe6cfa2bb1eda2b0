"""Equations of motion and trajectory integration.

A :class:`SystemSpec` couples a kinetic metric model with a potential and an
energy level.  The primary flow lives on the velocity chart (x, v); the
Hamiltonian form is provided for cross-validation and momentum output.  The
integrator records energy drift along every trajectory but never corrects
it.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from . import geometry as geo
from . import rk
from .errors import OrbitLabError
from .expr import Dual, val_of
from .geometry import MetricModel, solve_linear
from .rk import EventSpec, IntegrationError

__all__ = [
    "PotentialField",
    "ExprPotential",
    "SystemSpec",
    "PhaseState",
    "Trajectory",
    "Event",
    "lagrange_rhs",
    "hamilton_rhs",
    "total_energy",
    "integrate",
    "state_rhs",
    "rhs_jacobian",
    "kinetic_minimum_event",
    "write_trajectory_csv",
]


class PotentialField:
    """Scalar field U(x) evaluable over floats or dual scalars."""

    dimension: int

    def value(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def gradient(self, x):
        """Exact gradient via a seeded dual evaluation of :meth:`value`."""
        n = self.dimension
        tag = geo._inner_tag(x)
        seeds = [Dual.seed(x[i], n, i, 1, tag) for i in range(n)]
        out = self.value(seeds)
        if not isinstance(out, Dual) or out.tag != tag:
            return [0.0] * n
        return list(out.grad)


class ExprPotential(PotentialField):
    """Potential defined by an expression over position variables."""

    def __init__(self, node: ex.ExprNode, dimension: int):
        bad = [k for k in ex.variables_of(node) if k >= dimension]
        if bad:
            raise geo.ModelValidityError(
                "potential may depend on position variables only"
            )
        self.node = node
        self.dimension = dimension

    def value(self, x):
        return ex.evaluate(self.node, list(x) + [0.0] * self.dimension)


@dataclass
class SystemSpec:
    """Kinetic metric + potential + fixed energy level."""

    metric: MetricModel
    potential: PotentialField
    energy: float

    def __post_init__(self):
        if isinstance(self.potential, (ex.Const, ex.Var, ex.Unary, ex.Binary)):
            self.potential = ExprPotential(self.potential, self.metric.dimension)
        if not np.isfinite(self.energy):
            raise geo.ModelValidityError("energy level must be finite")

    @property
    def dimension(self) -> int:
        return self.metric.dimension

    def with_potential(self, potential: PotentialField) -> "SystemSpec":
        return SystemSpec(self.metric, potential, self.energy)


@dataclass
class PhaseState:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    def flat(self) -> list[float]:
        return list(self.x) + list(self.v)

    @staticmethod
    def from_flat(z) -> "PhaseState":
        z = np.asarray(z, dtype=float)
        n = z.size // 2
        return PhaseState(z[:n], z[n:])


# ---------------------------------------------------------------------------
# Right-hand sides
# ---------------------------------------------------------------------------

def _finsler_g_and_spray(model: MetricModel, x, v):
    """(g, G) for a Finsler model from one second-order evaluation of F^2."""
    n = model.dimension
    d = geo._finsler_f2_order2(model, x, v)
    g = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            entry = 0.5 * d.hess[n + i][n + j]
            g[i][j] = entry
            g[j][i] = entry
    rhs = []
    for l in range(n):
        acc = -d.grad[l]
        for j in range(n):
            acc = acc + d.hess[j][n + l] * v[j]
        rhs.append(acc)
    spray = [0.25 * s for s in solve_linear(g, rhs)]
    return g, spray


def lagrange_rhs(spec: SystemSpec, x, v):
    """Acceleration of the Lagrangian flow: -2 G(x, v) - g^{-1}(x, v) grad U.

    For a Finsler kinetic model the spray extends continuously by zero to
    v = 0 (degree-2 homogeneity); the metric there is evaluated in the
    direction of steepest descent w = -grad U, which is the direction the
    flow leaves a rest point along.
    """
    model = spec.metric
    n = model.dimension
    grad_u = spec.potential.gradient(x)
    if model.kind == "riemannian":
        g = geo.metric_tensor(model, x, v, check=model._const_g is None)
        spray = geo.geodesic_coefficients(model, x, v)
    else:
        if all(val_of(c) == 0.0 for c in v):
            w = [-c for c in grad_u]
            if all(val_of(c) == 0.0 for c in w):
                raise geo.ModelValidityError(
                    "Finsler flow undefined at a rest point with vanishing grad U"
                )
            g = geo.metric_tensor(model, x, w, check=False)
            spray = [0.0] * n
        else:
            g, spray = _finsler_g_and_spray(model, x, v)
    pull = solve_linear(g, grad_u)
    return [-2.0 * spray[i] - pull[i] for i in range(n)]


def state_rhs(spec: SystemSpec, t, z):
    """First-order form over z = (x, v)."""
    n = spec.dimension
    x, v = z[:n], z[n:]
    acc = lagrange_rhs(spec, x, v)
    return list(v) + acc


def rhs_jacobian(spec: SystemSpec, z):
    """2n x 2n Jacobian of the first-order flow at z, via dual seeding."""
    n = spec.dimension
    m = 2 * n
    seeds = [Dual.seed(float(val_of(c)), m, i, 1, tag=0) for i, c in enumerate(z)]
    out = state_rhs(spec, 0.0, seeds)
    jac = np.zeros((m, m))
    for i, entry in enumerate(out):
        if isinstance(entry, Dual):
            jac[i] = [val_of(g) for g in entry.grad]
    return jac


def hamilton_rhs(spec: SystemSpec, x, y):
    """(xdot, ydot) of the Hamiltonian form; xdot via the Legendre inverse."""
    model = spec.metric
    n = model.dimension
    v = geo.legendre_inverse(model, x, y)
    grad_u = spec.potential.gradient(x)
    if model.kind == "riemannian":
        _, dg = geo._riemannian_g_and_derivs(model, x)
        df2dx = []
        for l in range(n):
            acc = 0.0
            for i in range(n):
                for j in range(n):
                    acc = acc + dg[l][i][j] * v[i] * v[j]
            df2dx.append(acc)
    else:
        tag = geo._inner_tag(list(x) + list(v))
        d = ex.eval_dual(model.f2_expr, list(x) + list(v), list(range(n)), 1, tag)
        df2dx = list(d.grad)
    ydot = [0.5 * df2dx[i] - grad_u[i] for i in range(n)]
    return list(v), ydot


def momentum(spec: SystemSpec, state: PhaseState) -> np.ndarray:
    return np.array(
        [val_of(c) for c in geo.legendre(spec.metric, list(state.x), list(state.v))]
    )


def total_energy(spec: SystemSpec, x, v=None):
    """H(x, v) = F^2(x, v) / 2 + U(x)."""
    if v is None:
        x, v = x.x, x.v  # PhaseState
    f2 = geo.f_squared(spec.metric, list(x), list(v))
    return 0.5 * f2 + spec.potential.value(list(x))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass
class Event:
    """Event over (t, x, v); thin adapter onto the integrator's event spec."""

    fn: object
    direction: int = 0
    terminal: bool = False
    name: str = ""


def kinetic_minimum_event(spec: SystemSpec, terminal: bool = False) -> Event:
    """Fires at minima of the kinetic energy along the flow.

    Energy conservation makes d(KE)/dt = -grad U . v, so KE minima are the
    downward crossings of g = grad U . v.
    """

    def g(t, x, v):
        grad_u = spec.potential.gradient(list(x))
        return float(np.dot(grad_u, v))

    return Event(g, direction=-1, terminal=terminal, name="kinetic_minimum")


@dataclass
class Trajectory:
    """Time-sampled phase curve with dense interpolation between samples."""

    spec: SystemSpec
    ts: np.ndarray
    states: np.ndarray  # (N, 2n)
    segments: list = field(default_factory=list)
    events: list = field(default_factory=list)
    energy_drift: float = 0.0
    energies: np.ndarray | None = None

    @property
    def t0(self) -> float:
        return float(self.ts[0])

    @property
    def t1(self) -> float:
        return float(self.ts[-1])

    def _segment_at(self, t: float):
        if not self.segments:
            raise ValueError("trajectory carries no dense output")
        starts = getattr(self, "_segment_starts", None)
        if starts is None or len(starts) != len(self.segments):
            starts = [s.t0 for s in self.segments]
            self._segment_starts = starts
        idx = bisect.bisect_right(starts, t) - 1
        idx = min(max(idx, 0), len(self.segments) - 1)
        return self.segments[idx]

    def state(self, t: float) -> np.ndarray:
        t = float(t)
        if t <= self.t0:
            return self.states[0].copy()
        if t >= self.t1:
            return self.states[-1].copy()
        return self._segment_at(t).eval(t)

    def state_derivative(self, t: float) -> np.ndarray:
        seg = self._segment_at(min(max(float(t), self.t0), self.t1))
        return seg.eval_derivative(float(t))

    def position(self, t: float) -> np.ndarray:
        n = self.spec.dimension
        return self.state(t)[:n]

    def velocity(self, t: float) -> np.ndarray:
        n = self.spec.dimension
        return self.state(t)[n:]

    def phase(self, t: float) -> PhaseState:
        return PhaseState.from_flat(self.state(t))

    def wrapped_positions(self) -> np.ndarray:
        n = self.spec.dimension
        space = self.spec.metric.space
        return np.array([space.wrap(row[:n]) for row in self.states])


def integrate(
    spec: SystemSpec,
    initial: PhaseState,
    t_span,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    events=(),
    max_step: float | None = None,
    dense: bool = True,
) -> Trajectory:
    """Integrate the Lagrangian flow; the torus chart stays in the cover."""
    n = spec.dimension

    def f(t, z):
        return state_rhs(spec, t, z)

    rk_events = tuple(
        EventSpec(
            fn=lambda t, z, _e=e: _e.fn(t, z[:n], z[n:]),
            direction=e.direction,
            terminal=e.terminal,
            name=e.name,
        )
        for e in events
    )
    res = rk.solve_rk45(
        f,
        t_span,
        initial.flat(),
        rtol=rtol,
        atol=atol,
        max_step=max_step,
        events=rk_events,
        dense=dense,
    )
    energies = np.array(
        [total_energy(spec, row[:n], row[n:]) for row in res.ys]
    )
    drift = float(np.max(np.abs(energies - energies[0])))
    return Trajectory(
        spec=spec,
        ts=res.ts,
        states=res.ys,
        segments=res.segments,
        events=res.events,
        energy_drift=drift,
        energies=energies,
    )


def integrate_sensitivity(
    spec: SystemSpec,
    x0,
    v0,
    t_end: float,
    rtol: float = 1e-11,
    atol: float = 1e-13,
):
    """Integrate with dual-valued initial data and return the final state.

    Step-size control sees only the float part, so the dual coefficients are
    the exact derivatives of the discrete solution map along the accepted
    step sequence.
    """
    z0 = list(x0) + list(v0)

    def f(t, z):
        return state_rhs(spec, t, z)

    res = rk.solve_rk45(
        f, (0.0, t_end), z0, rtol=rtol, atol=atol, events=(), dense=False
    )
    return res.y_final


def write_trajectory_csv(traj: Trajectory, path):
    """CSV schema: t, x1..xn, v1..vn, H with 17 significant digits."""
    n = traj.spec.dimension
    space = traj.spec.metric.space
    header = (
        ["t"]
        + [f"x{i+1}" for i in range(n)]
        + [f"v{i+1}" for i in range(n)]
        + ["H"]
    )
    lines = [",".join(header)]
    for idx, t in enumerate(traj.ts):
        row = traj.states[idx]
        xw = space.wrap(row[:n])
        h = traj.energies[idx] if traj.energies is not None else total_energy(
            traj.spec, row[:n], row[n:]
        )
        cells = (
            [t]
            + list(xw)
            + list(row[n:])
            + [h]
        )
        lines.append(",".join(f"{c:.17g}" for c in cells))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
