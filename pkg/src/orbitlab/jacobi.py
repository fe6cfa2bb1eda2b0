"""Jacobi-Maupertuis correspondence between orbits and geodesics.

At energy E, orbits of L = F^2/2 - U reparametrize to unit-speed geodesics
of the conformal metric Fbar^2 = 2 (E - U) F^2 on the interior of the well
{U < E}, and back.  The conformal factor degenerates on the boundary
{U = E}, so every operation here guards a positive floor on E - U;
boundary-touching work (brake orbits) stays in the time parametrization.

Both reparametrizations integrate the scalar exchange rate with the same
embedded Runge-Kutta scheme used for the flows, never by quadrature of
samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import expr as ex
from . import geometry as geo
from . import rk
from .dynamics import ExprPotential, SystemSpec, Trajectory, integrate, PhaseState
from .errors import OrbitLabError
from .expr import val_of
from .geometry import MetricModel

__all__ = [
    "JacobiError",
    "DegeneracyError",
    "EnergyMismatchError",
    "JacobiMetric",
    "GeodesicCurve",
    "OrbitCurve",
    "jacobi_f2",
    "jacobi_geodesic_coefficients",
    "orbit_to_geodesic",
    "geodesic_to_orbit",
    "geodesic_flow_system",
]


class JacobiError(OrbitLabError):
    pass


class DegeneracyError(JacobiError):
    """Raised when the Jacobi metric is queried at or beyond the well boundary."""


class EnergyMismatchError(JacobiError):
    pass


@dataclass
class JacobiMetric:
    """Conformal kinetic model 2 (E - U(x)) F^2 with a degeneracy floor."""

    spec: SystemSpec
    delta_floor: float | None = None

    def __post_init__(self):
        if self.delta_floor is None:
            self.delta_floor = 1e-8 * (1.0 + abs(self.spec.energy))

    @property
    def energy(self) -> float:
        return self.spec.energy

    def psi(self, x):
        """Conformal factor 2 (E - U(x)); generic over scalar type."""
        return 2.0 * (self.spec.energy - self.spec.potential.value(list(x)))

    def psi_gradient(self, x):
        grad_u = self.spec.potential.gradient(list(x))
        return [-2.0 * g for g in grad_u]

    def margin(self, x) -> float:
        return self.spec.energy - val_of(self.spec.potential.value(list(x)))

    def check_interior(self, x):
        m = self.margin(x)
        if m <= self.delta_floor:
            raise DegeneracyError(
                f"point at margin E - U = {m:.3e} is outside the admissible "
                f"well interior (floor {self.delta_floor:.3e})"
            )

    @property
    def conformal_model(self) -> MetricModel:
        """The conformal metric as an expression-level MetricModel.

        Requires an expression-backed potential; the closed form is
        psi(x) = 2 (E - U(x)) multiplying the base coefficients.
        """
        model = getattr(self, "_conformal_model", None)
        if model is not None:
            return model
        pot = self.spec.potential
        if not isinstance(pot, ExprPotential):
            raise JacobiError(
                "conformal expression model needs an expression potential"
            )
        psi = ex.mul(
            ex.const(2.0), ex.sub(ex.const(self.spec.energy), pot.node)
        )
        base = self.spec.metric
        if base.kind == "riemannian":
            entries = [
                [ex.mul(psi, base.g_exprs[i][j]) for j in range(base.dimension)]
                for i in range(base.dimension)
            ]
            model = MetricModel.riemannian(entries, base.space)
        else:
            model = MetricModel.finsler(
                ex.mul(psi, base.f2_expr), base.dimension, base.space
            )
        self._conformal_model = model
        return model


def jacobi_f2(jm: JacobiMetric, x, v):
    """Fbar^2(x, v) = 2 (E - U(x)) F^2(x, v) on the well interior."""
    jm.check_interior(x)
    return jm.psi(x) * geo.f_squared(jm.spec.metric, list(x), list(v))


def jacobi_geodesic_coefficients(jm: JacobiMetric, x, v):
    """Spray of the conformal metric via the closed conformal correction.

    Gbar = G + (1/(4 psi)) { 2 (grad psi . v) v - g^{-1} grad psi F^2 }.
    Must agree with the geometry kernel applied to the conformal expression
    model; both routes are exercised against each other in the tests.
    """
    jm.check_interior(x)
    base = jm.spec.metric
    n = base.dimension
    g = geo.metric_tensor(base, list(x), list(v), check=False)
    spray = geo.geodesic_coefficients(base, list(x), list(v))
    psi = jm.psi(x)
    dpsi = jm.psi_gradient(x)
    f2 = geo.f_squared(base, list(x), list(v))
    dpsi_v = geo.dot(dpsi, v)
    pull = geo.solve_linear(g, dpsi)
    return [
        spray[i] + (2.0 * dpsi_v * v[i] - pull[i] * f2) / (4.0 * psi)
        for i in range(n)
    ]


def geodesic_flow_system(jm: JacobiMetric) -> SystemSpec:
    """Zero-potential system whose Lagrangian flow is the Fbar geodesic flow."""
    model = jm.conformal_model
    zero = ExprPotential(ex.const(0.0), model.dimension)
    return SystemSpec(model, zero, 0.5)


# ---------------------------------------------------------------------------
# Reparametrized curves
# ---------------------------------------------------------------------------

def _dense_scalar(result: rk.RKResult, w: float) -> float:
    segs = result.segments
    lo, hi = segs[0].t0, segs[-1].t1
    w = min(max(w, lo), hi)
    import bisect as _b

    idx = _b.bisect_right([s.t0 for s in segs], w) - 1
    idx = min(max(idx, 0), len(segs) - 1)
    return float(segs[idx].eval(w)[0])


@dataclass
class GeodesicCurve:
    """Arc-length picture of an orbit: positions indexed by Fbar arc length."""

    jm: JacobiMetric
    source: Trajectory
    t_of_s: rk.RKResult
    s_total: float
    max_unit_speed_error: float = 0.0

    @property
    def t0(self) -> float:
        return 0.0

    @property
    def t1(self) -> float:
        return self.s_total

    def time_at(self, s: float) -> float:
        return _dense_scalar(self.t_of_s, s)

    def position(self, s: float) -> np.ndarray:
        return self.source.position(self.time_at(s))

    def velocity(self, s: float) -> np.ndarray:
        t = self.time_at(s)
        psi = val_of(self.jm.psi(self.source.position(t)))
        return self.source.velocity(t) / psi

    def acceleration(self, s: float) -> np.ndarray:
        """Second s-derivative, from the equations of motion (no differencing)."""
        from .dynamics import lagrange_rhs

        t = self.time_at(s)
        x = self.source.position(t)
        v = self.source.velocity(t)
        psi = val_of(self.jm.psi(x))
        dpsi = np.array([val_of(c) for c in self.jm.psi_gradient(x)])
        acc_t = np.array(
            [val_of(c) for c in lagrange_rhs(self.jm.spec, list(x), list(v))]
        )
        return acc_t / psi**2 - v * float(np.dot(dpsi, v)) / psi**3


@dataclass
class OrbitCurve:
    """Time picture of a unit-speed geodesic of the conformal metric."""

    jm: JacobiMetric
    source: object  # anything with position(s), velocity(s)
    s_of_t: rk.RKResult
    t_total: float

    @property
    def t0(self) -> float:
        return 0.0

    @property
    def t1(self) -> float:
        return self.t_total

    def arclength_at(self, t: float) -> float:
        return _dense_scalar(self.s_of_t, t)

    def position(self, t: float) -> np.ndarray:
        return self.source.position(self.arclength_at(t))

    def velocity(self, t: float) -> np.ndarray:
        s = self.arclength_at(t)
        x = self.source.position(s)
        psi = val_of(self.jm.psi(x))
        return self.source.velocity(s) * psi


def _check_trajectory_energy(jm: JacobiMetric, traj: Trajectory):
    if traj.energies is None:
        raise EnergyMismatchError("trajectory carries no recorded energies")
    err = float(np.max(np.abs(traj.energies - jm.energy)))
    if err > 1e-6:
        raise EnergyMismatchError(
            f"trajectory energy deviates from E by {err:.3e} (> 1e-6)"
        )


def orbit_to_geodesic(traj: Trajectory, jm: JacobiMetric) -> GeodesicCurve:
    """Reparametrize an energy-E orbit by Fbar arc length.

    The exchange rate ds/dt = 2 (E - U(x(t))) is integrated with the same
    Runge-Kutta scheme as the flow; the monotone inverse t(s) is produced by
    integrating dt/ds = 1 / psi over the accumulated length.
    """
    _check_trajectory_energy(jm, traj)
    n = jm.spec.dimension

    # interior guard along the whole curve, including between samples
    for t in np.linspace(traj.t0, traj.t1, 4 * len(traj.ts) + 1):
        jm.check_interior(traj.position(float(t)))

    def ds_dt(t, s):
        return [val_of(jm.psi(traj.position(t)))]

    fwd = rk.solve_rk45(
        ds_dt, (traj.t0, traj.t1), [0.0], rtol=1e-12, atol=1e-14, dense=True
    )
    s_total = float(val_of(fwd.y_final[0]))

    def dt_ds(s, t):
        return [1.0 / val_of(jm.psi(traj.position(float(val_of(t[0])))))]

    inv = rk.solve_rk45(
        dt_ds, (0.0, s_total), [traj.t0], rtol=1e-12, atol=1e-14, dense=True
    )
    curve = GeodesicCurve(jm, traj, inv, s_total)

    err = 0.0
    for s in np.linspace(0.0, s_total, 65):
        x = curve.position(float(s))
        xp = curve.velocity(float(s))
        f2 = val_of(jacobi_f2(jm, list(x), list(xp)))
        err = max(err, abs(f2 - 1.0))
    curve.max_unit_speed_error = err
    if err > 1e-6:
        raise EnergyMismatchError(
            f"mapped curve fails the unit-speed condition by {err:.3e}"
        )
    return curve


def geodesic_to_orbit(curve, jm: JacobiMetric) -> OrbitCurve:
    """Map a unit-speed Fbar geodesic back to a time-parametrized orbit.

    ``curve`` needs position(s)/velocity(s) over [curve.t0, curve.t1]; a
    Trajectory of the conformal flow or a GeodesicCurve both qualify.
    """
    s0, s1 = curve.t0, curve.t1

    # precondition: unit Fbar speed within 1e-6
    for s in np.linspace(s0, s1, 33):
        x = curve.position(float(s))
        xp = curve.velocity(float(s))
        f2 = val_of(jacobi_f2(jm, list(x), list(xp)))
        if abs(f2 - 1.0) > 1e-6:
            raise EnergyMismatchError(
                f"input curve is not unit-speed (Fbar^2 = {f2:.8f} at s={s:.3f})"
            )

    def dt_ds(s, t):
        return [1.0 / val_of(jm.psi(curve.position(float(s))))]

    fwd = rk.solve_rk45(
        dt_ds, (s0, s1), [0.0], rtol=1e-12, atol=1e-14, dense=True
    )
    t_total = float(val_of(fwd.y_final[0]))

    def ds_dt(t, s):
        x = curve.position(float(val_of(s[0])))
        return [val_of(jm.psi(x))]

    inv = rk.solve_rk45(
        ds_dt, (0.0, t_total), [s0], rtol=1e-12, atol=1e-14, dense=True
    )
    return OrbitCurve(jm, curve, inv, t_total)
