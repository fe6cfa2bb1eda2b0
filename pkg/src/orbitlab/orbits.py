"""Periodic orbits at fixed energy: shooting, monodromy, classification.

Brake orbits are found by a Newton iteration on a rest point constrained to
the boundary {U = E} plus the half-period; reversibility closes the orbit.
Rotations are found by first-return shooting off a section hyperplane with
the seed velocity re-scaled onto the energy level.  Shooting Jacobians come
from dual-number sensitivities transported through the integrator's accepted
steps, so Newton sees the exact derivative of the discrete flow.

Monodromy integrates the variational equations alongside the orbit, with the
flow Jacobian obtained by dual-number differentiation of the equations of
motion at every stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .dynamics import (
    Event,
    PhaseState,
    SystemSpec,
    Trajectory,
    integrate,
    kinetic_minimum_event,
    lagrange_rhs,
    rhs_jacobian,
    state_rhs,
    total_energy,
)
from .errors import OrbitLabError
from .expr import Dual, val_of
from . import rk

__all__ = [
    "PeriodicOrbit",
    "MonodromyReport",
    "PreconditionError",
    "TransversalityError",
    "ConvergenceError",
    "ShootingSingularError",
    "UnsupportedModelError",
    "find_brake",
    "find_rotation",
    "monodromy",
    "verify_degenerate_family",
    "orbit_report_dict",
]


class PreconditionError(OrbitLabError):
    pass


class TransversalityError(PreconditionError):
    pass


class ConvergenceError(OrbitLabError):
    pass


class ShootingSingularError(ConvergenceError):
    """Shooting Jacobian singular; often the signature of a degenerate family."""


class UnsupportedModelError(OrbitLabError):
    pass


@dataclass
class PeriodicOrbit:
    spec: SystemSpec
    trajectory: Trajectory
    period: float
    kind: str  # "brake" | "rotation"
    rest_points: list = field(default_factory=list)  # [(t, position)]
    closure_residual: float = 0.0
    minimal_period_flag: bool = True

    @property
    def energy(self) -> float:
        st = self.trajectory.states[0]
        n = self.spec.dimension
        return float(total_energy(self.spec, st[:n], st[n:]))

    def state(self, t: float) -> np.ndarray:
        return self.trajectory.state(t)


@dataclass
class MonodromyReport:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    trivial_multiplicity: int
    nondegenerate: bool
    det_error: float
    tol_eig: float


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _closure_residual(spec: SystemSpec, z1, z0) -> float:
    n = spec.dimension
    dx = spec.metric.space.delta(z1[:n], z0[:n])
    dv = np.asarray(z1[n:]) - np.asarray(z0[n:])
    return float(np.sqrt(np.dot(dx, dx) + np.dot(dv, dv)))


def _complement_basis(direction: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the hyperplane orthogonal to ``direction``.

    Columns span the complement; deterministic via SVD.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    _, _, vt = np.linalg.svd(d.reshape(1, -1))
    return vt[1:].T


def _project_to_level(spec: SystemSpec, x, max_iter=50):
    """Newton projection of x onto {U = E} along grad U."""
    x = np.asarray(x, dtype=float).copy()
    target = spec.energy
    for _ in range(max_iter):
        u = val_of(spec.potential.value(list(x)))
        if abs(u - target) <= 1e-13 * (1.0 + abs(target)):
            return x
        grad = np.array([val_of(c) for c in spec.potential.gradient(list(x))])
        g2 = float(np.dot(grad, grad))
        if g2 < 1e-12:
            raise PreconditionError(
                "grad U vanishes while projecting the seed onto {U = E}"
            )
        x = x - (u - target) / g2 * grad
    raise ConvergenceError("projection onto {U = E} did not converge")


def _dual_initial(values: np.ndarray, tangent_columns: np.ndarray):
    """Seed duals carrying d(values)/d(parameters) = tangent_columns."""
    m = tangent_columns.shape[1]
    return [
        Dual(m, 1, 0, float(values[i]), [float(c) for c in tangent_columns[i]])
        for i in range(len(values))
    ]


# ---------------------------------------------------------------------------
# Brake orbits
# ---------------------------------------------------------------------------

def find_brake(
    spec: SystemSpec,
    seed,
    t_max: float = 100.0,
    rtol: float = 1e-12,
    atol: float = 1e-14,
    v_tol: float | None = None,
    seed_tol: float | None = None,
    max_newton: int = 30,
) -> PeriodicOrbit:
    """Locate a brake orbit from a rest-point seed near {U = E}.

    Newton unknowns are a local chart of the boundary (graph over its
    tangent plane, re-anchored every step) and the half-period; the residual
    is the full velocity at the half-period.  Reversibility then closes the
    orbit over twice the half-period.
    """
    n = spec.dimension
    e_level = spec.energy
    seed = np.asarray(seed, dtype=float)
    if seed_tol is None:
        seed_tol = 0.5 * (1.0 + abs(e_level))
    if v_tol is None:
        v_tol = 1e-10 * (1.0 + math.sqrt(2.0 * abs(e_level)))

    u_seed = val_of(spec.potential.value(list(seed)))
    if abs(u_seed - e_level) > seed_tol:
        raise PreconditionError(
            f"seed potential U = {u_seed:.6g} too far from E = {e_level:.6g}"
        )
    grad = np.array([val_of(c) for c in spec.potential.gradient(list(seed))])
    if np.linalg.norm(grad) <= 1e-6:
        raise PreconditionError(
            "E is not regular for U near the seed (grad U below 1e-6)"
        )

    p = _project_to_level(spec, seed)

    # Newton works on the discrete flow at a slightly looser tolerance; the
    # returned orbit is re-integrated at the requested accuracy afterwards.
    newton_rtol = max(rtol, 1e-10)
    newton_atol = max(atol, 1e-12)

    # first turning time from a terminal kinetic-energy-minimum event
    probe = integrate(
        spec,
        PhaseState(p, np.zeros(n)),
        (0.0, t_max),
        rtol=1e-9,
        atol=1e-11,
        events=(kinetic_minimum_event(spec, terminal=True),),
        dense=False,
    )
    if not probe.events:
        raise ConvergenceError(f"no turning event within t_max = {t_max}")
    t_half = probe.events[0].t
    t_half_init = t_half

    def velocity_norm_at(p_try: np.ndarray, t_try: float) -> float:
        traj = integrate(
            spec,
            PhaseState(p_try, np.zeros(n)),
            (0.0, t_try),
            rtol=newton_rtol,
            atol=newton_atol,
            dense=False,
        )
        return float(np.max(np.abs(traj.states[-1][n:])))

    from .dynamics import integrate_sensitivity

    res_norm = None
    for _ in range(max_newton):
        grad_p = np.array([val_of(c) for c in spec.potential.gradient(list(p))])
        basis = _complement_basis(grad_p)  # n x (n-1)
        x0 = _dual_initial(p, basis)
        final = integrate_sensitivity(
            spec, x0, [0.0] * n, t_half, rtol=newton_rtol, atol=newton_atol
        )
        v_final = final[n:]
        residual = np.array([val_of(c) for c in v_final])
        res_norm = float(np.max(np.abs(residual)))
        if res_norm <= v_tol:
            break
        jac = np.zeros((n, n))
        for i in range(n):
            entry = v_final[i]
            if isinstance(entry, Dual):
                jac[i, : n - 1] = [val_of(c) for c in entry.grad]
        zf = [val_of(c) for c in final]
        jac[:, n - 1] = lagrange_rhs(spec, zf[:n], zf[n:])
        try:
            step = np.linalg.solve(jac, -residual)
        except np.linalg.LinAlgError as exc:
            raise ShootingSingularError(
                "shooting Jacobian is singular; the orbit may belong to a "
                "degenerate family"
            ) from exc
        alpha = 1.0
        while True:
            p_try = _project_to_level(spec, p + basis @ (alpha * step[: n - 1]))
            t_try = t_half + alpha * step[n - 1]
            if 0.2 * t_half_init <= t_try <= 5.0 * t_half_init:
                trial = velocity_norm_at(p_try, t_try)
                if trial < res_norm or trial <= v_tol:
                    p, t_half = p_try, t_try
                    break
            alpha *= 0.5
            if alpha < 2.0**-14:
                raise ConvergenceError(
                    f"brake-orbit Newton stalled at residual {res_norm:.3e}"
                )
    else:
        raise ConvergenceError(
            f"brake-orbit Newton did not converge (residual {res_norm:.3e})"
        )

    period = 2.0 * t_half
    traj = integrate(
        spec,
        PhaseState(p, np.zeros(n)),
        (0.0, period),
        rtol=rtol,
        atol=atol,
        events=(kinetic_minimum_event(spec),),
        dense=True,
    )
    z0, z1 = traj.states[0], traj.states[-1]
    closure = _closure_residual(spec, z1, z0)
    scale = 1.0 + float(np.linalg.norm(z0))
    if closure >= 1e-8 * scale:
        raise ConvergenceError(
            f"brake orbit failed the closure bound ({closure:.3e})"
        )

    # rest points: kinetic-energy minima that are actual stops
    ke_floor = 1e-14 * (1.0 + abs(e_level))
    interior_rests = []
    for hit in traj.events:
        v = hit.y[n:]
        if 0.5 * float(np.dot(v, v)) < ke_floor and 1e-6 < hit.t < period - 1e-6:
            interior_rests.append(hit.t)
    rest_points = [(0.0, traj.position(0.0).copy()), (t_half, traj.position(t_half).copy())]
    minimal = len(interior_rests) == 1

    # reversibility: the second half retraces the first
    for f in (0.1, 0.25, 0.4):
        dt = f * period / 2.0
        ahead = traj.position(t_half + dt)
        behind = traj.position(t_half - dt)
        if float(np.max(np.abs(ahead - behind))) > 1e-7 * scale:
            raise ConvergenceError("brake orbit violates the retrace symmetry")

    return PeriodicOrbit(
        spec=spec,
        trajectory=traj,
        period=period,
        kind="brake",
        rest_points=rest_points,
        closure_residual=closure,
        minimal_period_flag=minimal,
    )


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def _rotation_seed_scan(spec, traj, z0, t_guard, threshold):
    """First near-return time on a uniform dense grid, or None."""
    n = spec.dimension
    ts = np.linspace(traj.t0, traj.t1, 4096)
    dt = ts[1] - ts[0]
    dists = np.empty(len(ts))
    for i, t in enumerate(ts):
        z = traj.state(float(t))
        dists[i] = _closure_residual(spec, z, z0)
    for k in range(2, len(ts) - 1):
        if ts[k] < t_guard:
            continue
        if dists[k] < threshold and dists[k] <= dists[k - 1] and dists[k] < dists[k + 1]:
            return float(ts[k])
    return None


def find_rotation(
    spec: SystemSpec,
    seed: PhaseState,
    section_normal=None,
    t_max: float = 100.0,
    rtol: float = 1e-12,
    atol: float = 1e-14,
    res_tol: float | None = None,
    return_threshold: float | None = None,
    max_newton: int = 40,
) -> PeriodicOrbit:
    """Locate a rotation by first-return shooting.

    Unknowns: position on the section hyperplane, velocity direction (the
    magnitude is slaved to the energy level), and the return time.  Closure
    is solved in the least-squares sense; energy conservation makes one of
    the 2n closure equations redundant.
    """
    n = spec.dimension
    x_anchor = np.asarray(seed.x, dtype=float).copy()
    v_anchor = np.asarray(seed.v, dtype=float).copy()
    e_level = spec.energy

    h_seed = float(total_energy(spec, x_anchor, v_anchor))
    if abs(h_seed - e_level) > 1e-8 * (1.0 + abs(e_level)):
        raise PreconditionError(
            f"seed energy {h_seed:.8g} does not sit on the level E = {e_level:.8g}"
        )
    speed = float(np.linalg.norm(v_anchor))
    if speed <= 1e-12:
        raise PreconditionError("rotation seed needs a nonzero velocity")
    normal = (
        v_anchor / speed
        if section_normal is None
        else np.asarray(section_normal, dtype=float)
    )
    normal = normal / np.linalg.norm(normal)
    if abs(float(np.dot(normal, v_anchor))) <= 1e-6 * speed:
        raise TransversalityError("seed velocity is tangent to the section")

    scale = 1.0 + float(np.linalg.norm(np.concatenate([x_anchor, v_anchor])))
    if res_tol is None:
        res_tol = 1e-10 * scale
    if return_threshold is None:
        return_threshold = 0.25 * scale

    newton_rtol = max(rtol, 1e-10)
    newton_atol = max(atol, 1e-12)

    z0 = np.concatenate([x_anchor, v_anchor])
    probe = integrate(
        spec, PhaseState(x_anchor, v_anchor), (0.0, t_max), rtol=1e-9, atol=1e-11
    )
    t_ret = _rotation_seed_scan(spec, probe, z0, t_guard=20 * t_max / 4096, threshold=return_threshold)
    if t_ret is None:
        raise ConvergenceError(f"no section return within t_max = {t_max}")

    # fixed winding offset for the cover chart
    space = spec.metric.space
    x_ret = probe.position(t_ret)
    if space.kind == "torus":
        winding = np.asarray(space.periods) * np.round(
            (x_ret - x_anchor) / np.asarray(space.periods)
        )
    else:
        winding = np.zeros(n)

    section_basis = _complement_basis(normal)  # n x (n-1)
    vdir_anchor = v_anchor / speed
    vdir_basis = _complement_basis(vdir_anchor)  # n x (n-1)
    t_period = t_ret
    m = 2 * (n - 1)

    def build_initial(a_b_duals):
        """Seed state (x0, v0) on section x energy level, generic scalars."""
        a = a_b_duals[: n - 1]
        b = a_b_duals[n - 1 :]
        x0 = [
            x_anchor[i] + geo.dot(list(section_basis[i]), a) for i in range(n)
        ]
        d = [
            vdir_anchor[i] + geo.dot(list(vdir_basis[i]), b) for i in range(n)
        ]
        norm2 = geo.dot(d, d)
        dn = [c / norm2**0.5 for c in d]
        u_val = spec.potential.value(x0)
        f2 = geo.f_squared(spec.metric, x0, dn)
        c = (2.0 * (e_level - u_val) / f2) ** 0.5
        v0 = [c * dc for dc in dn]
        return x0, v0

    res_norm = None
    for _ in range(max_newton):
        seeds = [Dual.seed(0.0, m, i, 1, 0) for i in range(m)]
        x0_d, v0_d = build_initial(seeds)
        final = None
        from .dynamics import integrate_sensitivity

        final = integrate_sensitivity(
            spec, x0_d, v0_d, t_period, rtol=newton_rtol, atol=newton_atol
        )
        res_dual = [final[i] - x0_d[i] - winding[i] for i in range(n)]
        res_dual += [final[n + i] - v0_d[i] for i in range(n)]
        residual = np.array([val_of(c) for c in res_dual])
        res_norm = float(np.max(np.abs(residual)))
        if res_norm <= res_tol:
            break
        jac = np.zeros((2 * n, m + 1))
        for i, entry in enumerate(res_dual):
            if isinstance(entry, Dual):
                jac[i, :m] = [val_of(c) for c in entry.grad]
        zf = [val_of(c) for c in final]
        jac[:, m] = state_rhs(spec, 0.0, zf)
        step, *_ = np.linalg.lstsq(jac, -residual, rcond=None)

        def trial_norm(u_step, alpha):
            floats = list(alpha * u_step[:m])
            x0_t, v0_t = build_initial(floats)
            t_t = t_period + alpha * u_step[m]
            traj_t = integrate(
                spec,
                PhaseState(np.array([val_of(c) for c in x0_t]),
                           np.array([val_of(c) for c in v0_t])),
                (0.0, t_t),
                rtol=newton_rtol,
                atol=newton_atol,
                dense=False,
            )
            zt = traj_t.states[-1]
            r = np.concatenate(
                [
                    zt[:n] - np.array([val_of(c) for c in x0_t]) - winding,
                    zt[n:] - np.array([val_of(c) for c in v0_t]),
                ]
            )
            return float(np.max(np.abs(r))), x0_t, v0_t, t_t

        alpha = 1.0
        while True:
            if 0.2 * t_ret <= t_period + alpha * step[m] <= 5.0 * t_ret:
                trial, x0_t, v0_t, t_t = trial_norm(step, alpha)
                if trial < res_norm or trial <= res_tol:
                    x_anchor = np.array([val_of(c) for c in x0_t])
                    vt = np.array([val_of(c) for c in v0_t])
                    vdir_anchor = vt / np.linalg.norm(vt)
                    section_basis = _complement_basis(normal)
                    vdir_basis = _complement_basis(vdir_anchor)
                    t_period = t_t
                    break
            alpha *= 0.5
            if alpha < 2.0**-14:
                raise ConvergenceError(
                    f"rotation Newton stalled at residual {res_norm:.3e}"
                )
    else:
        raise ConvergenceError(
            f"rotation Newton did not converge (residual {res_norm:.3e})"
        )

    x0f, v0f = build_initial([0.0] * m)
    x0f = np.array([val_of(c) for c in x0f])
    v0f = np.array([val_of(c) for c in v0f])
    return _build_rotation(spec, x0f, v0f, t_period, rtol, atol)


def _build_rotation(spec, x0, v0, period, rtol, atol, _depth=0) -> PeriodicOrbit:
    n = spec.dimension
    traj = integrate(spec, PhaseState(x0, v0), (0.0, period), rtol=rtol, atol=atol)
    z0 = traj.states[0]
    closure = _closure_residual(spec, traj.states[-1], z0)
    scale = 1.0 + float(np.linalg.norm(z0))
    if closure >= 1e-8 * scale:
        raise ConvergenceError(f"rotation failed the closure bound ({closure:.3e})")

    # minimality probe: an earlier closure at period/m wins
    if _depth < 4:
        for mdiv in range(2, 7):
            z_frac = traj.state(period / mdiv)
            if _closure_residual(spec, z_frac, z0) < 1e-7 * scale:
                return _build_rotation(
                    spec, x0, v0, period / mdiv, rtol, atol, _depth + 1
                )

    ke_min = math.inf
    for t in np.linspace(0.0, period, 257):
        v = traj.velocity(float(t))
        ke_min = min(ke_min, 0.5 * float(np.dot(v, v)))
    if ke_min <= 1e-10:
        raise ConvergenceError(
            "orbit grazes a rest point; not a rotation (kinetic energy "
            f"minimum {ke_min:.3e})"
        )
    return PeriodicOrbit(
        spec=spec,
        trajectory=traj,
        period=period,
        kind="rotation",
        rest_points=[],
        closure_residual=closure,
        minimal_period_flag=True,
    )


# ---------------------------------------------------------------------------
# Monodromy
# ---------------------------------------------------------------------------

def monodromy(
    spec: SystemSpec,
    orbit: PeriodicOrbit,
    periods: int = 1,
    rtol: float = 1e-10,
    atol: float = 1e-12,
    tol_eig: float = 1e-6,
) -> MonodromyReport:
    """Fundamental solution of the variational equations over the period.

    The flow Jacobian feeding the variational equations is evaluated by
    dual-number differentiation of the equations of motion along the orbit.
    """
    n = spec.dimension
    if spec.metric.kind == "finsler" and orbit.rest_points:
        raise UnsupportedModelError(
            "monodromy across rest points requires a Riemannian kinetic model"
        )
    dim = 2 * n
    z0 = list(orbit.trajectory.states[0])

    def f(t, y):
        z = y[:dim]
        mono = np.array(y[dim:], dtype=float).reshape(dim, dim)
        dz = state_rhs(spec, t, z)
        jac = rhs_jacobian(spec, z)
        dm = jac @ mono
        return list(dz) + [float(c) for c in dm.ravel()]

    y0 = z0 + [float(c) for c in np.eye(dim).ravel()]
    res = rk.solve_rk45(
        f,
        (0.0, periods * orbit.period),
        y0,
        rtol=rtol,
        atol=atol,
        dense=False,
    )
    matrix = np.array(res.y_final[dim:], dtype=float).reshape(dim, dim)
    eigenvalues = np.linalg.eigvals(matrix)
    det_error = abs(float(np.linalg.det(matrix)) - 1.0)
    trivial = int(np.sum(np.abs(eigenvalues - 1.0) < tol_eig))
    return MonodromyReport(
        matrix=matrix,
        eigenvalues=eigenvalues,
        trivial_multiplicity=trivial,
        nondegenerate=trivial == 2,
        det_error=det_error,
        tol_eig=tol_eig,
    )


# ---------------------------------------------------------------------------
# Degenerate-family verification and reports
# ---------------------------------------------------------------------------

@dataclass
class FamilyReport:
    s_values: tuple
    max_residual: float
    energy_spread: float
    period: float
    energies: list


def verify_degenerate_family(
    osc, a1: float = 1.0, a2: float = 0.5, s_values=(0.0, 0.3, 0.7), n_samples: int = 33
) -> FamilyReport:
    """Check the resonant one-parameter family member-by-member.

    Every member must satisfy the equations of motion pointwise and share
    one energy and one minimal period across the family.
    """
    from . import reference as ref

    spec = ref.oscillator_system(osc)
    alphas = np.asarray(osc.alphas)
    period = 2.0 * math.pi / osc.base_frequency
    max_res = 0.0
    energies = []
    for s in s_values:
        e_here = []
        for t in np.linspace(0.0, period, n_samples):
            st = ref.lissajous_family(osc, a1, a2, s, float(t))
            acc = np.array(lagrange_rhs(spec, list(st.x), list(st.v)))
            exact = -(alphas**2) * st.x
            max_res = max(max_res, float(np.max(np.abs(acc - exact))))
            e_here.append(float(total_energy(spec, st.x, st.v)))
        energies.append(float(np.mean(e_here)))
    spread = max(energies) - min(energies)
    return FamilyReport(
        s_values=tuple(s_values),
        max_residual=max_res,
        energy_spread=spread,
        period=period,
        energies=energies,
    )


def orbit_report_dict(orbit: PeriodicOrbit, mono: MonodromyReport | None = None) -> dict:
    out = {
        "kind": orbit.kind,
        "period": orbit.period,
        "energy": orbit.energy,
        "closure_residual": orbit.closure_residual,
        "minimal_period": orbit.minimal_period_flag,
        "rest_points": [
            {"t": float(t), "x": [float(c) for c in x]} for t, x in orbit.rest_points
        ],
    }
    if mono is not None:
        out["eigenvalues"] = [
            [float(ev.real), float(ev.imag)] for ev in mono.eigenvalues
        ]
        out["trivial_multiplicity"] = mono.trivial_multiplicity
        out["nondegenerate"] = mono.nondegenerate
        out["det_error"] = mono.det_error
    return out
