"""Finsler / Riemannian geometry kernel.

A :class:`MetricModel` describes the kinetic energy either through a
symmetric matrix of coefficient expressions g_ij(x) (Riemannian case) or a
single expression for F^2(x, v) (Finsler case).  All derived quantities --
fundamental tensor, Cartan tensor, Christoffel symbols, geodesic
coefficients, Legendre transform -- are computed from exact dual-number
derivatives of those expressions.  Finite differences never enter these code
paths; they are reserved for test oracles.

Every operation accepts coordinates as sequences of plain floats or of
:class:`~orbitlab.expr.Dual` scalars, so sensitivities can be propagated
through the whole kernel by seeding the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OrbitLabError
from . import expr as ex
from .expr import Dual, val_of

__all__ = [
    "Space",
    "MetricModel",
    "ModelValidityError",
    "LegendreInversionError",
    "SingularMatrixError",
    "f_squared",
    "metric_tensor",
    "metric_x_derivatives",
    "cartan_tensor",
    "christoffel_first",
    "christoffel_second",
    "geodesic_coefficients",
    "geodesic_coefficients_via_christoffel",
    "legendre",
    "legendre_inverse",
    "solve_linear",
    "mat_vec",
    "dot",
]

_PD_RELATIVE_FLOOR = 1e-12


class ModelValidityError(OrbitLabError):
    """Metric model violates its contract (symmetry, homogeneity, definiteness)."""


class SingularMatrixError(OrbitLabError):
    pass


class LegendreInversionError(OrbitLabError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# Generic small linear algebra (works over floats and Dual scalars)
# ---------------------------------------------------------------------------

def dot(u, v):
    acc = u[0] * v[0]
    for i in range(1, len(u)):
        acc = acc + u[i] * v[i]
    return acc


def mat_vec(a, x):
    return [dot(row, x) for row in a]


def solve_linear(a, b):
    """Gaussian elimination with partial pivoting on the float part."""
    n = len(b)
    m = [list(row) for row in a]
    r = list(b)
    scale = max(max(abs(val_of(e)) for e in row) for row in m) or 1.0
    for col in range(n):
        piv = max(range(col, n), key=lambda i: abs(val_of(m[i][col])))
        if abs(val_of(m[piv][col])) <= 1e-14 * scale:
            raise SingularMatrixError("matrix is singular to working precision")
        if piv != col:
            m[col], m[piv] = m[piv], m[col]
            r[col], r[piv] = r[piv], r[col]
        inv = 1.0 / m[col][col]
        for i in range(col + 1, n):
            f = m[i][col] * inv
            for j in range(col + 1, n):
                m[i][j] = m[i][j] - f * m[col][j]
            r[i] = r[i] - f * r[col]
    out = [0.0] * n
    for i in range(n - 1, -1, -1):
        acc = r[i]
        for j in range(i + 1, n):
            acc = acc - m[i][j] * out[j]
        out[i] = acc / m[i][i]
    return out


def _inner_tag(scalars) -> int:
    tags = [s.tag for s in scalars if isinstance(s, Dual)]
    return max(tags) + 1 if tags else 0


def _as_float_matrix(g):
    return np.array([[val_of(e) for e in row] for row in g], dtype=float)


# ---------------------------------------------------------------------------
# Spaces and models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Space:
    """Configuration space chart: all of R^n or a flat torus with periods."""

    kind: str  # "euclidean" | "torus"
    periods: tuple[float, ...] | None = None

    @staticmethod
    def euclidean() -> "Space":
        return Space("euclidean")

    @staticmethod
    def torus(periods) -> "Space":
        periods = tuple(float(p) for p in periods)
        if any(p <= 0 for p in periods):
            raise ModelValidityError("torus periods must be positive")
        return Space("torus", periods)

    def wrap(self, x):
        """Canonical representative in [0, L_i) per periodic coordinate."""
        x = np.asarray(x, dtype=float)
        if self.kind != "torus":
            return x
        return np.mod(x, np.asarray(self.periods))

    def delta(self, a, b):
        """Displacement a - b, minimal-image on periodic coordinates."""
        d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.kind != "torus":
            return d
        ls = np.asarray(self.periods)
        return d - ls * np.round(d / ls)


@dataclass
class MetricModel:
    """Kinetic-energy model: Riemannian coefficient matrix or Finsler F^2.

    Riemannian entries may depend on positions only; a Finsler F^2 expression
    uses both positions and velocities and must be positively homogeneous of
    degree 2 and reversible in v (spot-checked at construction).
    """

    kind: str  # "riemannian" | "finsler"
    dimension: int
    space: Space
    g_exprs: list | None = None
    f2_expr: ex.ExprNode | None = None
    _const_g: np.ndarray | None = field(default=None, repr=False)

    # -- constructors --------------------------------------------------------

    @staticmethod
    def riemannian(entries, space: Space | None = None) -> "MetricModel":
        """Build from a full or upper-triangular matrix of expressions.

        The stored matrix is symmetrized from the upper triangle, so symmetry
        holds by construction.
        """
        n = len(entries)
        space = space or Space.euclidean()
        g = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                entry = entries[i][j]
                if entry is None:
                    entry = entries[j][i]
                g[i][j] = entry
                g[j][i] = entry
        model = MetricModel("riemannian", n, space, g_exprs=g)
        model._validate()
        return model

    @staticmethod
    def euclidean(dimension: int, space: Space | None = None) -> "MetricModel":
        entries = [
            [ex.const(1.0 if i == j else 0.0) for j in range(dimension)]
            for i in range(dimension)
        ]
        return MetricModel.riemannian(entries, space)

    @staticmethod
    def finsler(f2: ex.ExprNode, dimension: int, space: Space | None = None) -> "MetricModel":
        model = MetricModel("finsler", dimension, space or Space.euclidean(), f2_expr=f2)
        model._validate()
        return model

    # -- validation ----------------------------------------------------------

    def _validate(self):
        n = self.dimension
        if not 1 <= n <= 9:
            raise ModelValidityError("dimension must be between 1 and 9")
        if self.kind == "riemannian":
            for row in self.g_exprs:
                for entry in row:
                    bad = [k for k in ex.variables_of(entry) if k >= n]
                    if bad:
                        raise ModelValidityError(
                            "riemannian coefficients may depend on positions only"
                        )
            if all(
                isinstance(e, ex.Const) for row in self.g_exprs for e in row
            ):
                g = np.array(
                    [[e.value for e in row] for row in self.g_exprs], dtype=float
                )
                _require_positive_definite(g, "constant metric")
                self._const_g = g
        elif self.kind == "finsler":
            self._spot_check_finsler()
        else:
            raise ModelValidityError(f"unknown metric kind {self.kind!r}")

    def _spot_check_finsler(self):
        rng = np.random.default_rng(20240331)
        n = self.dimension
        for _ in range(20):
            x = self._sample_position(rng)
            v = rng.uniform(-1.0, 1.0, n)
            if np.linalg.norm(v) < 0.3:
                v = v + 0.5
            point = list(x) + list(v)
            f2 = val_of(ex.evaluate(self.f2_expr, point))
            tol = 1e-10 * (1.0 + abs(f2))
            for lam in (0.5, 2.0, 3.0):
                scaled = list(x) + list(lam * v)
                f2s = val_of(ex.evaluate(self.f2_expr, scaled))
                if abs(f2s - lam * lam * f2) > tol * lam * lam:
                    raise ModelValidityError(
                        "F^2 is not positively homogeneous of degree 2"
                    )
            mirrored = list(x) + list(-v)
            f2m = val_of(ex.evaluate(self.f2_expr, mirrored))
            if abs(f2m - f2) > tol:
                raise ModelValidityError("F^2 is not reversible")

    def _sample_position(self, rng):
        n = self.dimension
        if self.space.kind == "torus":
            return rng.uniform(0.0, self.space.periods, n)
        return rng.uniform(-1.5, 1.5, n)


def _require_positive_definite(g: np.ndarray, what: str):
    eigs = np.linalg.eigvalsh(g)
    trace = float(np.trace(g))
    if trace <= 0.0 or eigs[0] <= _PD_RELATIVE_FLOOR * trace:
        raise ModelValidityError(
            f"{what} is not positive definite (min eigenvalue {eigs[0]:.3e})"
        )


def _require_nonzero_v(model: MetricModel, v):
    if model.kind == "finsler" and all(val_of(c) == 0.0 for c in v):
        raise ModelValidityError("Finsler metric quantities need v != 0")


# ---------------------------------------------------------------------------
# Core evaluations
# ---------------------------------------------------------------------------

def f_squared(model: MetricModel, x, v):
    """F^2(x, v); for Riemannian models this is g_ij(x) v^i v^j."""
    if model.kind == "finsler":
        return ex.evaluate(model.f2_expr, list(x) + list(v))
    g = _riemannian_g(model, x)
    return dot(v, mat_vec(g, v))


def _riemannian_g(model: MetricModel, x):
    if model._const_g is not None:
        return [[float(e) for e in row] for row in model._const_g]
    n = model.dimension
    values = list(x) + [0.0] * n
    return [
        [ex.evaluate(model.g_exprs[i][j], values) for j in range(n)]
        for i in range(n)
    ]


def _riemannian_g_and_derivs(model: MetricModel, x):
    """(g, dg) with dg[l][i][j] = d g_ij / d x^l, exact via duals."""
    n = model.dimension
    if model._const_g is not None:
        g = [[float(e) for e in row] for row in model._const_g]
        zero = [[[0.0] * n for _ in range(n)] for _ in range(n)]
        return g, zero
    tag = _inner_tag(x)
    values = list(x) + [0.0] * n
    g = [[None] * n for _ in range(n)]
    dg = [[[None] * n for _ in range(n)] for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            d = ex.eval_dual(model.g_exprs[i][j], values, list(range(n)), 1, tag)
            g[i][j] = d.val
            g[j][i] = d.val
            for l in range(n):
                dg[l][i][j] = d.grad[l]
                dg[l][j][i] = d.grad[l]
    return g, dg


def _finsler_f2_order2(model: MetricModel, x, v):
    """Order-2 dual evaluation of F^2 in all 2n directions."""
    tag = _inner_tag(list(x) + list(v))
    return ex.eval_dual(model.f2_expr, list(x) + list(v), None, 2, tag)


def metric_tensor(model: MetricModel, x, v, check: bool = True):
    """Fundamental tensor g_ij(x, v) = half the v-Hessian of F^2."""
    n = model.dimension
    _require_nonzero_v(model, v)
    if model.kind == "riemannian":
        g = _riemannian_g(model, x)
    else:
        d = _finsler_f2_order2(model, x, v)
        g = [[None] * n for _ in range(n)]
        for i in range(n):
            for j in range(i, n):
                entry = 0.5 * d.hess[n + i][n + j]
                g[i][j] = entry
                g[j][i] = entry
    if check:
        _require_positive_definite(_as_float_matrix(g), "fundamental tensor")
    return g


def metric_x_derivatives(model: MetricModel, x, v):
    """(g, dg) with dg[l][i][j] = d g_ij(x, v) / d x^l at fixed v."""
    n = model.dimension
    if model.kind == "riemannian":
        return _riemannian_g_and_derivs(model, x)
    _require_nonzero_v(model, v)
    tag = _inner_tag(list(x) + list(v))
    d = ex.eval_dual(model.f2_expr, list(x) + list(v), None, 3, tag)
    g = [[0.5 * d.hess[n + i][n + j] for j in range(n)] for i in range(n)]
    dg = [
        [[0.5 * d.third[l][n + i][n + j] for j in range(n)] for i in range(n)]
        for l in range(n)
    ]
    return g, dg


def cartan_tensor(model: MetricModel, x, v):
    """Fully symmetric Cartan tensor, one quarter of the third v-derivatives.

    Vanishes identically exactly for Riemannian models, and contracts to zero
    against v in every slot.
    """
    n = model.dimension
    if model.kind == "riemannian":
        return [[[0.0] * n for _ in range(n)] for _ in range(n)]
    _require_nonzero_v(model, v)
    tag = _inner_tag(list(x) + list(v))
    d = ex.eval_dual(model.f2_expr, list(x) + list(v), None, 3, tag)
    return [
        [
            [0.25 * d.third[n + i][n + j][n + k] for k in range(n)]
            for j in range(n)
        ]
        for i in range(n)
    ]


def christoffel_first(model: MetricModel, x, v):
    """gamma_ijl = (d_j g_li + d_i g_jl - d_l g_ij) / 2, indexed [i][j][l]."""
    n = model.dimension
    _, dg = metric_x_derivatives(model, x, v)
    return [
        [
            [
                0.5 * (dg[j][l][i] + dg[i][j][l] - dg[l][i][j])
                for l in range(n)
            ]
            for j in range(n)
        ]
        for i in range(n)
    ]


def christoffel_second(model: MetricModel, x, v):
    """Gamma^k_ij = g^{kl} gamma_ijl, indexed [k][i][j]."""
    n = model.dimension
    g = metric_tensor(model, x, v)
    gamma = christoffel_first(model, x, v)
    out = [[[None] * n for _ in range(n)] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            col = solve_linear(g, [gamma[i][j][l] for l in range(n)])
            for k in range(n):
                out[k][i][j] = col[k]
    return out


def geodesic_coefficients(model: MetricModel, x, v):
    """Spray coefficients G^k(x, v), positively 2-homogeneous in v.

    The geodesic equation reads xdd^k + 2 G^k(x, xd) = 0.  The Finsler branch
    uses the first-order form built from x-derivatives of F^2 (order-2 duals
    suffice); the Riemannian branch contracts the Christoffel data directly.
    """
    n = model.dimension
    if model.kind == "riemannian":
        g, dg = _riemannian_g_and_derivs(model, x)
        if model._const_g is not None:
            return [0.0] * n
        rhs = []
        for l in range(n):
            acc = 0.0
            for i in range(n):
                for j in range(n):
                    acc = acc + (2.0 * dg[j][l][i] - dg[l][i][j]) * v[i] * v[j]
            rhs.append(acc)
        sol = solve_linear(g, rhs)
        return [0.25 * s for s in sol]
    _require_nonzero_v(model, v)
    d = _finsler_f2_order2(model, x, v)
    g = [[0.5 * d.hess[n + i][n + j] for j in range(n)] for i in range(n)]
    rhs = []
    for l in range(n):
        acc = -d.grad[l]
        for j in range(n):
            acc = acc + d.hess[j][n + l] * v[j]
        rhs.append(acc)
    sol = solve_linear(g, rhs)
    return [0.25 * s for s in sol]


def geodesic_coefficients_via_christoffel(model: MetricModel, x, v):
    """G^k = Gamma^k_ij v^i v^j / 2; independent route used as cross-check."""
    n = model.dimension
    gamma2 = christoffel_second(model, x, v)
    out = []
    for k in range(n):
        acc = 0.0
        for i in range(n):
            for j in range(n):
                acc = acc + gamma2[k][i][j] * v[i] * v[j]
        out.append(0.5 * acc)
    return out


# ---------------------------------------------------------------------------
# Legendre transform
# ---------------------------------------------------------------------------

def legendre(model: MetricModel, x, v):
    """Fiberwise momentum map y_i = g_ij(x, v) v^j."""
    _require_nonzero_v(model, v)
    if model.kind == "riemannian":
        return mat_vec(_riemannian_g(model, x), v)
    # equal to g(x,v) v by Euler's relation, at half the evaluation order
    n = model.dimension
    tag = _inner_tag(list(x) + list(v))
    d = ex.eval_dual(
        model.f2_expr, list(x) + list(v), list(range(n, 2 * n)), 1, tag
    )
    return [0.5 * gi for gi in d.grad]


def legendre_inverse(model: MetricModel, x, y, max_iter: int = 50):
    """Invert the momentum map.

    Riemannian: one linear solve.  Finsler: damped Newton on
    y - g(x, v) v = 0, whose Jacobian is g(x, v) itself thanks to the Cartan
    contraction identity; initialized from the metric frozen at direction y.
    """
    n = model.dimension
    if all(val_of(c) == 0.0 for c in y):
        raise ModelValidityError("legendre_inverse needs y != 0")
    if model.kind == "riemannian":
        return solve_linear(_riemannian_g(model, x), y)

    scale = 1.0 + max(abs(val_of(c)) for c in y)
    tol = 1e-13 * scale

    def residual(v):
        yv = legendre(model, x, v)
        return [y[i] - yv[i] for i in range(n)]

    v = solve_linear(metric_tensor(model, x, y, check=False), y)
    r = residual(v)
    rnorm = max(abs(val_of(c)) for c in r)
    for _ in range(max_iter):
        if rnorm <= tol:
            return v
        g = metric_tensor(model, x, v, check=False)
        step = solve_linear(g, r)
        alpha = 1.0
        while alpha >= 2.0**-24:
            v_try = [v[i] + alpha * step[i] for i in range(n)]
            r_try = residual(v_try)
            rn_try = max(abs(val_of(c)) for c in r_try)
            if rn_try < rnorm or rn_try <= tol:
                v, r, rnorm = v_try, r_try, rn_try
                break
            alpha *= 0.5
        else:
            raise LegendreInversionError(
                "damped Newton stalled inverting the Legendre map", rnorm
            )
    raise LegendreInversionError(
        f"Legendre inversion did not converge in {max_iter} iterations", rnorm
    )
