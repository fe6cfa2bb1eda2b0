"""Detection and classification of orbit intersections.

Candidate coincidences come from a uniform spatial hash over a dense
polyline resampling of the orbit (cell size comparable to the largest
segment, bounding boxes inflated by the acceptance margin so that no
near-miss can straddle a cell boundary unseen).  Candidates are refined by a
damped Newton iteration on the squared separation of the two strands using
dense trajectory output, then classified by the angle between the refined
velocities:

* ``reversal``     -- antiparallel strands; on a brake orbit these are the
                      retrace coincidences with s + t = tau (mod tau) and are
                      never double points,
* ``double_point`` -- genuinely transversal crossings,
* ``tangential``   -- parallel within the angular tolerance; reported as an
                      ambiguity because transversality cannot be certified.

Pairs whose refinement stalls between the acceptance and rejection
thresholds are reported in ``unresolved`` rather than silently dropped.
An O(N^2) all-pairs candidate generator doubles as an independent oracle;
both routes share refinement and classification and must produce identical
reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OrbitLabError
from .orbits import PeriodicOrbit

__all__ = [
    "IntersectionPair",
    "IntersectionReport",
    "self_intersections",
    "mutual_intersections",
]

_NEAR_MISS_FACTOR = 10.0


@dataclass
class IntersectionPair:
    s: float
    t: float
    point: np.ndarray
    kind: str  # double_point | reversal | tangential | near_miss | stalled
    gap: float


@dataclass
class IntersectionReport:
    pairs: list = field(default_factory=list)
    unresolved: list = field(default_factory=list)
    dp_count: int = 0
    reversal_count: int = 0
    tangential_count: int = 0

    def to_dict(self) -> dict:
        def pair_dict(p):
            return {
                "s": p.s,
                "t": p.t,
                "point": [float(c) for c in p.point],
                "kind": p.kind,
                "gap": p.gap,
            }

        return {
            "pairs": [pair_dict(p) for p in self.pairs],
            "unresolved": [pair_dict(p) for p in self.unresolved],
            "dp_count": self.dp_count,
            "reversal_count": self.reversal_count,
            "tangential_count": self.tangential_count,
        }


# ---------------------------------------------------------------------------
# Polyline machinery
# ---------------------------------------------------------------------------

class _Strand:
    """Dense-output view of one periodic orbit plus its polyline."""

    def __init__(self, orbit: PeriodicOrbit, max_step: float | None):
        self.orbit = orbit
        self.space = orbit.spec.metric.space
        self.n = orbit.spec.dimension
        self.period = orbit.period
        pts = self._resample(1024)
        diam = float(
            np.max(np.max(pts, axis=0) - np.min(pts, axis=0))
        )
        self.diameter = max(diam, 1e-12)
        if max_step is None:
            max_step = self.diameter / 512.0
        self.max_step = max_step
        count = 1024
        while count < 65536:
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1).max()
            if seg <= max_step:
                break
            count *= 2
            pts = self._resample(count)
        self.ts = np.linspace(0.0, self.period, len(pts))
        self.pts = pts

    def _resample(self, count: int) -> np.ndarray:
        ts = np.linspace(0.0, self.period, count + 1)
        return np.array([self.orbit.trajectory.position(float(t)) for t in ts])

    def position(self, t: float) -> np.ndarray:
        return self.orbit.trajectory.position(self._clamp(t))

    def velocity(self, t: float) -> np.ndarray:
        return self.orbit.trajectory.velocity(self._clamp(t))

    def acceleration(self, t: float) -> np.ndarray:
        return self.orbit.trajectory.state_derivative(self._clamp(t))[self.n :]

    def _clamp(self, t: float) -> float:
        return float(min(max(t, 0.0), self.period))

    def wrap_param(self, t: float) -> float:
        return float(np.mod(t, self.period))


def _segment_boxes(pts: np.ndarray):
    lo = np.minimum(pts[:-1], pts[1:])
    hi = np.maximum(pts[:-1], pts[1:])
    return lo, hi


def _hash_candidates(strand_a: _Strand, strand_b: _Strand | None, margin: float):
    """Segment index pairs sharing an inflated spatial-hash cell."""
    same = strand_b is None
    if same:
        strand_b = strand_a
    la, ha = _segment_boxes(strand_a.pts)
    lb, hb = _segment_boxes(strand_b.pts)
    cell = max(
        float(np.max(ha - la)), float(np.max(hb - lb)), 1e-12
    )
    space = strand_a.space
    periods = None
    if space.kind == "torus":
        periods = np.asarray(space.periods)
        ncells = np.maximum(np.ceil(periods / cell).astype(int), 1)

    grid: dict = {}

    def insert(tag: int, lo, hi, idx):
        lo = lo - margin
        hi = hi + margin
        lo_c = np.floor(lo / cell).astype(int)
        hi_c = np.floor(hi / cell).astype(int)
        ranges = [range(lo_c[d], hi_c[d] + 1) for d in range(len(lo))]
        keys = [()]
        for d, rng in enumerate(ranges):
            keys = [
                k + ((c % ncells[d]) if periods is not None else c,)
                for k in keys
                for c in rng
            ]
        for key in keys:
            grid.setdefault(key, []).append((tag, idx))

    for i in range(len(la)):
        insert(0, la[i], ha[i], i)
    if not same:
        for j in range(len(lb)):
            insert(1, lb[j], hb[j], j)

    pairs = set()
    for bucket in grid.values():
        for a in range(len(bucket)):
            for b in range(a + 1, len(bucket)):
                (tag_i, i), (tag_j, j) = bucket[a], bucket[b]
                if same:
                    if i != j:
                        pairs.add((min(i, j), max(i, j)))
                elif tag_i != tag_j:
                    pairs.add((i, j) if tag_i == 0 else (j, i))
    return sorted(pairs)


def _brute_candidates(strand_a: _Strand, strand_b: _Strand | None, margin: float):
    """All segment pairs whose inflated boxes overlap (minimal-image aware).

    Row-chunked so the N^2 broadcast stays memory-bounded.
    """
    same = strand_b is None
    if same:
        strand_b = strand_a
    la, ha = _segment_boxes(strand_a.pts)
    lb, hb = _segment_boxes(strand_b.pts)
    ca, cb = 0.5 * (la + ha), 0.5 * (lb + hb)
    ea, eb = 0.5 * (ha - la), 0.5 * (hb - lb)
    space = strand_a.space
    periods = np.asarray(space.periods) if space.kind == "torus" else None
    out = []
    chunk = max(1, 2**22 // max(len(cb), 1))
    for start in range(0, len(ca), chunk):
        stop = min(start + chunk, len(ca))
        d = ca[start:stop, None, :] - cb[None, :, :]
        if periods is not None:
            d -= periods * np.round(d / periods)
        tol = ea[start:stop, None, :] + eb[None, :, :] + margin
        overlap = np.all(np.abs(d) <= tol, axis=2)
        ii, jj = np.nonzero(overlap)
        ii = ii + start
        if same:
            mask = ii < jj
            ii, jj = ii[mask], jj[mask]
        out.extend(zip(ii.tolist(), jj.tolist()))
    return sorted(out)


def _param_gap_circular(a: float, b: float, period: float) -> float:
    d = abs(math.fmod(a - b, period))
    return min(d, period - d)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def _refine_pair(sa: _Strand, sb: _Strand, s0: float, t0: float, max_iter: int = 60):
    """Damped Newton on half the squared separation; returns (s, t, gap, ok)."""
    space = sa.space
    s, t = s0, t0
    lam = 1e-10

    def gap_at(s, t):
        d = space.delta(sa.position(s), sb.position(t))
        return d, float(np.dot(d, d))

    d, f2 = gap_at(s, t)
    for _ in range(max_iter):
        vs = sa.velocity(s)
        vt = sb.velocity(t)
        acs = sa.acceleration(s)
        act = sb.acceleration(t)
        grad = np.array([float(np.dot(d, vs)), -float(np.dot(d, vt))])
        hess = np.array(
            [
                [float(np.dot(vs, vs) + np.dot(d, acs)), -float(np.dot(vs, vt))],
                [-float(np.dot(vs, vt)), float(np.dot(vt, vt) - np.dot(d, act))],
            ]
        )
        gnorm = float(np.max(np.abs(grad)))
        scale = max(np.linalg.norm(vs), np.linalg.norm(vt), 1e-12)
        if gnorm < 1e-14 * scale * (1.0 + math.sqrt(f2)):
            return s, t, math.sqrt(f2), True
        stepped = False
        for _ in range(25):
            try:
                step = np.linalg.solve(hess + lam * np.eye(2), -grad)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-8)
                continue
            s_new, t_new = s + step[0], t + step[1]
            d_new, f2_new = gap_at(s_new, t_new)
            if f2_new <= f2 * (1.0 + 1e-15) + 1e-300:
                improved = f2 - f2_new
                s, t, d, f2 = s_new, t_new, d_new, f2_new
                lam = max(lam * 0.3, 1e-12)
                stepped = True
                if improved <= 1e-16 * (1.0 + f2):
                    return s, t, math.sqrt(f2), True
                break
            lam = max(lam * 10.0, 1e-8)
        if not stepped:
            return s, t, math.sqrt(f2), False
    return s, t, math.sqrt(f2), False


def _classify_angle(va, vb, tol_angle: float) -> str:
    ua = va / np.linalg.norm(va)
    ub = vb / np.linalg.norm(vb)
    c = float(np.dot(ua, ub))
    threshold = math.cos(tol_angle)
    if c >= threshold:
        return "parallel"
    if c <= -threshold:
        return "antiparallel"
    return "transversal"


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------

def _scan(
    strand_a: _Strand,
    strand_b: _Strand | None,
    tol_space: float | None,
    tol_angle: float,
    brute_force: bool,
):
    same = strand_b is None
    sb = strand_a if same else strand_b
    diam = max(strand_a.diameter, sb.diameter)
    if tol_space is None:
        tol_space = 1e-6 * diam
    reject_gap = _NEAR_MISS_FACTOR * tol_space
    margin = reject_gap

    if brute_force:
        candidates = _brute_candidates(strand_a, None if same else sb, margin)
    else:
        candidates = _hash_candidates(strand_a, None if same else sb, margin)

    n_seg_a = len(strand_a.pts) - 1
    dt_a = strand_a.period / n_seg_a
    dt_b = sb.period / (len(sb.pts) - 1)
    guard = 4

    accepted: list[IntersectionPair] = []
    unresolved: list[IntersectionPair] = []
    valley_keys: list[float] = []  # (s + t) mod tau of reversal clusters

    def near_existing(s_mid: float, t_mid: float) -> bool:
        for p in accepted:
            if p.kind == "reversal" and same:
                key = math.fmod(s_mid + t_mid, strand_a.period)
                if _param_gap_circular(key, p.s + p.t, strand_a.period) < 6 * dt_a:
                    return True
            else:
                if (
                    _param_gap_circular(s_mid, p.s, strand_a.period) < 6 * dt_a
                    and _param_gap_circular(t_mid, p.t, sb.period) < 6 * dt_b
                ):
                    return True
        for p in unresolved:
            if (
                _param_gap_circular(s_mid, p.s, strand_a.period) < 6 * dt_a
                and _param_gap_circular(t_mid, p.t, sb.period) < 6 * dt_b
            ):
                return True
        return False

    for i, j in candidates:
        if same:
            ring = min(abs(i - j), n_seg_a - abs(i - j))
            if ring <= guard:
                continue
        s_mid = float(strand_a.ts[i] + 0.5 * dt_a)
        t_mid = float(sb.ts[j] + 0.5 * dt_b)
        if near_existing(s_mid, t_mid):
            continue
        s, t, gap, ok = _refine_pair(strand_a, sb, s_mid, t_mid)
        s = strand_a.wrap_param(s)
        t = sb.wrap_param(t)
        if same and _param_gap_circular(s, t, strand_a.period) < 4 * dt_a:
            continue  # collapsed onto the diagonal; not a coincidence
        point = strand_a.space.wrap(strand_a.position(s))
        if not ok and gap > tol_space:
            unresolved.append(IntersectionPair(s, t, point, "stalled", gap))
            continue
        if gap <= tol_space:
            rel = _classify_angle(strand_a.velocity(s), sb.velocity(t), tol_angle)
            if same:
                retrace = (
                    _param_gap_circular(s + t, 0.0, strand_a.period)
                    < 1e-6 * strand_a.period
                )
                if rel == "antiparallel" or (
                    strand_a.orbit.kind == "brake" and retrace
                ):
                    kind = "reversal"
                elif rel == "parallel":
                    kind = "tangential"
                else:
                    kind = "double_point"
            else:
                kind = "tangential" if rel != "transversal" else "double_point"
            accepted.append(IntersectionPair(s, t, point, kind, gap))
        elif gap <= reject_gap:
            unresolved.append(IntersectionPair(s, t, point, "near_miss", gap))
        # gaps beyond the rejection threshold are plain non-intersections

    accepted.sort(key=lambda p: (p.s, p.t))
    unresolved.sort(key=lambda p: (p.s, p.t))

    # distinct double points by location (minimal-image metric)
    space = strand_a.space
    dp_points: list[np.ndarray] = []
    cluster_tol = max(8.0 * tol_space, 1e-9 * diam)
    for p in accepted:
        if p.kind != "double_point":
            continue
        if all(
            np.linalg.norm(space.delta(p.point, q)) > cluster_tol for q in dp_points
        ):
            dp_points.append(p.point)

    reversal_keys: list[float] = []
    for p in accepted:
        if p.kind != "reversal":
            continue
        key = math.fmod(p.s + p.t, strand_a.period)
        if all(
            _param_gap_circular(key, k, strand_a.period) > 6 * dt_a
            for k in reversal_keys
        ):
            reversal_keys.append(key)

    report = IntersectionReport(
        pairs=accepted,
        unresolved=unresolved,
        dp_count=len(dp_points),
        reversal_count=len(reversal_keys),
        tangential_count=sum(1 for p in accepted if p.kind == "tangential"),
    )
    return report


def self_intersections(
    orbit: PeriodicOrbit,
    tol_space: float | None = None,
    tol_angle: float = 1e-3,
    max_step: float | None = None,
    brute_force: bool = False,
) -> IntersectionReport:
    """Self-coincidences of one periodic orbit, classified.

    For a rotation, equal positions at different times have linearly
    independent velocities, so tangential hits on rotations indicate a
    tolerance failure; they surface in the report rather than vanish.
    """
    strand = _Strand(orbit, max_step)
    return _scan(strand, None, tol_space, tol_angle, brute_force)


def mutual_intersections(
    a: PeriodicOrbit,
    b: PeriodicOrbit,
    tol_space: float | None = None,
    tol_angle: float = 1e-3,
    max_step: float | None = None,
    brute_force: bool = False,
) -> IntersectionReport:
    """Common points of two geometrically distinct orbits of one system."""
    if a.spec.dimension != b.spec.dimension:
        raise OrbitLabError("orbits must come from the same system")
    strand_a = _Strand(a, max_step)
    strand_b = _Strand(b, max_step)
    return _scan(strand_a, strand_b, tol_space, tol_angle, brute_force)
