"""Polytopes in halfspace form and linear programming on them.

Everything downstream (feasible parameter sets, error bounds, the convex
identification criteria) reduces to linear programs over polytopes

    P = {x : A x <= b, lb <= x <= ub}.

Two solver routes are used.  General one-off programs go to scipy's HiGHS
interface.  The support-function workload (thousands of objectives over one
fixed polytope) runs on a purpose-built active-set engine that walks between
vertices, reuses each optimal basis to batch-certify the remaining
objectives, and falls back to HiGHS on any numerical trouble.  Both routes
certify the returned point: feasibility by direct substitution, optimality
through the sign of the basic multipliers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linprog

from .errors import ConfigError, NumericalError

# Default coordinate box standing in for "no prior bound".
OMEGA_BOX = 1e15
# Declared-feasibility tolerance (relative to constraint scale).
FEAS_TOL = 1e-9
# Optimality / duality tolerance.
OPT_TOL = 1e-7
# The active-set engine only runs on boxes up to this size; beyond it the
# slack arithmetic loses too many digits and HiGHS (with scaling) is safer.
ENGINE_BOX_LIMIT = 1e9
# Bounds at least this large count as stand-ins for "unbounded" and may be
# freed when retrying a numerically stuck solve.
_FREE_THRESH = 1e13

_BLAND_TRIGGER = 30      # degenerate pivots before switching to Bland's rule
_MAX_PIVOTS = 20000
_REFRESH_EVERY = 50      # pivots between basis-inverse refreshes


class _EngineFailure(Exception):
    """Internal: active-set engine gave up; caller reroutes to HiGHS."""


@dataclass(frozen=True)
class Polytope:
    """{x : a x <= b, lb <= x <= ub} with a possibly empty row block."""

    a: np.ndarray
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        lb = np.asarray(self.lb, dtype=float).reshape(-1)
        ub = np.asarray(self.ub, dtype=float).reshape(-1)
        if a.ndim != 2:
            raise ConfigError("constraint matrix must be 2-D")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)
        if a.shape[0] != b.size:
            raise ConfigError("row count mismatch between a and b")
        d = a.shape[1] if a.shape[0] > 0 else lb.size
        if lb.size != d or ub.size != d:
            raise ConfigError("bound vectors must match the variable dimension")
        # lb > ub is allowed and denotes an empty set (it arises naturally
        # from intersections); the solvers report it as infeasible

    @classmethod
    def box(cls, lb, ub) -> "Polytope":
        lb = np.asarray(lb, dtype=float).reshape(-1)
        ub = np.asarray(ub, dtype=float).reshape(-1)
        return cls(a=np.zeros((0, lb.size)), b=np.zeros(0), lb=lb, ub=ub)

    @classmethod
    def from_rows(cls, a, b, lb=None, ub=None) -> "Polytope":
        a = np.atleast_2d(np.asarray(a, dtype=float))
        d = a.shape[1]
        if lb is None:
            lb = np.full(d, -OMEGA_BOX)
        if ub is None:
            ub = np.full(d, OMEGA_BOX)
        return cls(a=a, b=np.asarray(b, dtype=float).reshape(-1), lb=lb, ub=ub)

    @property
    def dim(self) -> int:
        return self.lb.size

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

    def contains(self, x, tol: float = FEAS_TOL) -> bool:
        """Membership up to `tol` relative to each constraint's scale."""
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.dim:
            raise ConfigError("point dimension mismatch")
        if self.n_rows:
            scale = 1.0 + np.abs(self.b)
            if np.any(self.a @ x - self.b > tol * scale):
                return False
        sb = 1.0 + np.maximum(np.abs(self.lb), np.abs(self.ub))
        return bool(np.all(x - self.ub <= tol * sb) and np.all(self.lb - x <= tol * sb))

    def violation(self, x) -> float:
        """Largest scaled constraint violation at x (<= 0 means inside)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        v = np.concatenate([(x - self.ub), (self.lb - x)])
        sb = 1.0 + np.maximum(np.abs(self.lb), np.abs(self.ub))
        worst = np.max(v / np.concatenate([sb, sb]))
        if self.n_rows:
            scale = 1.0 + np.abs(self.b)
            worst = max(worst, np.max((self.a @ x - self.b) / scale))
        return float(worst)

    def content_hash(self) -> str:
        m = hashlib.sha256()
        for arr in (self.a, self.b, self.lb, self.ub):
            m.update(np.ascontiguousarray(arr).tobytes())
        return m.hexdigest()


def intersect(p: Polytope, q: Polytope) -> Polytope:
    """Halfspace intersection: stacked rows, tightened bounds."""
    if p.dim != q.dim:
        raise ConfigError(f"dimension mismatch {p.dim} vs {q.dim}")
    return Polytope(a=np.vstack([p.a, q.a]), b=np.concatenate([p.b, q.b]),
                    lb=np.maximum(p.lb, q.lb), ub=np.minimum(p.ub, q.ub))


@dataclass
class LPOutcome:
    """Result of one linear program.

    status is 'optimal', 'infeasible' or 'unbounded'.  For optimal results
    x is a vertex (engine) or the HiGHS solution, max_violation the largest
    scaled constraint violation at x, and dual_gap the worst multiplier
    sign defect of the certifying basis (engine route only).
    """

    status: str
    x: Optional[np.ndarray] = None
    value: Optional[float] = None
    max_violation: float = 0.0
    dual_gap: float = 0.0
    iterations: int = 0
    engine: str = ""


@dataclass
class BatchResult:
    """Support values of many objectives over one polytope.

    values[i] = max_{x in P} objectives[i] . x, points[i] an attaining
    vertex.  status is 'optimal' or 'infeasible' (for the whole polytope).
    """

    status: str
    values: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    engine: str = ""
    stats: dict = field(default_factory=dict)


class _ActiveSetEngine:
    """Vertex-walking active-set solver for max c.x over a Polytope.

    Constraint ids: 0..m-1 the rows of A, m..m+d-1 the upper bounds,
    m+d..m+2d-1 the lower bounds.  A vertex is encoded by d active ids
    whose normals are linearly independent; the basis inverse is kept
    explicitly and updated rank-1 on each pivot.
    """

    def __init__(self, poly: Polytope):
        self.poly = poly
        self.A = poly.a
        self.b = poly.b
        self.lb = poly.lb
        self.ub = poly.ub
        self.m = poly.n_rows
        self.d = poly.dim
        self.pivots = 0

    # -- constraint access -------------------------------------------------

    def _normal(self, cid: int) -> np.ndarray:
        if cid < self.m:
            return self.A[cid]
        j = cid - self.m
        e = np.zeros(self.d)
        if j < self.d:
            e[j] = 1.0
        else:
            e[j - self.d] = -1.0
        return e

    def _rhs(self, cids) -> np.ndarray:
        out = np.empty(len(cids))
        for i, cid in enumerate(cids):
            if cid < self.m:
                out[i] = self.b[cid]
            elif cid < self.m + self.d:
                out[i] = self.ub[cid - self.m]
            else:
                out[i] = -self.lb[cid - self.m - self.d]
        return out

    def _basis_matrix(self, act) -> np.ndarray:
        return np.array([self._normal(cid) for cid in act])

    def _invert(self, act) -> np.ndarray:
        M = self._basis_matrix(act)
        try:
            lu, piv = sla.lu_factor(M)
        except sla.LinAlgError as exc:
            raise _EngineFailure("singular active set") from exc
        diag = np.abs(np.diag(lu))
        if diag.min() < 1e-13 * max(diag.max(), 1.0):
            raise _EngineFailure("nearly singular active set")
        return sla.lu_solve((lu, piv), np.eye(self.d))

    # -- core walk ---------------------------------------------------------

    def walk(self, c, act, minv=None):
        """From the vertex of active set `act`, pivot until c is maximized.

        Returns (x, act, minv).  Raises _EngineFailure on numerical
        breakdown or pivot-count blowup (unboundedness cannot occur for
        finite boxes, so it is reported as a failure too).
        """
        act = list(act)
        if minv is None:
            minv = self._invert(act)
        is_active = np.zeros(self.m + 2 * self.d, dtype=bool)
        is_active[act] = True
        degenerate = 0
        bland = False
        since_refresh = 0

        for _ in range(_MAX_PIVOTS):
            x = minv @ self._rhs(act)
            mu = minv.T @ c
            if bland:
                neg = np.flatnonzero(mu < -OPT_TOL)
                if neg.size == 0:
                    return x, act, minv
                q = int(neg[np.argsort([act[i] for i in neg])[0]])
            else:
                q = int(np.argmin(mu))
                if mu[q] >= -OPT_TOL:
                    return x, act, minv
            s = -minv[:, q]

            # ratio test over all inactive constraints
            if self.m:
                grow = np.concatenate([self.A @ s, s, -s])
                vals = np.concatenate([self.A @ x, x, -x])
            else:
                grow = np.concatenate([s, -s])
                vals = np.concatenate([x, -x])
            rhs_all = np.concatenate([self.b, self.ub, -self.lb])
            usable = (grow > 1e-11) & ~is_active
            if not np.any(usable):
                raise _EngineFailure("no blocking constraint (unbounded direction)")
            steps = np.where(usable, (rhs_all - vals) / np.where(usable, grow, 1.0), np.inf)
            steps = np.maximum(steps, 0.0)   # tiny negative slack from roundoff
            r_in = int(np.argmin(steps))     # ties resolve to the lowest id
            alpha = steps[r_in]

            if alpha <= 1e-12:
                degenerate += 1
                if degenerate >= _BLAND_TRIGGER:
                    bland = True
            else:
                degenerate = 0

            # rank-1 basis-inverse update for the row swap
            w = self._normal(r_in) - self._normal(act[q])
            u_col = minv[:, q].copy()
            v_row = w @ minv
            denom = 1.0 + v_row[q]
            leaving = act[q]
            act[q] = r_in
            is_active[leaving] = False
            is_active[r_in] = True
            self.pivots += 1
            since_refresh += 1
            if abs(denom) < 1e-10 or since_refresh >= _REFRESH_EVERY:
                minv = self._invert(act)
                since_refresh = 0
            else:
                minv -= np.outer(u_col, v_row / denom)
        raise _EngineFailure("pivot limit exceeded")

    # -- phase 1 -----------------------------------------------------------

    def find_vertex(self):
        """A feasible vertex (act, x, minv), or None when the polytope is empty.

        Starts from a box corner; if rows are violated there, minimizes the
        worst violation t over the lifted polytope {A x - t <= b} and reads
        off a vertex of the original set once t hits zero.
        """
        if np.any(self.lb > self.ub):
            return None
        corner = np.where(np.abs(self.lb) <= np.abs(self.ub), self.lb, self.ub)
        act0 = [self.m + self.d + j if corner[j] == self.lb[j] else self.m + j
                for j in range(self.d)]
        # ub==lb ties resolve to the lower-bound id; fine, both are tight
        if self.m == 0:
            return act0, corner.copy(), self._invert(act0)
        viol = self.A @ corner - self.b
        t0 = float(viol.max(initial=0.0))
        scale = 1.0 + np.abs(self.b)
        if np.all(viol <= FEAS_TOL * scale):
            return act0, corner.copy(), self._invert(act0)

        # minimize the worst row violation t over the lifted set
        lifted = Polytope(a=np.hstack([self.A, -np.ones((self.m, 1))]), b=self.b,
                          lb=np.append(self.lb, 0.0), ub=np.append(self.ub, 2.0 * t0))
        sub = _ActiveSetEngine(lifted)
        act_l = []
        for j in range(self.d):
            if corner[j] == self.lb[j]:
                act_l.append(self.m + (self.d + 1) + j)
            else:
                act_l.append(self.m + j)
        act_l.append(int(np.argmax(viol)))   # t = worst violation is tight here
        c_l = np.zeros(self.d + 1)
        c_l[-1] = -1.0
        x_l, act_l, _ = sub.walk(c_l, act_l)
        self.pivots += sub.pivots
        t_star = x_l[-1]
        if t_star > 10.0 * FEAS_TOL * float(scale.max()):
            return None

        t_lower_id = self.m + 2 * (self.d + 1) - 1
        t_upper_id = self.m + self.d
        kept = [cid for cid in act_l if cid not in (t_lower_id, t_upper_id)]
        if len(kept) > self.d:
            kept = self._select_independent(kept)
        if len(kept) != self.d:
            raise _EngineFailure("could not extract a vertex basis after phase 1")
        # drop the t slot from lower-bound ids when mapping back
        act = [cid if cid < self.m + self.d + 1 else cid - 1 for cid in kept]
        minv = self._invert(act)
        x = minv @ self._rhs(act)
        if self.poly.violation(x) > 100.0 * FEAS_TOL:
            raise _EngineFailure("phase-1 vertex fails feasibility check")
        return act, x, minv

    def _select_independent(self, cids):
        """Pick d ids with independent normals (QR with column pivoting)."""
        normals = np.array([self._normal_lifted_to_orig(cid) for cid in cids]).T
        _, _, perm = sla.qr(normals, pivoting=True)
        chosen = [cids[i] for i in sorted(perm[: self.d])]
        return chosen

    def _normal_lifted_to_orig(self, cid):
        # lifted ids with the t-variable slots removed map back directly for
        # rows and upper bounds; lower-bound ids sit one slot later
        if cid < self.m + self.d + 1:
            adj = cid
        else:
            adj = cid - 1
        return self._normal(adj)


def _to_max(c, sense):
    c = np.asarray(c, dtype=float).reshape(-1)
    if sense == "max":
        return c, 1.0
    if sense == "min":
        return -c, -1.0
    raise ConfigError(f"sense must be 'max' or 'min', got {sense!r}")


def _engine_ok(poly: Polytope) -> bool:
    return bool(np.all(np.isfinite(poly.lb)) and np.all(np.isfinite(poly.ub))
                and max(np.abs(poly.lb).max(initial=0.0),
                        np.abs(poly.ub).max(initial=0.0)) <= ENGINE_BOX_LIMIT)


def _solve_scipy(c_max, poly: Polytope, sign: float) -> LPOutcome:
    A = poly.a if poly.n_rows else None
    b = poly.b if poly.n_rows else None
    bounds = list(zip(poly.lb, poly.ub))
    # Huge stand-in bounds condition HiGHS badly on degenerate problems: it
    # may report Unknown, or "optimal" with an invalid point.  Retry ladder:
    # default simplex, dual simplex without presolve, then the relaxation
    # with the stand-in bounds freed.  A relaxation optimum inside the
    # dropped box certifies the original; relaxation infeasibility does too.
    free = [(None if lo <= -_FREE_THRESH else lo,
             None if hi >= _FREE_THRESH else hi) for lo, hi in bounds]
    attempts = [dict(bounds=bounds, method="highs", options=None),
                dict(bounds=bounds, method="highs-ds", options={"presolve": False}),
                dict(bounds=free, method="highs", options=None)]
    res, viol, relaxed = None, np.inf, False
    for att in attempts:
        cand = linprog(-c_max, A_ub=A, b_ub=b, bounds=att["bounds"],
                       method=att["method"], options=att["options"])
        if cand.status in (2, 3):
            res, relaxed = cand, att["bounds"] is free
            break
        if cand.status == 0:
            v = poly.violation(np.asarray(cand.x))
            if v <= 1e-6:
                res, viol = cand, v
                break
    if res is None:
        raise NumericalError("LP solver failed on every retry "
                             "(degenerate or badly scaled problem)")
    if res.status == 2:
        return LPOutcome(status="infeasible", engine="highs", iterations=int(res.nit))
    if res.status == 3:
        if relaxed:
            # unbounded only without the stand-in box; cannot certify
            raise NumericalError("LP solver failed on every retry "
                                 "(degenerate or badly scaled problem)")
        return LPOutcome(status="unbounded", engine="highs", iterations=int(res.nit))
    x = np.asarray(res.x)
    return LPOutcome(status="optimal", x=x, value=sign * float(c_max @ x),
                     max_violation=max(viol, 0.0), iterations=int(res.nit), engine="highs")


def solve_lp(c, poly: Polytope, sense: str = "max", engine: str = "auto") -> LPOutcome:
    """Optimize a linear objective over a polytope.

    Infeasibility and unboundedness are reported through the outcome
    status, never as exceptions.  Numerical breakdown of both solver
    routes raises NumericalError.  `engine="highs"` skips the vertex
    walker; useful for one-off problems whose geometry is known to suit
    the simplex in scipy better than a cold walk.
    """
    c_max, sign = _to_max(c, sense)
    if c_max.size != poly.dim:
        raise ConfigError("objective dimension mismatch")
    if np.any(poly.lb > poly.ub):
        return LPOutcome(status="infeasible", engine="bounds")
    if engine == "highs":
        return _solve_scipy(c_max, poly, sign)
    walk_poly, tight = poly, None
    if not _engine_ok(poly):
        walk_poly, tight = _clamped_box(poly)
        if walk_poly is None or not _engine_ok(walk_poly):
            return _solve_scipy(c_max, poly, sign)
    eng = _ActiveSetEngine(walk_poly)
    try:
        found = eng.find_vertex()
        if found is None:
            if tight is not None:
                return _solve_scipy(c_max, poly, sign)
            return LPOutcome(status="infeasible", engine="active-set", iterations=eng.pivots)
        act, x, minv = found
        x, act, minv = eng.walk(c_max, act, minv)
    except _EngineFailure:
        return _solve_scipy(c_max, poly, sign)
    viol = walk_poly.violation(x)
    if viol > 100.0 * FEAS_TOL:
        return _solve_scipy(c_max, poly, sign)
    if tight is not None and _touches_clamp(x, walk_poly, tight):
        return _solve_scipy(c_max, poly, sign)
    mu = minv.T @ c_max
    return LPOutcome(status="optimal", x=x, value=sign * float(c_max @ x),
                     max_violation=max(viol, 0.0), dual_gap=max(0.0, -float(mu.min())),
                     iterations=eng.pivots, engine="active-set")


def _clamped_box(poly: Polytope):
    """Engine-sized copy of a polytope whose box is too large to walk on.

    Returns (clamped_poly, (tight_lo, tight_hi)) or (None, None) when
    clamping cannot make the polytope engine-friendly.  Any optimum found
    on the clamp that keeps every tightened bound inactive is also optimal
    for the original polytope; active tightened bounds mean the answer must
    be recomputed on the original.
    """
    if poly.n_rows == 0:
        return None, None
    lb = np.maximum(poly.lb, -ENGINE_BOX_LIMIT)
    ub = np.minimum(poly.ub, ENGINE_BOX_LIMIT)
    tight_lo = lb > poly.lb
    tight_hi = ub < poly.ub
    if not (tight_lo.any() or tight_hi.any()):
        return None, None
    return Polytope(a=poly.a, b=poly.b, lb=lb, ub=ub), (tight_lo, tight_hi)


def _touches_clamp(x, clamped: Polytope, tight) -> bool:
    tol = 1e-6 * ENGINE_BOX_LIMIT
    t_lo, t_hi = tight
    return bool(np.any(x[t_lo] <= clamped.lb[t_lo] + tol)
                or np.any(x[t_hi] >= clamped.ub[t_hi] - tol))


def solve_lp_batch(objectives, poly: Polytope, sense: str = "max") -> BatchResult:
    """Support values of many objectives over one fixed polytope.

    Equivalent to calling solve_lp per objective, but each optimal basis
    discovered by the engine certifies (and prices) every objective whose
    multipliers are already nonnegative there, which usually collapses
    thousands of programs into a few dozen vertex walks.  Oversized outer
    boxes are clamped to the engine limit first; solutions that touch a
    clamped bound are re-solved on the original polytope.
    """
    C = np.atleast_2d(np.asarray(objectives, dtype=float))
    if C.shape[1] != poly.dim:
        raise ConfigError("objective dimension mismatch")
    nobj = C.shape[0]
    if nobj == 0:
        return BatchResult(status="optimal", values=np.zeros(0),
                           points=np.zeros((0, poly.dim)), engine="none")
    if np.any(poly.lb > poly.ub):
        return BatchResult(status="infeasible", engine="bounds")
    sign = {"max": 1.0, "min": -1.0}[sense] if sense in ("max", "min") else None
    if sign is None:
        raise ConfigError(f"sense must be 'max' or 'min', got {sense!r}")
    C_max = C if sense == "max" else -C

    walk_poly, tight = poly, None
    if not _engine_ok(poly):
        walk_poly, tight = _clamped_box(poly)
        if walk_poly is None or not _engine_ok(walk_poly):
            values = np.empty(nobj)
            points = np.empty((nobj, poly.dim))
            for i in range(nobj):
                out = solve_lp(C_max[i], poly, "max")
                if out.status != "optimal":
                    return BatchResult(status=out.status, engine=out.engine)
                values[i] = out.value
                points[i] = out.x
            return BatchResult(status="optimal", values=sign * values, points=points,
                               engine="highs", stats={"walks": nobj})

    eng = _ActiveSetEngine(walk_poly)
    values = np.full(nobj, np.nan)
    points = np.zeros((nobj, poly.dim))
    unsolved = np.ones(nobj, dtype=bool)
    walks = 0
    fallbacks = 0
    try:
        found = eng.find_vertex()
    except _EngineFailure:
        found = "failed"
    if found is None:
        if tight is not None:
            # clamping itself may have emptied the set; cannot conclude
            found = "failed"
        else:
            return BatchResult(status="infeasible", engine="active-set")

    state = None if found == "failed" else found
    while np.any(unsolved):
        rem = np.flatnonzero(unsolved)
        if state is not None:
            act, x, minv = state
            if tight is None or not _touches_clamp(x, walk_poly, tight):
                mu_all = minv.T @ C_max[rem].T
                ok = np.all(mu_all >= -OPT_TOL, axis=0)
                done = rem[ok]
                if done.size:
                    values[done] = C_max[done] @ x
                    points[done] = x
                    unsolved[done] = False
                    rem = rem[~ok]
                if rem.size == 0:
                    break
        j = int(rem[0])
        try:
            if state is None:
                raise _EngineFailure("no usable vertex state")
            x_j, act_j, minv_j = eng.walk(C_max[j], list(state[0]), state[2].copy())
            if walk_poly.violation(x_j) > 100.0 * FEAS_TOL:
                raise _EngineFailure("walk result fails feasibility check")
            state = (act_j, x_j, minv_j)
            if tight is not None and _touches_clamp(x_j, walk_poly, tight):
                raise _EngineFailure("optimum rests on a clamped bound")
            values[j] = C_max[j] @ x_j
            points[j] = x_j
            unsolved[j] = False
            walks += 1
        except _EngineFailure:
            out = _solve_scipy(C_max[j], poly, 1.0)
            if out.status != "optimal":
                return BatchResult(status=out.status, engine="highs")
            values[j] = out.value
            points[j] = out.x
            unsolved[j] = False
            fallbacks += 1
    return BatchResult(status="optimal", values=sign * values, points=points,
                       engine="active-set",
                       stats={"walks": walks, "fallbacks": fallbacks, "pivots": eng.pivots})


def is_empty(poly: Polytope) -> bool:
    """Phase-1 emptiness test at the module feasibility tolerance."""
    if np.any(poly.lb > poly.ub):
        return True
    if poly.n_rows == 0:
        return False
    if _engine_ok(poly):
        eng = _ActiveSetEngine(poly)
        try:
            return eng.find_vertex() is None
        except _EngineFailure:
            pass
    res = linprog(np.zeros(poly.dim), A_ub=poly.a, b_ub=poly.b,
                  bounds=list(zip(poly.lb, poly.ub)), method="highs")
    if res.status == 0:
        return False
    if res.status == 2:
        return True
    raise NumericalError(f"emptiness test inconclusive: {res.message}")
