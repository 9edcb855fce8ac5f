"""Multi-step predictors, their identification and validation.

A one-step ARX model theta_1 = [a_1..a_o, b_1..b_o] induces a p-step
predictor theta_p = h(theta_1, p) by substituting its own predictions for
future outputs; h is polynomial in theta_1 and is evaluated here together
with its Jacobian by a coefficient recursion.

Identification methods on offer:

* PEM       - ordinary least squares on the one-step regression.
* SEM       - simulation error minimization (free-run least squares).
* decoupled - per-horizon linear program minimizing the guaranteed error
              bound over the refined feasible set, one theta_p per p.
* method 1  - one theta_1 minimizing the worst guaranteed bound over all
              horizons, subject to h(theta_1, p) staying feasible for all p.
* method 2  - simulation error minimization constrained by the horizon-1
              feasible set and the decay boxes of every longer horizon.

The coupled programs (1 and 2) are small-dimensional but carry hundreds of
thousands of smooth constraints, so they run a working-set scheme: solve
with an active subset, re-check everything, exchange, repeat.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .dataset import RegressorLayout, SampleSet, build_sample_set
from .errors import ConfigError, NumericalError
from .lti_sim import DiscreteSS, IORecord
from .polytope_lp import OMEGA_BOX, Polytope, solve_lp
from .sm_bounds import InflationConfig, c_coeffs, signed_regressors

log = logging.getLogger(__name__)

# Free-run predictions are clamped at this magnitude; beyond it the model is
# divergent and sensitivities are zeroed so the optimizer steps back in.
STATE_CAP = 1e9

# Constraint bookkeeping tolerances of the working-set programs.
_MEM_TOL = 1e-6      # declared-feasible membership violation
_ACTIVE_MARGIN = 1e-4  # near-active band pulled into the working set
_MAX_ROUNDS = 60
_MAX_ADD = 250       # constraint additions per exchange round


def _minimize(*args, **kwargs):
    # SLSQP line searches routinely step outside the box and get clipped;
    # scipy warns about it even though the behavior is by design.
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Values in x were outside bounds",
                                category=RuntimeWarning)
        return minimize(*args, **kwargs)


@dataclass(frozen=True)
class ParamVector:
    """Parameter vector of a horizon-p predictor with its layout."""

    layout: RegressorLayout
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        object.__setattr__(self, "values", v)
        if v.size != self.layout.dim:
            raise ConfigError(f"expected {self.layout.dim} parameters, got {v.size}")

    @property
    def theta_y(self) -> np.ndarray:
        return self.values[self.layout.y_slice]

    @property
    def theta_u(self) -> np.ndarray:
        return self.values[self.layout.u_slice]


def _split_theta1(theta1, o: int):
    th = np.asarray(theta1, dtype=float).reshape(-1)
    if th.size != 2 * o:
        raise ConfigError(f"one-step parameter vector must have length {2 * o}")
    return th[:o], th[o:]


def propagate_chain(theta1, o: int, p_max: int):
    """theta_p = h(theta_1, p) for every p = 1..p_max.

    Slot convention: the full-width input coefficient array indexes
    u(k+p_max-1) down to u(k-o+1); the horizon-j predictor occupies the
    last j+o-1 slots.  Feedback of predicted outputs turns into coefficient
    accumulation, so the whole chain costs one pass.
    """
    a, b = _split_theta1(theta1, o)
    if p_max < 1:
        raise ConfigError("p_max must be >= 1")
    width = p_max + o - 1
    cy = np.zeros((p_max + 1, o))
    cu = np.zeros((p_max + 1, width))
    out = []
    for j in range(1, p_max + 1):
        cu[j, p_max - j: p_max - j + o] += b
        for i in range(1, o + 1):
            if i < j:
                cy[j] += a[i - 1] * cy[j - i]
                cu[j] += a[i - 1] * cu[j - i]
            else:
                cy[j, i - j] += a[i - 1]
        out.append(np.concatenate([cy[j], cu[j, p_max - j:]]))
    return out


def propagate(theta1, o: int, p: int) -> np.ndarray:
    """h(theta_1, p): parameters of the induced p-step predictor."""
    return propagate_chain(theta1, o, p)[-1]


def propagate_chain_jacobian(theta1, o: int, p_max: int):
    """The chain h(theta_1, p) together with d theta_p / d theta_1.

    Returns (thetas, jacs) where jacs[p-1] has shape (2o+p-1, 2o).
    """
    a, b = _split_theta1(theta1, o)
    width = p_max + o - 1
    cy = np.zeros((p_max + 1, o))
    cu = np.zeros((p_max + 1, width))
    jy = np.zeros((p_max + 1, o, 2 * o))
    ju = np.zeros((p_max + 1, width, 2 * o))
    thetas, jacs = [], []
    for j in range(1, p_max + 1):
        lo = p_max - j
        cu[j, lo: lo + o] += b
        for i in range(1, o + 1):
            ju[j, lo + i - 1, o + i - 1] += 1.0
            if i < j:
                cy[j] += a[i - 1] * cy[j - i]
                cu[j] += a[i - 1] * cu[j - i]
                jy[j] += a[i - 1] * jy[j - i]
                ju[j] += a[i - 1] * ju[j - i]
                jy[j, :, i - 1] += cy[j - i]
                ju[j, :, i - 1] += cu[j - i]
            else:
                cy[j, i - j] += a[i - 1]
                jy[j, i - j, i - 1] += 1.0
        thetas.append(np.concatenate([cy[j], cu[j, lo:]]))
        jacs.append(np.vstack([jy[j], ju[j, lo:]]))
    return thetas, jacs


def simulate_predictor(theta1, o: int, u, y_hist, n_steps: int,
                       cap: float = STATE_CAP) -> np.ndarray:
    """Free-run predictions zhat(1..n_steps) from o seed outputs.

    y_hist holds [y(k), y(k-1), ..., y(k-o+1)]; u holds the inputs indexed
    so that u[o-1+j] = u(k+j) for j >= 0 (i.e. u[o-1] is the input applied
    at the seed instant), matching a record slice u[k-o+1 : k+n_steps].
    """
    a, b = _split_theta1(theta1, o)
    y_hist = np.asarray(y_hist, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if y_hist.size != o:
        raise ConfigError(f"need {o} seed outputs")
    if u.size < o - 1 + n_steps:
        raise ConfigError("input slice too short for the requested horizon")
    past = list(y_hist)          # most recent first
    out = np.empty(n_steps)
    for j in range(1, n_steps + 1):
        acc = 0.0
        for i in range(1, o + 1):
            acc += a[i - 1] * past[i - 1] + b[i - 1] * u[o - 1 + j - i]
        if abs(acc) > cap:
            acc = np.sign(acc) * cap
        out[j - 1] = acc
        past = [acc] + past[:-1]
    return out


# ---------------------------------------------------------------------------
# simulation-error machinery (shared by SEM and method 2)
# ---------------------------------------------------------------------------

def _freerun_residuals(theta1, o: int, rec: IORecord, want_jac: bool,
                       cap: float = STATE_CAP):
    """Residuals y - zhat of the free run over a record, optionally with the
    residual Jacobian.  The first o samples seed the run."""
    a, b = _split_theta1(theta1, o)
    y, u = rec.y, rec.u
    n = y.size
    if n <= o:
        raise ConfigError("record too short for a free run")
    zhat = np.empty(n)
    zhat[:o] = y[:o]
    S = np.zeros((n, 2 * o)) if want_jac else None
    for k in range(o, n):
        wy = zhat[k - o:k][::-1]
        wu = u[k - o:k][::-1]
        zk = float(a @ wy + b @ wu)
        if abs(zk) > cap:
            zhat[k] = np.sign(zk) * cap
            # leave S[k] at zero: the clamp has no useful local slope
            continue
        zhat[k] = zk
        if want_jac:
            acc = np.concatenate([wy, wu])
            for i in range(1, o + 1):
                if k - i >= o:
                    acc = acc + a[i - 1] * S[k - i]
            S[k] = acc
    resid = y[o:] - zhat[o:]
    jac = -S[o:] if want_jac else None
    return resid, jac


def freerun_cost_grad(theta1, o: int, rec: IORecord):
    """Simulation-error cost sum of squared residuals and its gradient."""
    r, J = _freerun_residuals(theta1, o, rec, want_jac=True)
    return float(r @ r), 2.0 * (J.T @ r)


# ---------------------------------------------------------------------------
# validation errors
# ---------------------------------------------------------------------------

def freerun_errors(theta1, o: int, rec: IORecord, p_max: int,
                   cap: float = STATE_CAP) -> np.ndarray:
    """Worst p-step prediction error of a one-step model on a record.

    Every admissible time index seeds a free run on measured data; entry
    p-1 is the largest absolute error at horizon p across all seeds,
    measured against the noise-free output when the record carries one
    (else against the measured output).
    """
    a, b = _split_theta1(theta1, o)
    target = rec.z if rec.z is not None else rec.y
    y, u = rec.y, rec.u
    n = y.size
    ks = np.arange(o - 1, n - 1)
    if ks.size == 0:
        raise ConfigError("record too short to seed any prediction")
    W = np.empty((ks.size, o))
    for i in range(o):
        W[:, i] = y[ks - i]
    errors = np.full(p_max, np.nan)
    for j in range(1, p_max + 1):
        m = n - o - j + 1          # seeds that can still step forward
        if m <= 0:
            break
        Wa = W[:m]
        ka = ks[:m]
        znew = Wa @ a
        for i in range(1, o + 1):
            znew += b[i - 1] * u[ka + j - i]
        np.clip(znew, -cap, cap, out=znew)
        errors[j - 1] = float(np.abs(target[ka + j] - znew).max())
        W[:m, 1:] = Wa[:, :-1]
        W[:m, 0] = znew
    return errors


def horizon_error(theta_p, o: int, p: int, rec: IORecord) -> float:
    """Worst p-step error of an explicit horizon-p parameter vector."""
    theta_p = np.asarray(theta_p, dtype=float).reshape(-1)
    S = build_sample_set(rec, o, p)
    target = rec.z if rec.z is not None else rec.y
    ks = S.first_k + np.arange(S.n_rows)
    return float(np.abs(target[ks + p] - S.phi @ theta_p).max())


# ---------------------------------------------------------------------------
# per-horizon problem data for the bound-driven programs
# ---------------------------------------------------------------------------

@dataclass
class HorizonProblem:
    """Everything the bound-driven programs need at one horizon.

    corr is the residual corridor eps_hat + dbar; gbound the decay-box
    half-widths; c the support values of the signed regressor directions
    over the refined feasible set (filled on demand).
    """

    S: SampleSet
    corr: float
    gbound: np.ndarray
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        self.gbound = np.asarray(self.gbound, dtype=float).reshape(-1)
        if self.gbound.size != self.S.layout.dim:
            raise ConfigError("decay box dimension mismatch")
        if self.corr < 0:
            raise ConfigError("residual corridor must be nonnegative")

    @property
    def p(self) -> int:
        return self.S.layout.p

    def polytope(self) -> Polytope:
        """The refined feasible set as an explicit polytope."""
        b = np.concatenate([self.S.targets + self.corr, self.corr - self.S.targets])
        return Polytope.from_rows(signed_regressors(self.S), b,
                                  lb=-self.gbound, ub=self.gbound)

    def support_values(self) -> np.ndarray:
        if self.c is None:
            self.c = c_coeffs(self.S, self.polytope())
        return self.c

    def spread(self, theta_p) -> float:
        """max_j (c_j - signed row j . theta_p), the raw bound gap."""
        c = self.support_values()
        r = self.S.phi @ np.asarray(theta_p, dtype=float)
        n = self.S.n_rows
        return float(max((c[:n] - r).max(), (c[n:] + r).max()))

    def membership_violation(self, theta_p) -> float:
        """Largest violation of the refined feasible set at theta_p."""
        r = self.S.phi @ np.asarray(theta_p, dtype=float)
        fps_v = max(float((r - self.S.targets).max()), float((self.S.targets - r).max())) - self.corr
        box_v = float((np.abs(theta_p) - self.gbound).max())
        return max(fps_v, box_v)


# ---------------------------------------------------------------------------
# identification methods
# ---------------------------------------------------------------------------

def identify_pem(S: SampleSet):
    """Least-squares one-step model (prediction error method)."""
    theta, _, rank, sv = np.linalg.lstsq(S.phi, S.targets, rcond=None)
    if rank < S.layout.dim:
        raise NumericalError(
            f"one-step regression is rank deficient ({rank}/{S.layout.dim}); "
            "the input is not exciting enough")
    resid = S.targets - S.phi @ theta
    diag = {"rank": int(rank), "cond": float(sv[0] / sv[-1]),
            "residual_norm": float(np.linalg.norm(resid))}
    return ParamVector(S.layout, theta), diag


def identify_sem(rec: IORecord, o: int, theta0=None, cap: float = STATE_CAP):
    """Free-run (simulation error) least squares, started from PEM by default."""
    if theta0 is None:
        theta0, _ = identify_pem(build_sample_set(rec, o, 1))
        theta0 = theta0.values
    theta0 = np.asarray(theta0, dtype=float).reshape(-1)
    r0, _ = _freerun_residuals(theta0, o, rec, want_jac=False, cap=cap)
    res = least_squares(
        lambda th: _freerun_residuals(th, o, rec, want_jac=False, cap=cap)[0],
        theta0,
        jac=lambda th: _freerun_residuals(th, o, rec, want_jac=True, cap=cap)[1],
        method="trf", xtol=1e-14, ftol=1e-14, gtol=1e-12)
    diag = {"cost0": float(r0 @ r0), "cost": 2.0 * float(res.cost),
            "nfev": int(res.nfev), "status": int(res.status)}
    return ParamVector(RegressorLayout(o, 1), res.x), diag


def identify_multistep_decoupled(hp: HorizonProblem, eps_p: float, cfg: InflationConfig):
    """Tightest guaranteed bound at one horizon, decoupled from the others.

    Solves min_{theta in refined FPS} max_j (c_j - signed row j . theta) as
    a linear program in (theta, zeta) and returns (ParamVector, tau, diag)
    with tau = gamma * zeta + eps_p.
    """
    c = hp.support_values()
    S = hp.S
    d = S.layout.dim
    n = S.n_rows
    phs = signed_regressors(S)
    # epigraph rows  c_j - phs_j theta <= zeta
    a_epi = np.hstack([-phs, -np.ones((2 * n, 1))])
    b_epi = -c
    a_fps = np.hstack([phs, np.zeros((2 * n, 1))])
    b_fps = np.concatenate([S.targets + hp.corr, hp.corr - S.targets])
    finite_box = bool(np.max(hp.gbound) <= 1e8)
    if finite_box:
        zeta_ub = float(c.max() + np.abs(phs).max(axis=0) @ hp.gbound + 1.0)
    else:
        zeta_ub = OMEGA_BOX
    poly = Polytope(a=np.vstack([a_epi, a_fps]), b=np.concatenate([b_epi, b_fps]),
                    lb=np.append(-hp.gbound, 0.0), ub=np.append(hp.gbound, zeta_ub))
    obj = np.zeros(d + 1)
    obj[-1] = 1.0
    out = solve_lp(obj, poly, sense="min")
    if out.status != "optimal":
        raise NumericalError(
            f"decoupled bound program at p={hp.p} is {out.status}; "
            "enlarge the bounds (ensure_nonempty) and retry")
    theta = out.x[:d]
    zeta = float(out.value)
    tau = cfg.gamma * zeta + eps_p
    diag = {"zeta": zeta, "engine": out.engine, "iterations": out.iterations}
    return ParamVector(S.layout, theta), tau, diag


# -- working-set machinery ---------------------------------------------------

class _ChainCache:
    """Memoizes the propagation chain and Jacobians per theta1 iterate."""

    def __init__(self, o: int, p_max: int):
        self.o = o
        self.p_max = p_max
        self._key = None
        self._val = None

    def __call__(self, theta1):
        key = np.asarray(theta1, dtype=float).tobytes()
        if key != self._key:
            self._val = propagate_chain_jacobian(theta1, self.o, self.p_max)
            self._key = key
        return self._val


def _row_direction(hp: HorizonProblem, kind: str, idx: int):
    """Constraint row as (direction, offset): value = direction . theta_p + offset.

    'epi' rows are the spread components c_j - signed row . theta_p; 'fps'
    and 'box' rows are membership violations (<= 0 when satisfied).
    """
    S = hp.S
    n = S.n_rows
    d = S.layout.dim
    if kind == "epi":
        c = hp.support_values()
        if idx < n:
            return -S.phi[idx], float(c[idx])
        return S.phi[idx - n], float(c[idx])
    if kind == "fps":
        if idx < n:
            return S.phi[idx], -float(S.targets[idx]) - hp.corr
        return -S.phi[idx - n], float(S.targets[idx - n]) - hp.corr
    if kind == "box":
        e = np.zeros(d)
        if idx < d:
            e[idx] = 1.0
            return e, -float(hp.gbound[idx])
        e[idx - d] = -1.0
        return e, -float(hp.gbound[idx - d])
    raise ValueError(kind)


def _full_violations(hp: HorizonProblem, theta_p, kinds):
    """Constraint values of the requested kinds at one horizon."""
    S = hp.S
    r = None
    out = []
    for kind in kinds:
        if kind == "epi":
            c = hp.support_values()
            n = S.n_rows
            r = S.phi @ theta_p if r is None else r
            out.append(("epi", np.concatenate([c[:n] - r, c[n:] + r])))
        elif kind == "fps":
            r = S.phi @ theta_p if r is None else r
            out.append(("fps", np.concatenate([r - S.targets - hp.corr,
                                               S.targets - r - hp.corr])))
        elif kind == "box":
            out.append(("box", np.concatenate([theta_p - hp.gbound,
                                               -theta_p - hp.gbound])))
        else:
            raise ValueError(kind)
    return out


class _WorkingSet:
    """Index set of constraints currently enforced, grouped by (p, kind)."""

    def __init__(self):
        self.sets: dict = {}

    def add(self, p: int, kind: str, idx: int) -> bool:
        key = (p, kind)
        group = self.sets.setdefault(key, set())
        if idx in group:
            return False
        group.add(idx)
        return True

    def items(self):
        for (p, kind), group in sorted(self.sets.items()):
            for idx in sorted(group):
                yield p, kind, idx

    def __len__(self):
        return sum(len(g) for g in self.sets.values())


def _grow_working_set(ws: _WorkingSet, problems, chain_vals, kinds_fn,
                      zeta: float = 0.0) -> int:
    """Pull violated and near-active constraints into the working set."""
    candidates = []
    for hp in problems:
        th_p = chain_vals[hp.p - 1]
        for kind, vals in _full_violations(hp, th_p, kinds_fn(hp.p)):
            ref = zeta if kind == "epi" else 0.0
            sel = np.flatnonzero(vals >= ref - _ACTIVE_MARGIN)
            if sel.size > 40:      # keep only the worst rows of a big batch
                sel = sel[np.argsort(vals[sel])[-40:]]
            for idx in sel:
                candidates.append((float(vals[idx] - ref), hp.p, kind, int(idx)))
    candidates.sort(reverse=True)
    added = 0
    for _, p, kind, idx in candidates[:_MAX_ADD]:
        if ws.add(p, kind, idx):
            added += 1
    return added


def _membership_state(problems, chain_vals, kinds_fn):
    """Worst membership violation and its location over all horizons."""
    worst = -np.inf
    where = None
    for hp in problems:
        th_p = chain_vals[hp.p - 1]
        for kind, vals in _full_violations(hp, th_p, kinds_fn(hp.p)):
            if kind == "epi":
                continue
            v = float(vals.max())
            if v > worst:
                worst = v
                where = (hp.p, kind, int(np.argmax(vals)))
    return worst, where


def _epi_state(problems, chain_vals):
    """Largest spread component over all horizons (the epigraph floor)."""
    worst = -np.inf
    for hp in problems:
        vals = _full_violations(hp, chain_vals[hp.p - 1], ("epi",))[0][1]
        worst = max(worst, float(vals.max()))
    return worst


def _mem_kinds(p: int):
    return ("fps", "box")


def _all_kinds(p: int):
    return ("epi", "fps", "box")


def _working_constraints(ws: _WorkingSet, problems_by_p, chain, o: int,
                         n_vars: int, epi_slot: Optional[int],
                         slack_slot: Optional[int] = None):
    """SLSQP-style vectorized constraint fun/jac over the working set.

    Variables are [theta1 (2o), extras...].  SLSQP wants values >= 0 when
    satisfied, so epigraph rows become zeta - spread_row and membership
    rows become -violation (+ slack when `slack_slot` is given, the
    elastic relaxation used for feasibility restoration).
    """
    rows = list(ws.items())
    dirs = [(_row_direction(problems_by_p[p], kind, idx), p, kind) for p, kind, idx in rows]

    def fun(x):
        thetas, _ = chain(x[:2 * o])
        out = np.empty(len(rows))
        for i, ((direction, offset), p, kind) in enumerate(dirs):
            raw = float(direction @ thetas[p - 1]) + offset
            if kind == "epi":
                out[i] = x[epi_slot] - raw
            else:
                out[i] = -raw
                if slack_slot is not None:
                    out[i] += x[slack_slot]
        return out

    def jac(x):
        _, jacs = chain(x[:2 * o])
        J = np.zeros((len(rows), n_vars))
        for i, ((direction, _), p, kind) in enumerate(dirs):
            g = direction @ jacs[p - 1]
            if kind == "epi":
                J[i, :2 * o] = -g
                J[i, epi_slot] = 1.0
            else:
                J[i, :2 * o] = -g
                if slack_slot is not None:
                    J[i, slack_slot] = 1.0
        return J

    return fun, jac, rows


def _restore_feasibility(problems, problems_by_p, chain, o, theta0, kinds_fn,
                         bounds_theta):
    """Phase 1 of the coupled programs: drive membership violations to zero.

    Minimizes a shared slack s over (theta1, s) with every working
    membership row relaxed by s.  Returns (theta, residual_violation,
    working_set, rounds); the caller rejects the start when the residual
    violation stays above the tolerance.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    ws = _WorkingSet()
    n_vars = 2 * o + 1
    e_s = np.zeros(n_vars)
    e_s[-1] = 1.0
    rounds = 0
    for rounds in range(1, _MAX_ROUNDS + 1):
        thetas, _ = chain(theta)
        mem, _ = _membership_state(problems, thetas, kinds_fn)
        if mem <= _MEM_TOL:
            return theta, mem, ws, rounds
        added = _grow_working_set(ws, problems, thetas, kinds_fn)
        if added == 0 and rounds > 1:
            break
        x = np.append(theta, max(mem, 0.0) * 1.001 + 1e-12)
        fun, jac, _ = _working_constraints(ws, problems_by_p, chain, o, n_vars,
                                           epi_slot=None, slack_slot=2 * o)
        res = _minimize(lambda v: v[-1], x, jac=lambda v: e_s, method="SLSQP",
                       bounds=bounds_theta + [(0.0, None)],
                       constraints=[{"type": "ineq", "fun": fun, "jac": jac}],
                       options={"maxiter": 120, "ftol": 1e-14})
        if np.all(np.isfinite(res.x)):
            theta = res.x[:2 * o].copy()
    thetas, _ = chain(theta)
    mem, where = _membership_state(problems, thetas, kinds_fn)
    return theta, mem, ws, rounds


def _check_problems(problems: Sequence[HorizonProblem]):
    problems = sorted(problems, key=lambda hp: hp.p)
    ps = [hp.p for hp in problems]
    if ps != list(range(1, len(ps) + 1)):
        raise ConfigError(f"need one problem per horizon 1..pbar, got p={ps}")
    o = problems[0].S.layout.o
    if any(hp.S.layout.o != o for hp in problems):
        raise ConfigError("all horizon problems must share the model order")
    return problems, {hp.p: hp for hp in problems}, o, len(problems)


def identify_method1(problems: Sequence[HorizonProblem], cfg: InflationConfig,
                     starts: Sequence[np.ndarray]):
    """One theta_1 minimizing the worst bound spread over every horizon.

    Solves min over feasible theta_1 of max_{p,j} (c_{j,p} - signed row
    . h(theta_1, p)) subject to h(theta_1, p) in the refined FPS for all p.
    Nonconvex for pbar > 1 (h is polynomial), handled by the working-set
    scheme from several starts; for pbar = 1 it collapses to the decoupled
    linear program.  Returns (ParamVector, diagnostics).
    """
    problems, by_p, o, p_max = _check_problems(problems)
    if not starts:
        raise ConfigError("need at least one start")
    if p_max == 1:
        pv, tau, d = identify_multistep_decoupled(problems[0], 0.0, cfg)
        return pv, {"reduced_to_decoupled": True, "zeta": d["zeta"], "starts": []}

    g1 = by_p[1].gbound
    bounds_theta = [(-float(g1[i]), float(g1[i])) for i in range(2 * o)]
    e_z = np.zeros(2 * o + 1)
    e_z[2 * o] = 1.0
    attempts = []
    candidates = []
    worst_info = None
    for si, th0 in enumerate(starts):
        chain = _ChainCache(o, p_max)
        theta, mem, ws, r1 = _restore_feasibility(problems, by_p, chain, o,
                                                  th0, _mem_kinds, bounds_theta)
        info = {"start": si, "phase1_rounds": r1, "phase1_violation": mem}
        if mem > _MEM_TOL:
            thetas, _ = chain(theta)
            _, where = _membership_state(problems, thetas, _mem_kinds)
            info["worst_constraint"] = where
            worst_info = (mem, where)
            attempts.append(info)
            continue

        thetas, _ = chain(theta)
        # the restored point is feasible; keep it as a fallback candidate
        candidates.append((_epi_state(problems, thetas), si, theta.copy()))
        x = np.append(theta, _epi_state(problems, thetas) + 1e-10)
        solver_ok = True
        rounds = 0
        for rounds in range(1, _MAX_ROUNDS + 1):
            thetas, _ = chain(x[:2 * o])
            mem, _ = _membership_state(problems, thetas, _mem_kinds)
            epi = _epi_state(problems, thetas)
            added = _grow_working_set(ws, problems, thetas, _all_kinds, zeta=x[2 * o])
            if (added == 0 and mem <= _MEM_TOL and solver_ok
                    and x[2 * o] >= epi - 1e-6 and rounds > 1):
                break
            x[2 * o] = max(x[2 * o], epi) + 1e-12
            fun, jac, _ = _working_constraints(ws, by_p, chain, o, 2 * o + 1,
                                               epi_slot=2 * o)
            res = _minimize(lambda v: v[2 * o], x, jac=lambda v: e_z, method="SLSQP",
                           bounds=bounds_theta + [(0.0, None)],
                           constraints=[{"type": "ineq", "fun": fun, "jac": jac}],
                           options={"maxiter": 150, "ftol": 1e-14})
            solver_ok = bool(res.success)
            if solver_ok and np.all(np.isfinite(res.x)):
                x = res.x.copy()
            else:
                # elastic relaxation: min zeta + MU s with memberships <= s
                mu = 1e5
                fun2, jac2, _ = _working_constraints(ws, by_p, chain, o, 2 * o + 2,
                                                     epi_slot=2 * o, slack_slot=2 * o + 1)
                x2 = np.append(x, max(mem, 0.0) + 1e-10)
                grad2 = np.zeros(2 * o + 2)
                grad2[2 * o] = 1.0
                grad2[2 * o + 1] = mu
                res2 = _minimize(lambda v: v[2 * o] + mu * v[2 * o + 1], x2,
                                jac=lambda v: grad2, method="SLSQP",
                                bounds=bounds_theta + [(0.0, None), (0.0, None)],
                                constraints=[{"type": "ineq", "fun": fun2, "jac": jac2}],
                                options={"maxiter": 150, "ftol": 1e-14})
                if np.all(np.isfinite(res2.x)):
                    x = res2.x[:2 * o + 1].copy()
                solver_ok = True   # accept the elastic step and keep exchanging

        thetas, _ = chain(x[:2 * o])
        mem, where = _membership_state(problems, thetas, _mem_kinds)
        zeta = _epi_state(problems, thetas)
        info.update({"rounds": rounds, "zeta": zeta, "violation": mem,
                     "working_rows": len(ws)})
        attempts.append(info)
        if mem <= _MEM_TOL:
            candidates.append((zeta, si, x[:2 * o].copy()))
        else:
            worst_info = (mem, where)

    if not candidates:
        detail = f"; worst violation {worst_info[0]:.3e} at (p, kind, row) = {worst_info[1]}" \
            if worst_info else ""
        raise NumericalError("no start reached the feasible set of the coupled "
                             "bound program" + detail)
    zeta, si, theta = min(candidates, key=lambda t: (t[0], t[1]))
    diag = {"zeta": float(zeta), "start": int(si), "starts": attempts}
    return ParamVector(RegressorLayout(o, 1), theta), diag


class _CostCache:
    """Memoizes the free-run cost and gradient per theta1 iterate."""

    def __init__(self, o: int, rec: IORecord):
        self.o = o
        self.rec = rec
        self._key = None
        self._val = None

    def __call__(self, theta1):
        key = np.asarray(theta1, dtype=float).tobytes()
        if key != self._key:
            self._val = freerun_cost_grad(theta1, self.o, self.rec)
            self._key = key
        return self._val


def identify_method2(problems: Sequence[HorizonProblem], rec: IORecord,
                     starts: Sequence[np.ndarray]):
    """Simulation error minimization inside the feasible region.

    Minimizes the free-run squared error over the record subject to theta_1
    in the horizon-1 refined FPS and h(theta_1, p) inside the decay box for
    every p up to pbar.  Returns (ParamVector, diagnostics).
    """
    problems, by_p, o, p_max = _check_problems(problems)
    if not starts:
        raise ConfigError("need at least one start")

    def kinds(p):
        return ("fps", "box") if p == 1 else ("box",)

    g1 = by_p[1].gbound
    bounds_theta = [(-float(g1[i]), float(g1[i])) for i in range(2 * o)]
    attempts = []
    candidates = []
    worst_info = None
    for si, th0 in enumerate(starts):
        chain = _ChainCache(o, p_max)
        cost = _CostCache(o, rec)
        theta, mem, ws, r1 = _restore_feasibility(problems, by_p, chain, o,
                                                  th0, kinds, bounds_theta)
        info = {"start": si, "phase1_rounds": r1, "phase1_violation": mem}
        if mem > _MEM_TOL:
            thetas, _ = chain(theta)
            _, where = _membership_state(problems, thetas, kinds)
            info["worst_constraint"] = where
            worst_info = (mem, where)
            attempts.append(info)
            continue

        # the restored point is itself feasible; keep it as a fallback so a
        # wandering solver can never return worse than its own start
        candidates.append((cost(theta)[0], si, theta.copy()))
        x = theta.copy()
        solver_ok = True
        rounds = 0
        for rounds in range(1, _MAX_ROUNDS + 1):
            thetas, _ = chain(x)
            mem, _ = _membership_state(problems, thetas, kinds)
            added = _grow_working_set(ws, problems, thetas, kinds)
            if added == 0 and mem <= _MEM_TOL and solver_ok and rounds > 1:
                break
            fun, jac, _ = _working_constraints(ws, by_p, chain, o, 2 * o,
                                               epi_slot=None)
            res = _minimize(lambda v: cost(v)[0], x, jac=lambda v: cost(v)[1],
                            method="SLSQP", bounds=bounds_theta,
                            constraints=[{"type": "ineq", "fun": fun, "jac": jac}],
                            options={"maxiter": 200, "ftol": 1e-14})
            solver_ok = bool(res.success)
            if np.all(np.isfinite(res.x)):
                x = res.x.copy()
            if not solver_ok:
                # elastic relaxation with a shared slack on the memberships
                f0 = cost(x)[0]
                mu = 1e4 * max(1.0, f0)
                fun2, jac2, _ = _working_constraints(ws, by_p, chain, o, 2 * o + 1,
                                                     epi_slot=None, slack_slot=2 * o)
                x2 = np.append(x, max(mem, 0.0) + 1e-10)

                def elastic(v):
                    return cost(v[:2 * o])[0] + mu * v[2 * o]

                def elastic_grad(v):
                    g = np.append(cost(v[:2 * o])[1], mu)
                    return g

                res2 = _minimize(elastic, x2, jac=elastic_grad, method="SLSQP",
                                bounds=bounds_theta + [(0.0, None)],
                                constraints=[{"type": "ineq", "fun": fun2, "jac": jac2}],
                                options={"maxiter": 200, "ftol": 1e-14})
                if np.all(np.isfinite(res2.x)):
                    x = res2.x[:2 * o].copy()
                solver_ok = True

        thetas, _ = chain(x)
        mem, where = _membership_state(problems, thetas, kinds)
        final_cost = cost(x)[0]
        info.update({"rounds": rounds, "cost": final_cost, "violation": mem,
                     "working_rows": len(ws)})
        attempts.append(info)
        if mem <= _MEM_TOL:
            candidates.append((final_cost, si, x.copy()))
        else:
            worst_info = (mem, where)

    if not candidates:
        detail = f"; worst violation {worst_info[0]:.3e} at (p, kind, row) = {worst_info[1]}" \
            if worst_info else ""
        raise NumericalError("no start reached the feasible set of the constrained "
                             "simulation-error program" + detail)
    final_cost, si, theta = min(candidates, key=lambda t: (t[0], t[1]))
    diag = {"cost": float(final_cost), "start": int(si), "starts": attempts}
    return ParamVector(RegressorLayout(o, 1), theta), diag


def true_theta1(ss: DiscreteSS, o: int) -> ParamVector:
    """Exact one-step parameters of a sampled system, zero-padded to order o.

    Padding with zero coefficients embeds an order-n model in any order
    o >= n without changing its predictions.
    """
    n = ss.order
    if o < n:
        raise ConfigError(f"model order {o} below the system order {n}")
    base = ss.arx_parameters()
    a = np.zeros(o)
    b = np.zeros(o)
    a[:n] = base[:n]
    b[:n] = base[n:]
    return ParamVector(RegressorLayout(o, 1), np.concatenate([a, b]))
