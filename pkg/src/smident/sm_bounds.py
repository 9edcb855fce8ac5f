"""Worst-case residual bounds and feasible parameter sets.

Given regressor data with measurement noise bounded by dbar, the key
quantities per horizon p are

* lambda_underbar: the smallest worst-case residual margin any parameter
  can achieve, i.e. min_theta max_i |target_i - phi_i . theta| - dbar,
  floored at zero.  It vanishes for all p beyond some horizon exactly when
  the assumed noise bound is consistent with the data.
* eps_hat = alpha * lambda_underbar: an inflated residual bound.
* the feasible parameter set (FPS): all theta whose residuals stay within
  eps_hat + dbar on every data row.
* tau_hat: a guaranteed bound on the p-step prediction error of a given
  parameter vector, built from support values of the FPS.

Exponential-decay side information (output coefficients below L_z rho^(p+i),
input coefficients below L_u rho^i) refines the FPS by intersection with a
box, which is what makes the support-function workload tractable.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import SampleSet
from .errors import ConfigError, NumericalError
from .polytope_lp import (OMEGA_BOX, Polytope, intersect, is_empty, solve_lp,
                          solve_lp_batch)

log = logging.getLogger(__name__)

# A residual margin counts as zero below max(ZERO_TOL_ABS, ZERO_TOL_REL*scale)
# where scale is the output magnitude of the record.
ZERO_TOL_ABS = 1e-8
ZERO_TOL_REL = 1e-6

# Support values are cached per (data, polytope) content hash.
_C_CACHE: dict = {}
_C_CACHE_MAX = 200


@dataclass(frozen=True)
class InflationConfig:
    """Inflation factors turning data-driven margins into guaranteed bounds.

    alpha scales lambda_underbar into eps_hat, gamma scales the FPS spread
    inside tau_hat.  Both must exceed 1; the defaults follow the benchmark
    study.
    """

    alpha: float = 1.3
    gamma: float = 1.2

    def __post_init__(self):
        if not (self.alpha > 1.0 and self.gamma > 1.0):
            raise ConfigError("inflation factors alpha and gamma must both exceed 1")


@dataclass(frozen=True)
class DecayBound:
    """Exponential envelope |impulse-type coefficient| <= L * rho^lag."""

    L_z: float
    L_u: float
    rho: float

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise ConfigError("decay rate must lie strictly inside (0, 1)")
        if self.L_z <= 0.0 or self.L_u <= 0.0:
            raise ConfigError("decay gains must be positive")

    def scaled(self, factor: float) -> "DecayBound":
        return DecayBound(L_z=self.L_z * factor, L_u=self.L_u * factor, rho=self.rho)


def lambda_underbar(S: SampleSet, dbar: float) -> float:
    """Optimal residual margin beyond the noise corridor of width dbar.

    Computed once per sample set at dbar = 0 and shifted: the margin at
    any dbar equals max(0, margin_at_zero - dbar), because the same LP
    differs only by the constant dbar on every row.
    """
    if dbar < 0:
        raise ConfigError("noise bound must be nonnegative")
    return max(0.0, _lambda_base(S) - dbar)


def _lambda_base(S: SampleSet) -> float:
    base = S._cache.get("lambda_base")
    if base is None:
        n, d = S.phi.shape
        # variables (theta, lam): phi.theta - lam <= y, -phi.theta - lam <= -y
        a = np.block([[S.phi, -np.ones((n, 1))], [-S.phi, -np.ones((n, 1))]])
        b = np.concatenate([S.targets, -S.targets])
        lb = np.append(np.full(d, -OMEGA_BOX), 0.0)
        # theta = 0 achieves margin max|targets|, so the optimum never
        # exceeds it; the tight bound keeps the LP well scaled
        ub = np.append(np.full(d, OMEGA_BOX),
                       float(np.abs(S.targets).max(initial=0.0)) + 1.0)
        c = np.zeros(d + 1)
        c[-1] = 1.0
        # the walker's phase-1 copes badly with the lifted margin geometry;
        # one cold simplex solve per sample set is the faster route here
        out = solve_lp(c, Polytope(a=a, b=b, lb=lb, ub=ub), sense="min",
                       engine="highs")
        if out.status != "optimal":
            raise NumericalError(f"residual-margin LP ended with status {out.status}")
        base = S._cache["lambda_base"] = max(0.0, float(out.value))
    return base


def lambda_is_zero(lam: float, scale: float) -> bool:
    """Zero test at the module tolerance, relative to the output scale."""
    return lam <= max(ZERO_TOL_ABS, ZERO_TOL_REL * scale)


def eps_hat(lam, cfg: InflationConfig):
    """Inflated residual bound alpha * lambda (scalar or array)."""
    return cfg.alpha * np.asarray(lam, dtype=float) if np.ndim(lam) else cfg.alpha * float(lam)


def fps(S: SampleSet, eps: float, dbar: float) -> Polytope:
    """Feasible parameter set {theta : |targets - phi theta| <= eps + dbar}."""
    if eps < 0 or dbar < 0:
        raise ConfigError("corridor widths must be nonnegative")
    corridor = eps + dbar
    a = np.vstack([S.phi, -S.phi])
    b = np.concatenate([S.targets + corridor, corridor - S.targets])
    return Polytope.from_rows(a, b)


def gamma_set(o: int, p: int, decay: DecayBound, omega: float = OMEGA_BOX) -> Polytope:
    """Box of parameter vectors obeying the exponential decay envelope.

    Output coefficients (lag i = 1..o behind the whole horizon) are bounded
    by L_z rho^(p+i); input coefficients (lag i = 1..p+o-1) by L_u rho^i.
    """
    if o < 1 or p < 1:
        raise ConfigError("model order and horizon must be >= 1")
    iy = np.arange(1, o + 1)
    iu = np.arange(1, p + o)
    bound = np.concatenate([decay.L_z * decay.rho ** (p + iy), decay.L_u * decay.rho ** iu])
    bound = np.minimum(bound, omega)
    return Polytope.box(-bound, bound)


def refined_fps(S: SampleSet, eps: float, dbar: float, decay: DecayBound) -> Polytope:
    """FPS intersected with the decay box for the same (o, p)."""
    return intersect(fps(S, eps, dbar), gamma_set(S.layout.o, S.layout.p, decay))


def signed_regressors(S: SampleSet) -> np.ndarray:
    """The 2N direction rows [phi; -phi] used by support computations."""
    return np.vstack([S.phi, -S.phi])


def c_coeffs(S: SampleSet, poly: Polytope) -> np.ndarray:
    """Support values of the 2N signed regressor directions over `poly`.

    c[j] = max_{theta in poly} (signed row j) . theta.  Cached by content,
    since the same (data, set) pair is queried by every bound evaluation
    and by the convex identification programs.
    """
    key = (S.content_hash(), poly.content_hash())
    hit = _C_CACHE.get(key)
    if hit is not None:
        return hit
    res = solve_lp_batch(signed_regressors(S), poly)
    if res.status != "optimal":
        raise NumericalError(
            f"support computation failed for o={S.layout.o}, p={S.layout.p}: "
            f"polytope is {res.status} (enlarge the bounds and retry)")
    log.debug("c-coeffs o=%d p=%d: %s", S.layout.o, S.layout.p, res.stats)
    if len(_C_CACHE) >= _C_CACHE_MAX:
        _C_CACHE.pop(next(iter(_C_CACHE)))
    values = res.values.copy()
    values.flags.writeable = False
    _C_CACHE[key] = values
    return values


def tau_hat(theta_p: np.ndarray, S: SampleSet, eps_p: float, cfg: InflationConfig,
            poly: Optional[Polytope] = None, c: Optional[np.ndarray] = None) -> float:
    """Guaranteed p-step prediction error bound for the parameters theta_p.

    tau = gamma * max_j (c_j - (signed row j) . theta_p) + eps_p, the worst
    spread between theta_p and the feasible set as seen through the data
    directions, inflated by gamma.  Pass `c` to reuse precomputed support
    values; otherwise `poly` must be given.
    """
    theta_p = np.asarray(theta_p, dtype=float).reshape(-1)
    if theta_p.size != S.layout.dim:
        raise ConfigError("parameter dimension does not match the sample set")
    if c is None:
        if poly is None:
            raise ConfigError("need either support values c or a polytope")
        c = c_coeffs(S, poly)
    spread = float(np.max(c - signed_regressors(S) @ theta_p))
    return cfg.gamma * spread + float(eps_p)


def ensure_nonempty(sample_sets: Sequence[SampleSet], lam: np.ndarray, dbar: float,
                    cfg: InflationConfig, decay: DecayBound, step: float = 1.05,
                    cap: float = 10.0, witnesses: Optional[Sequence[np.ndarray]] = None):
    """Inflate the error bounds jointly until every refined FPS is usable.

    Multiplies the residual corridor (eps_hat_p + dbar) and the decay gains
    (L_z, L_u) by `step` repeatedly until, for every horizon, the refined FPS
    is nonempty (and contains its witness vector, when given).  The corridor
    is scaled as a whole because eps_hat alone can be arbitrarily small at
    long horizons, leaving no room to absorb a slightly optimistic noise
    bound.  Returns (factor, eps_array, decay_scaled) where eps_array is the
    enlarged corridor with dbar subtracted back out, so downstream code can
    keep using eps + dbar.  Raises NumericalError once the factor would
    exceed `cap`.
    """
    lam = np.asarray(lam, dtype=float).reshape(-1)
    if len(sample_sets) != lam.size:
        raise ConfigError("one lambda value per sample set required")
    if witnesses is not None and len(witnesses) != len(sample_sets):
        raise ConfigError("one witness per sample set required")
    eps0 = cfg.alpha * lam
    factor = 1.0
    while factor <= cap:
        eps_adj = factor * eps0 + (factor - 1.0) * dbar
        bad = None
        for i, S in enumerate(sample_sets):
            poly = refined_fps(S, float(eps_adj[i]), dbar, decay.scaled(factor))
            if witnesses is not None:
                if not poly.contains(witnesses[i]):
                    bad = (S.layout.p, "witness outside")
                    break
            elif is_empty(poly):
                bad = (S.layout.p, "empty")
                break
        if bad is None:
            return factor, eps_adj, decay.scaled(factor)
        log.debug("inflation %.4f insufficient at p=%d (%s)", factor, bad[0], bad[1])
        factor *= step
    raise NumericalError(
        f"bound inflation exceeded the cap {cap}; data and decay assumptions "
        "are inconsistent (check the noise bound and the decay fit)")


@dataclass
class BoundSeries:
    """Per-horizon bound curves for one model order and noise bound."""

    o: int
    dbar: float
    p: np.ndarray
    lam: np.ndarray
    eps: np.ndarray
    tau: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=int).reshape(-1)
        self.lam = np.asarray(self.lam, dtype=float).reshape(-1)
        self.eps = np.asarray(self.eps, dtype=float).reshape(-1)
        if self.tau is not None:
            self.tau = np.asarray(self.tau, dtype=float).reshape(-1)
            if self.tau.size != self.p.size:
                raise ConfigError("tau length mismatch")
        if not (self.p.size == self.lam.size == self.eps.size):
            raise ConfigError("series length mismatch")

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p", "lambda", "eps_hat", "tau_hat"])
            for i in range(self.p.size):
                tau = "" if self.tau is None else f"{self.tau[i]:.17g}"
                w.writerow([int(self.p[i]), f"{self.lam[i]:.17g}", f"{self.eps[i]:.17g}", tau])
        side = {"o": self.o, "dbar": self.dbar}
        side.update(self.meta)
        with Path(path).with_suffix(Path(path).suffix + ".json").open("w") as fh:
            json.dump(side, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_csv(cls, path) -> "BoundSeries":
        path = Path(path)
        p, lam, eps, tau = [], [], [], []
        with path.open(newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                p.append(int(row[0]))
                lam.append(float(row[1]))
                eps.append(float(row[2]))
                tau.append(float(row[3]) if row[3] != "" else np.nan)
        meta = {}
        o, dbar = 0, 0.0
        side = path.with_suffix(path.suffix + ".json")
        if side.exists():
            with side.open() as fh:
                meta = json.load(fh)
            o = int(meta.pop("o", 0))
            dbar = float(meta.pop("dbar", 0.0))
        tau_arr = np.asarray(tau)
        return cls(o=o, dbar=dbar, p=np.asarray(p), lam=np.asarray(lam),
                   eps=np.asarray(eps),
                   tau=None if np.isnan(tau_arr).all() else tau_arr, meta=meta)
