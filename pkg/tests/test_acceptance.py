"""Acceptance suite: one test per release criterion, full-scale study once.

The flagship third-order benchmark is expensive (~10 min for the estimation
chain alone at N = 1500), so a module-scoped fixture runs the whole pipeline
a single time and every bound/ordering criterion reads from that run.  The
oracle suites and the determinism check are independent of it.
"""

import csv
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from smident.dataset import SampleCache, build_sample_set
from smident.estimators import fit_decay
from smident.lti_sim import ContinuousTF, discretize_zoh
from smident.pipeline import (
    ExperimentConfig,
    cmd_estimate,
    cmd_generate,
    cmd_identify,
    cmd_report,
    run_all,
)
from smident.polytope_lp import solve_lp
from smident.predictors import (
    HorizonProblem,
    identify_multistep_decoupled,
    propagate,
    propagate_chain,
    simulate_predictor,
    true_theta1,
)
from smident.sm_bounds import InflationConfig, lambda_is_zero, lambda_underbar

from conftest import MINI_TF, MINI_TS
from test_polytope_lp import _oracle_max, _random_poly
from test_predictors import _phi_row, _random_theta1

ESTIMATE_BUDGET_S = 600.0
ORACLE_BUDGET_S = 60.0


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """Full benchmark pipeline run, shared by the bound criteria."""
    out = tmp_path_factory.mktemp("bench")
    cfg = ExperimentConfig(out_dir=str(out))
    rec_id, rec_val = cmd_generate(cfg)
    cache = SampleCache(rec_id)
    t0 = time.perf_counter()
    est = cmd_estimate(cfg, rec_id, cache=cache)
    est_seconds = time.perf_counter() - t0
    ident = cmd_identify(cfg, rec_id, est, cache=cache)
    summary = cmd_report(cfg, rec_val, ident)

    tau, err = {}, {}
    with (Path(cfg.out_dir) / "curves.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    for key in rows[0]:
        kind, _, name = key.partition("_")
        if kind == "tau":
            tau[name] = np.array([float(r[key]) for r in rows])
        elif kind == "err":
            err[name] = np.array([float(r[key]) for r in rows])

    return SimpleNamespace(cfg=cfg, cache=cache, est=est, ident=ident,
                           summary=summary, tau=tau, err=err,
                           est_seconds=est_seconds)


def test_criterion_1_benchmark_estimation_chain(bench):
    # desk scale N = N_v = 1500, fixed seed; the data-driven estimates must
    # land in the documented windows and the chain must fit the time budget
    assert bench.est_seconds <= ESTIMATE_BUDGET_S, \
        f"estimation took {bench.est_seconds:.0f}s"
    assert 0.090 <= bench.est.dbar <= 0.101
    assert 95 <= bench.est.pbar <= 140
    assert bench.est.o == 3
    assert 0.945 <= bench.est.rho <= 0.985


def test_criterion_2_guaranteed_bounds_hold(bench):
    est, cfg = bench.est, bench.cfg
    # the exact parameter chain of the generating system must sit inside
    # every horizon's feasible set after the containment guard ran
    ss = discretize_zoh(ContinuousTF(cfg.tf_num, cfg.tf_den), cfg.ts)
    chain = propagate_chain(true_theta1(ss, est.o).values, est.o, est.pbar)
    worst = max(hp.membership_violation(chain[i])
                for i, hp in enumerate(bench.ident.problems))
    assert worst <= 1e-8, f"containment violated by {worst:.3g}"
    # with containment in force, every method's validation error must stay
    # below its guaranteed bound at every horizon up to pbar
    for name in bench.err:
        gap = bench.err[name] - bench.tau[name]
        assert gap.max() <= 1e-10, \
            f"{name}: bound violated by {gap.max():.3g} at p={gap.argmax() + 1}"


def test_criterion_3_method_ordering(bench):
    tau, err, pbar = bench.tau, bench.err, bench.est.pbar
    i = pbar - 1
    slack = 1.05
    assert tau["decoupled"][i] <= slack * tau["method1"][i]
    assert tau["method1"][i] <= slack * tau["pem"][i]
    assert tau["method2"][i] <= slack * tau["sem"][i]
    assert tau["sem"][i] <= slack * tau["pem"][i]
    for p in (35, pbar):
        assert err["method2"][p - 1] <= err["pem"][p - 1], \
            f"at p={p}: {err['method2'][p - 1]:.4g} > {err['pem'][p - 1]:.4g}"


def test_criterion_4_margin_bound_properties(bench):
    est, cache = bench.est, bench.cache
    cfg = bench.cfg
    scale = cache.rec.output_scale()
    ps = np.arange(1, cfg.p_max + 1)
    sets = [cache.get(est.o, int(p)) for p in ps]
    # overestimated noise bound: margins vanish beyond pbar
    for S in sets[est.pbar:]:
        assert lambda_is_zero(lambda_underbar(S, 0.105), scale)
    # underestimated noise bound: margins beyond pbar stay clearly positive
    tail_min = min(lambda_underbar(S, 0.05) for S in sets[est.pbar:])
    assert tail_min >= 0.03, f"tail margin {tail_min:.4f} under 0.05-bound"
    # constraint monotonicity: half the rows can only lower the margin
    for S in sets:
        sub = S.take(np.arange(0, S.n_rows, 2))
        lam_sub = lambda_underbar(sub, est.dbar)
        lam_full = lambda_underbar(S, est.dbar)
        assert lam_sub <= lam_full + 1e-9, \
            f"p={S.layout.p}: subsample margin {lam_sub:.4g} > full {lam_full:.4g}"


def test_criterion_5_margin_decay_rate(bench):
    est, cfg = bench.est, bench.cfg
    # with the true noise bound and an adequate order, margins must decay
    # within 20% of n * dbar0 * L_z * rho^(p+1) (n = 3: benchmark plant order)
    n, dbar0 = 3, cfg.dbar0
    for p in range(5, est.pbar + 1):
        lam = lambda_underbar(bench.cache.get(est.o, p), dbar0)
        ceil = n * dbar0 * est.L_z * est.rho ** (p + 1) * 1.2
        assert lam <= ceil + 1e-12, f"p={p}: {lam:.4g} > {ceil:.4g}"


def test_criterion_6_oracle_suites(rng, mini_record):
    infl = InflationConfig(alpha=1.3, gamma=1.2)

    # LP solver vs exhaustive vertex enumeration, dimensions <= 4
    t0 = time.perf_counter()
    checked = 0
    while checked < 200:
        poly = _random_poly(rng, empty_chance=0.15)
        c = rng.normal(size=poly.dim)
        ref = _oracle_max(c, poly)
        out = solve_lp(c, poly)
        if ref is None:
            assert out.status == "infeasible"
        else:
            assert out.status == "optimal"
            assert abs(out.value - ref) <= 1e-6 * (1.0 + abs(ref))
        checked += 1
    t_lp = time.perf_counter() - t0
    assert t_lp <= ORACLE_BUDGET_S, f"LP oracle suite took {t_lp:.1f}s"

    # closed-form horizon coefficients vs numerically iterated recursion
    t0 = time.perf_counter()
    for _ in range(500):
        o = int(rng.integers(1, 5))
        p = int(rng.integers(1, 31))
        th = _random_theta1(rng, o)
        y_hist = rng.uniform(-1.0, 1.0, o)
        u = rng.uniform(-1.0, 1.0, o - 1 + p)
        direct = simulate_predictor(th, o, u, y_hist, p)[-1]
        assert propagate(th, o, p) @ _phi_row(y_hist, u, o, p) == \
            pytest.approx(direct, abs=1e-10)
    t_prop = time.perf_counter() - t0
    assert t_prop <= ORACLE_BUDGET_S, f"propagation oracle took {t_prop:.1f}s"

    # envelope fit vs a dense grid over the fit's own search interval; far-off
    # rho values overflow to inf objectives, which simply lose the argmin
    t0 = time.perf_counter()
    rhos = np.arange(0.05, 0.999 + 1e-9, 2.5e-4)
    for _ in range(50):
        m = int(rng.integers(15, 50))
        p = np.arange(1, m + 1)
        f = rng.uniform(0.5, 3.0) * rng.uniform(0.5, 0.95) ** p
        f *= rng.uniform(0.3, 1.0, size=m)
        L, rho, diag = fit_decay(f)
        with np.errstate(over="ignore"):
            Lg = np.max(f / rhos[:, None] ** p, axis=1)   # tight envelope per rho
            grid_best = np.min(np.sum((f - Lg[:, None] * rhos[:, None] ** p) ** 2,
                                      axis=1))
        assert diag["objective"] <= grid_best + 1e-9 * (1.0 + grid_best)
        assert np.all(L * rho ** p >= f - 1e-9)
    t_fit = time.perf_counter() - t0
    assert t_fit <= ORACLE_BUDGET_S, f"decay-fit oracle took {t_fit:.1f}s"

    # per-horizon program vs a dense grid over its 2-D parameter box
    t0 = time.perf_counter()
    g = np.array([1.5, 1.5])
    axis = np.linspace(-g[0], g[0], 301)
    grid = np.array(np.meshgrid(axis, axis)).reshape(2, -1)
    for start in (0, 120, 240):
        seg = mini_record.segment(start, start + 40)
        S = build_sample_set(seg, 1, 1)
        for eps in (0.02, 0.08):
            hp = HorizonProblem(S=S, corr=eps + 0.05, gbound=g)
            c = hp.support_values()
            n = S.n_rows
            r = S.phi @ grid
            spread = np.maximum((c[:n, None] - r).max(axis=0),
                                (c[n:, None] + r).max(axis=0))
            grid_best = infl.gamma * spread.min() + eps
            pv, tau_val, _ = identify_multistep_decoupled(hp, eps, infl)
            assert tau_val <= grid_best + 1e-9
            assert np.all(np.abs(pv.values) <= g + 1e-12)
    t_ms = time.perf_counter() - t0
    assert t_ms <= ORACLE_BUDGET_S, f"per-horizon oracle took {t_ms:.1f}s"


def test_criterion_7_deterministic_reruns(tmp_path):
    cfg = ExperimentConfig(
        tf_num=[float(v) for v in MINI_TF.num],
        tf_den=[float(v) for v in MINI_TF.den], ts=MINI_TS,
        n_id=400, n_val=400, hold_time=2.0, dbar0=0.05, seed=7,
        o_init=2, p_max=20, p_report=[1, 5, 10], out_dir=str(tmp_path))
    run_all(cfg)
    first = {f.name: f.read_bytes() for f in sorted(tmp_path.iterdir())
             if f.suffix in (".csv", ".json")}
    assert first, "pipeline produced no artifacts"
    run_all(cfg)
    for name, blob in first.items():
        assert (tmp_path / name).read_bytes() == blob, f"{name} changed on rerun"
