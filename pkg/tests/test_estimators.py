"""Noise-bound scan, order scan, decay fit and gain extraction.

The decay fit has a cheap independent oracle (dense grid over the rate with
the gain eliminated analytically); the scans are checked on the small
first-order record where the true answers are known.
"""

import numpy as np
import pytest

from smident.dataset import SampleCache
from smident.errors import ConfigError, EstimationError
from smident.estimators import (
    ORDER_EXCESS_RATIO,
    ProcedureTrace,
    base_lambda_series,
    estimate_dbar,
    estimate_gains,
    estimate_Lu,
    estimate_Lz,
    estimate_order,
    fit_decay,
)
from smident.polytope_lp import Polytope


def _grid_objective(f, rho):
    P = np.arange(1, f.size + 1, dtype=float)
    L = float(np.max(f * rho ** -P))
    return float(np.sum((f - L * rho ** P) ** 2)), L


def _dense_grid_best(f, step=1e-4):
    best = (np.inf, None, None)
    for rho in np.arange(step, 1.0, step):
        obj, L = _grid_objective(f, rho)
        if obj < best[0]:
            best = (obj, L, rho)
    return best


# -- decay fit --------------------------------------------------------------


def test_fit_decay_recovers_exact_exponential():
    p = np.arange(1, 40)
    f = 2.0 * 0.9 ** p
    L, rho, diag = fit_decay(f)
    assert rho == pytest.approx(0.9, abs=1e-4)
    assert L == pytest.approx(2.0, rel=1e-3)
    assert diag["objective"] == pytest.approx(0.0, abs=1e-12)


def test_fit_decay_matches_dense_grid(rng):
    for _ in range(8):
        n = int(rng.integers(10, 60))
        p = np.arange(1, n + 1)
        rho_true = rng.uniform(0.5, 0.98)
        f = rng.uniform(0.5, 3.0) * rho_true ** p
        f *= rng.uniform(0.2, 1.0, size=n)       # ragged curve under the envelope
        L, rho, diag = fit_decay(f)
        ref_obj, ref_L, ref_rho = _dense_grid_best(f)
        assert diag["objective"] <= ref_obj + 1e-9 * (1.0 + ref_obj)
        # envelope feasibility: the fit must upper-bound every point
        assert np.all(L * rho ** p >= f - 1e-9)


def test_fit_decay_envelope_touches_curve(rng):
    p = np.arange(1, 30)
    f = 1.5 * 0.85 ** p * rng.uniform(0.3, 1.0, size=29)
    L, rho, _ = fit_decay(f)
    gap = np.min(L * rho ** p - f)
    assert gap == pytest.approx(0.0, abs=1e-7)   # constraint active somewhere


def test_fit_decay_validation():
    with pytest.raises(ConfigError):
        fit_decay(np.array([1.0]))
    with pytest.raises(ConfigError):
        fit_decay(np.array([1.0, -0.1]))
    with pytest.raises(ConfigError):
        fit_decay(np.zeros(5))


# -- noise-bound scan -------------------------------------------------------


def test_estimate_dbar_brackets_true_bound(mini_record):
    cache = SampleCache(mini_record)
    dbar, pbar, trace = estimate_dbar(cache, o_init=2, p_max=20)
    assert 0.03 <= dbar <= 0.0505          # true bound 0.05, scan from below
    assert 1 <= pbar < 20
    assert trace.chosen == dbar and trace.pbar == pbar
    assert any(t["accepted"] for t in trace.trials)
    # margins at the chosen bound vanish beyond pbar
    lam = np.maximum(base_lambda_series(cache, 2, np.arange(pbar + 1, 21)) - dbar, 0.0)
    assert np.all(lam <= trace.zero_tol)


def test_estimate_dbar_noise_free(mini_record_clean):
    cache = SampleCache(mini_record_clean)
    dbar, pbar, trace = estimate_dbar(cache, o_init=2, p_max=15)
    assert dbar == 0.0
    assert pbar >= 1


def test_estimate_dbar_undersized_grid(mini_record):
    cache = SampleCache(mini_record)
    with pytest.raises(EstimationError, match="extend the grid"):
        estimate_dbar(cache, o_init=2, p_max=20, grid=[1e-5, 2e-5], refine_step=None)
    with pytest.raises(ConfigError):
        estimate_dbar(cache, o_init=2, p_max=20, grid=[0.1, 0.1])
    with pytest.raises(ConfigError):
        estimate_dbar(cache, o_init=0, p_max=20)


def test_dbar_trace_csv_roundtrips(mini_record, tmp_path):
    cache = SampleCache(mini_record)
    _, _, trace = estimate_dbar(cache, o_init=2, p_max=12)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "trial,p,lambda,accepted"
    s = trace.summary()
    assert s["kind"] == "noise-bound" and s["n_trials"] == len(trace.trials)


# -- order scan -------------------------------------------------------------


def test_estimate_order_recovers_first_order_system(mini_record):
    cache = SampleCache(mini_record)
    dbar, pbar, _ = estimate_dbar(cache, o_init=2, p_max=20)
    o, trace = estimate_order(cache, dbar, pbar, o_init=2, p_max=20)
    assert o == 1
    assert trace.extras.get("note", "").startswith("order test passed down to 1")


def test_estimate_order_noise_free(mini_record_clean):
    cache = SampleCache(mini_record_clean)
    dbar, pbar, _ = estimate_dbar(cache, o_init=3, p_max=15)
    o, _ = estimate_order(cache, dbar, pbar, o_init=3, p_max=15)
    assert o == 1


def test_estimate_order_rejects_undersized_model(mini2_record):
    cache = SampleCache(mini2_record)
    dbar, pbar, _ = estimate_dbar(cache, o_init=3, p_max=20)
    o, trace = estimate_order(cache, dbar, pbar, o_init=3, p_max=20)
    assert o == 2
    ratios = trace.extras["ratios"]
    assert ratios[2] <= ORDER_EXCESS_RATIO < ratios[1]


def test_estimate_order_validation(mini_record):
    cache = SampleCache(mini_record)
    with pytest.raises(ConfigError):
        estimate_order(cache, 0.05, 20, o_init=2, p_max=20)
    # a noise bound far below the scan result leaves the reference tail
    # unsettled, which the guard must flag
    with pytest.raises(EstimationError, match="not settled"):
        estimate_order(cache, 0.01, 17, o_init=2, p_max=20)


# -- decay gains ------------------------------------------------------------


def test_gains_on_handmade_boxes():
    # two boxes with known coordinate maxima; dim = 2o + p - 1 with o=2, p=1
    b1 = Polytope.box([-1.0, -0.5, -0.2, -0.1], [1.0, 0.5, 0.2, 0.1])
    b2 = Polytope.box([-0.3, -2.0, -0.6, -0.4], [0.3, 2.0, 0.6, 0.4])
    rho = 0.8
    assert estimate_Lz([b1, b2], o=2, rho=rho) == pytest.approx(2.0 / rho)
    assert estimate_Lu([b1, b2], o=2, rho=rho) == pytest.approx(0.6 / rho)
    Lz, Lu = estimate_gains([b1, b2], o=2, rho=rho)
    assert Lz == pytest.approx(2.0 / rho) and Lu == pytest.approx(0.6 / rho)


def test_gains_merged_equals_separate(rng):
    polys = []
    for p in (1, 2, 3):
        dim = 2 * 2 + p - 1
        a = rng.normal(size=(10, dim))
        x0 = rng.uniform(-0.5, 0.5, dim)
        b = a @ x0 + rng.uniform(0.1, 1.0, 10)
        polys.append(Polytope(a=a, b=b, lb=x0 - 2.0, ub=x0 + 2.0))
    Lz, Lu = estimate_gains(polys, o=2, rho=0.9)
    assert Lz == pytest.approx(estimate_Lz(polys, 2, 0.9), rel=1e-9)
    assert Lu == pytest.approx(estimate_Lu(polys, 2, 0.9), rel=1e-9)


def test_gains_reject_nonpositive():
    neg = Polytope.box([-2.0, -2.0, -2.0, -2.0], [-1.0, -1.0, -1.0, -1.0])
    from smident.errors import NumericalError
    with pytest.raises(NumericalError, match="decay gain"):
        estimate_Lz([neg], o=2, rho=0.9)
