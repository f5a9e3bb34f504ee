from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares

from qfctwin.chain import optimal_pump_power
from qfctwin.config import paper_config
from qfctwin.fitting import (
    FitModel,
    FitProblem,
    RankDeficiencyError,
    efficiency_sweep,
    fit,
    jacobian_check,
    sin2_sqrt_power,
    sinc2_detuning,
)

P = np.linspace(0.0, 0.4, 20)
FIX_L = {"length": 4.0}


def _noisy(noise, seed, eta_max=0.484, eta_n=0.5411):
    rng = np.random.default_rng(seed)
    truth = sin2_sqrt_power(P, eta_max, eta_n, 4.0)
    y = truth * (1 + noise * rng.standard_normal(P.size))
    sigma = noise * np.maximum(np.abs(y), 1e-3)
    return FitProblem(FitModel.SIN2_SQRT_POWER, P, y, sigma, dict(FIX_L))


def test_noiseless_recovery():
    y = sin2_sqrt_power(P, 0.484, 0.5411, 4.0)
    r = fit(FitProblem("sin2_sqrt_power", P, y, 0.01, dict(FIX_L)))
    assert r.converged
    assert r.params["eta_max"] == pytest.approx(0.484, rel=1e-6)
    assert r.params["eta_n"] == pytest.approx(0.5411, rel=1e-6)
    assert r.params["length"] == 4.0


def test_five_percent_noise_95th_percentile():
    # bound frozen from this 100-seed Monte Carlo (observed 2.5%)
    errs = [abs(fit(_noisy(0.05, s)).params["eta_max"] / 0.484 - 1) for s in range(100)]
    assert np.percentile(errs, 95) < 0.03


def test_zero_data_is_degenerate():
    r = fit(FitProblem("sin2_sqrt_power", P, np.zeros_like(P), 0.01, dict(FIX_L),
                       {"eta_max": 0.5, "eta_n": 0.5}))
    assert abs(r.params["eta_max"]) < 1e-6
    assert r.degenerate
    assert math.isinf(r.errors["eta_n"])


def test_matches_scipy_oracle():
    prob = _noisy(0.03, 5)
    r = fit(prob)
    ref = least_squares(lambda th: prob.residuals(th), prob.theta0(), xtol=1e-15, ftol=1e-15,
                        gtol=1e-15, method="lm")
    assert r.params["eta_max"] == pytest.approx(ref.x[0], rel=1e-6)
    assert r.params["eta_n"] == pytest.approx(ref.x[1], rel=1e-6)


def test_refit_is_idempotent():
    prob = _noisy(0.03, 9)
    r = fit(prob)
    again = fit(FitProblem(prob.model, prob.x, prob.y, prob.sigma, dict(FIX_L),
                           {k: r.params[k] for k in ("eta_max", "eta_n")}))
    assert again.converged and again.iterations <= 2


@pytest.mark.parametrize("s", [0.5, 3.0, 1e3])
def test_scale_equivariance(s):
    prob = _noisy(0.03, 13)
    r = fit(prob)
    scaled = FitProblem(prob.model, prob.x * s, prob.y, prob.sigma, dict(FIX_L),
                        {"eta_max": prob.initial_guess["eta_max"],
                         "eta_n": prob.initial_guess["eta_n"] / s})
    rs = fit(scaled)
    assert rs.params["eta_n"] == pytest.approx(r.params["eta_n"] / s, rel=1e-7)
    assert rs.chi2 == pytest.approx(r.chi2, rel=1e-10)


def test_iteration_cap_flags_non_convergence():
    prob = FitProblem("sin2_sqrt_power", P, sin2_sqrt_power(P, 0.484, 0.5411, 4.0), 0.01,
                      dict(FIX_L), {"eta_max": 0.1, "eta_n": 0.1})
    r = fit(prob, max_iter=1)
    assert not r.converged and r.iterations == 1


def test_rank_deficient_start_raises():
    x = np.full(6, 0.2)
    with pytest.raises(RankDeficiencyError):
        fit(FitProblem("sin2_sqrt_power", x, np.full(6, 0.3), 0.01, dict(FIX_L)))


def test_problem_validation():
    with pytest.raises(ValueError, match="at least"):
        FitProblem("sin2_sqrt_power", P[:3], P[:3], 0.1, dict(FIX_L))
    with pytest.raises(ValueError, match="sigma"):
        FitProblem("sin2_sqrt_power", P, P, 0.0, dict(FIX_L))
    with pytest.raises(ValueError, match="unknown"):
        FitProblem("sin2_sqrt_power", P, P, 0.1, {"bogus": 1.0})


def test_jacobian_reference_point():
    prob = _noisy(0.03, 1)
    assert jacobian_check(prob, [0.484, 0.5411]) < 1e-5
    full = FitProblem(prob.model, prob.x, prob.y, prob.sigma, {}, {"eta_max": 0.484,
                      "eta_n": 0.5411, "length": 4.0})
    assert jacobian_check(full) < 1e-5


def test_jacobian_sinc2_at_zero_detuning():
    # exact zero plus points inside the series branch of sinc
    x = np.sort(np.concatenate([np.linspace(-2, 2, 21), [-1e-6, 1e-7, 2e-5]]))
    prob = FitProblem("sinc2_detuning", x, np.ones_like(x), 0.01, {},
                      {"amplitude": 1.0, "center": 0.0, "scale": 3.0})
    assert jacobian_check(prob) < 1e-5


def test_jacobian_zero_parameters_finite():
    prob = _noisy(0.03, 1)
    assert math.isfinite(jacobian_check(prob, [0.0, 0.0]))
    x = np.linspace(-2, 2, 11)
    sp = FitProblem("sinc2_detuning", x, np.ones_like(x), 0.01, {},
                    {"amplitude": 0.0, "center": 0.0, "scale": 0.0})
    assert math.isfinite(jacobian_check(sp))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 1), st.floats(0.01, 5), st.floats(0.5, 8))
def test_jacobian_sin2_random(eta_max, eta_n, length):
    prob = FitProblem("sin2_sqrt_power", P, np.ones_like(P), 0.01, {},
                      {"eta_max": eta_max, "eta_n": eta_n, "length": length})
    assert jacobian_check(prob) < 1e-5


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 10), st.floats(-1, 1), st.floats(0.1, 20))
def test_jacobian_sinc2_random(amp, centre, scale):
    x = np.linspace(-2, 2, 41)
    prob = FitProblem("sinc2_detuning", x, np.ones_like(x), 0.01, {},
                      {"amplitude": amp, "center": centre, "scale": scale})
    assert jacobian_check(prob) < 1e-5


def test_sinc2_fit_recovers_width():
    x = np.linspace(924.0, 926.0, 81)
    rng = np.random.default_rng(4)
    y = sinc2_detuning(x, 1.0, 925.0, 7.36) + 0.01 * rng.standard_normal(x.size)
    r = fit(FitProblem("sinc2_detuning", x, y, 0.01))
    assert r.converged
    assert r.params["center"] == pytest.approx(925.0, abs=2e-3)
    assert r.derived()["fwhm"] == pytest.approx(2 * 1.3915573782515103 / 7.36, rel=0.01)


def test_reference_sweep_fit():
    cfg = paper_config()
    s = cfg.sweep
    r = fit(efficiency_sweep(cfg.chain, s.pump_min, s.pump_max, s.points, s.noise, s.seed))
    assert r.params["eta_max"] == pytest.approx(0.484, rel=0.02)
    assert r.derived()["optimal_pump_power"] == pytest.approx(0.285, rel=0.03)
    conv = cfg.chain.converter
    assert optimal_pump_power(conv.eta_n, conv.length) == pytest.approx(0.285, rel=1e-3)
    f, sf = r.band(np.linspace(0, 0.4, 11))
    assert np.all(sf >= 0) and np.all(np.isfinite(f))


def test_csv_in_json_out(tmp_path):
    prob = _noisy(0.03, 2)
    path = prob.to_csv(tmp_path / "d.csv")
    assert path.read_text().startswith("x,y,sigma\n")
    back = FitProblem.from_csv(path, "sin2_sqrt_power", dict(FIX_L))
    assert np.array_equal(back.y, prob.y)
    doc = json.loads(fit(back).to_json(tmp_path / "r.json"))
    assert doc["model"] == "sin2_sqrt_power"
    assert set(doc["errors"]) == {"eta_max", "eta_n"}
    assert json.loads((tmp_path / "r.json").read_text()) == doc


def test_csv_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError, match="x,y,sigma"):
        FitProblem.from_csv(p, "sin2_sqrt_power")
