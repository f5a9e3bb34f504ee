from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfctwin.phasematch import (
    Axis,
    BracketError,
    DispersionModel,
    DispersionRangeError,
    EnergyMatchError,
    PhaseMatchSpec,
    SINC2_HALF_X,
    SolverError,
    TuningCurve,
    analytic_fwhm,
    calibrate_model,
    conversion_spectrum,
    delta_k,
    energy_match,
    fwhm,
    refractive_index,
    solve_poling_period,
    solve_temperature,
    solved_spec,
)


def hand_index(lam_nm: float, t: float) -> float:
    # congruent LiNbO3 extraordinary index, Jundt 1997, evaluated longhand
    f = (t - 24.5) * (t + 570.82)
    L = lam_nm / 1000.0
    n2 = (5.35583 + 4.629e-7 * f
          + (0.100473 + 3.862e-8 * f) / (L**2 - (0.20692 - 0.89e-8 * f) ** 2)
          + (100 + 2.657e-5 * f) / (L**2 - 11.34927**2)
          - 1.5334e-2 * L**2)
    return math.sqrt(n2)


@pytest.fixture(scope="module")
def calibrated():
    return calibrate_model()


def test_index_telecom_matches_hand_evaluation():
    n = refractive_index(1560.0, 25.0)
    assert 2.10 <= n <= 2.16
    assert n == pytest.approx(hand_index(1560.0, 25.0), abs=1e-12)


def test_index_offset_is_additive():
    base = refractive_index(925.7, 43.4)
    shifted = refractive_index(925.7, 43.4, DispersionModel(effective_index_offset=0.1))
    assert shifted == pytest.approx(base + 0.1, abs=1e-14)


def test_index_normal_dispersion_order():
    n = [refractive_index(lam, 43.4) for lam in (925.7, 1560.0, 2272.0)]
    assert n[0] > n[1] > n[2]


def test_index_range_error_names_window():
    with pytest.raises(DispersionRangeError, match="400"):
        refractive_index(300.0, 25.0)
    with pytest.raises(DispersionRangeError):
        refractive_index(4500.0, 25.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(400, 4000), st.floats(20, 200))
def test_index_above_one(lam, t):
    assert refractive_index(lam, t) > 1


@settings(max_examples=100, deadline=None)
@given(st.floats(900, 2399), st.floats(0.01, 1.0), st.floats(20, 200))
def test_index_decreasing_in_wavelength(lam, dl, t):
    assert refractive_index(lam + dl, t) < refractive_index(lam, t)


def test_energy_match_examples():
    assert energy_match(925.7, 2272.0, "conv") == pytest.approx(1 / (1 / 925.7 - 1 / 2272.0))
    assert energy_match(925.7, 2272.0, "conv") == pytest.approx(1562.2, abs=0.05)
    assert energy_match(925.7, 1560.0, "pump") == pytest.approx(2276.7, abs=0.05)


def test_energy_match_degenerate():
    with pytest.raises(EnergyMatchError):
        energy_match(925.7, 925.7, "conv")
    with pytest.raises(EnergyMatchError):
        energy_match(1560.0, 925.7, "conv")


def test_spec_rejects_energy_violation():
    with pytest.raises(EnergyMatchError):
        PhaseMatchSpec(925.7, 2272.0, 1560.0, 25.45, 43.4)


@settings(max_examples=100, deadline=None)
@given(st.floats(700, 1100), st.floats(1300, 1700))
def test_energy_closure(sig, conv):
    spec = PhaseMatchSpec.from_signal_conv(sig, conv, 25.0, 40.0)
    assert abs(1 / spec.lambda_sig - 1 / spec.lambda_pump - 1 / spec.lambda_conv) < 1e-9


def test_bulk_period_within_five_percent():
    period = solve_poling_period(925.7, 2276.7, 43.4)
    assert abs(period / 25.45 - 1) < 0.05


def test_bulk_period_matches_scan_oracle():
    # oracle: linear scan over [20, 30] um and locate the sign change
    grid = np.linspace(20, 30, 10001)
    dk = [delta_k(PhaseMatchSpec.from_signal_pump(925.7, 2276.7, p, 43.4)) for p in grid[::50]]
    i = int(np.flatnonzero(np.diff(np.sign(dk)))[0])
    lo, hi = grid[::50][i], grid[::50][i + 1]
    assert lo <= solve_poling_period(925.7, 2276.7, 43.4) <= hi


def test_solved_spec_is_fixed_point():
    spec = solved_spec(925.7, 1560.0, 43.4)
    assert abs(delta_k(spec)) < 1e-3
    detuned = PhaseMatchSpec(spec.lambda_sig, spec.lambda_pump, spec.lambda_conv,
                             spec.poling_period, spec.temperature + 10)
    assert abs(delta_k(detuned)) > 1.0


def test_delta_k_changes_sign_across_solved_temperature(calibrated):
    pump = energy_match(925.0, 1560.0, "pump")
    t0 = solve_temperature(925.0, pump, 25.45, calibrated)
    below = PhaseMatchSpec(925.0, pump, 1560.0, 25.45, t0 - 0.5)
    above = PhaseMatchSpec(925.0, pump, 1560.0, 25.45, t0 + 0.5)
    assert np.sign(delta_k(below, calibrated)) != np.sign(delta_k(above, calibrated))


def test_no_period_root_raises():
    with pytest.raises(SolverError, match="poling-period"):
        solve_poling_period(925.7, 2276.7, 43.4, period_range=(5.0, 10.0))


def test_calibrated_model_hits_device_period(calibrated):
    pump = energy_match(925.0, 1560.0, "pump")
    assert solve_poling_period(925.0, pump, 43.4, calibrated) == pytest.approx(25.45, abs=1e-6)
    again = calibrate_model(base=calibrated)
    assert again.confinement == pytest.approx(calibrated.confinement, rel=1e-9)


def test_calibrated_width_near_device_geometry(calibrated):
    # box-waveguide equivalent width should be of the order of the 12 um core
    assert 8 < calibrated.equivalent_width_um < 20


def test_calibrated_temperature(calibrated):
    pump = energy_match(925.0, 1560.0, "pump")
    assert solve_temperature(925.0, pump, 25.45, calibrated) == pytest.approx(43.4, abs=2.0)


def test_period_monotone_in_temperature():
    periods = [solve_poling_period(925.7, 2276.7, t) for t in np.arange(30, 91, 5)]
    d = np.diff(periods)
    assert np.all(d > 0) or np.all(d < 0)


@settings(max_examples=15, deadline=None)
@given(st.floats(25, 150))
def test_period_temperature_round_trip(t0):
    period = solve_poling_period(925.7, 2276.7, t0)
    assert solve_temperature(925.7, 2276.7, period) == pytest.approx(t0, abs=0.01)


@pytest.mark.xfail(strict=True, reason="bulk thermo-optic slope is ~2x the device's; see notes")
def test_fig2_temperature_span(calibrated):
    temps = []
    for sig in (920.0, 930.0):
        pump = energy_match(sig, 1560.0, "pump")
        temps.append(solve_temperature(sig, pump, 25.45, calibrated,
                                       temperature_range=(-60.0, 200.0), near=43.4))
    assert temps[0] == pytest.approx(33.0, abs=10)
    assert temps[1] == pytest.approx(82.5, abs=10)


def _device_spec(L=4.0):
    return PhaseMatchSpec.from_signal_conv(925.0, 1560.0, 25.45, 43.4, crystal_length=L)


def test_spectrum_peaks_at_one(calibrated):
    curve = conversion_spectrum(_device_spec(), calibrated, "signal_wavelength", (924, 926), 401)
    assert curve.relative_efficiency[200] == pytest.approx(1.0, abs=1e-9)
    assert curve.relative_efficiency.max() <= 1.0


def test_spectrum_min_samples(calibrated):
    with pytest.raises(ValueError, match="16"):
        conversion_spectrum(_device_spec(), calibrated, "temperature", None, 3)


def test_spectrum_unbracketed_warns(calibrated):
    curve = conversion_spectrum(_device_spec(), calibrated, "signal_wavelength", (926, 930), 101)
    assert curve.fwhm is None
    assert curve.warning


def test_signal_fwhm_band_and_analytic(calibrated):
    spec = _device_spec()
    curve = conversion_spectrum(spec, calibrated, Axis.SIGNAL_WAVELENGTH, (924, 926), 2001)
    assert 0.2 <= curve.fwhm <= 0.8
    assert curve.fwhm == pytest.approx(analytic_fwhm(spec, calibrated), rel=0.01)


# the pump axis sits near group-velocity matching (dk quadratic), so 1/L
# scaling does not hold there
@pytest.mark.parametrize("axis,half", [("signal_wavelength", 1.0), ("temperature", 12.0)])
def test_fwhm_times_length_constant(calibrated, axis, half):
    products = []
    for L in (2.0, 4.0, 8.0):
        spec = _device_spec(L)
        centre = {"signal_wavelength": 925.0, "temperature": 43.4}[axis]
        w = half * 4.0 / L
        curve = conversion_spectrum(spec, calibrated, axis, (centre - w, centre + w), 4001)
        products.append(curve.fwhm * L)
    assert max(products) / min(products) - 1 < 0.01


def test_fwhm_triangle():
    x = np.linspace(-1, 1, 201)
    c = TuningCurve(Axis.TEMPERATURE, x, 1 - np.abs(x))
    assert fwhm(c) == pytest.approx(1.0, abs=1e-12)


def test_fwhm_flat_raises():
    x = np.linspace(0, 1, 50)
    with pytest.raises(BracketError):
        fwhm(TuningCurve(Axis.TEMPERATURE, x, np.ones_like(x)))


def test_fwhm_dense_sinc2_ignores_side_lobes():
    slope = 3.0
    x = np.linspace(-10, 10, 20001)
    y = np.sinc(slope * x / np.pi) ** 2
    assert fwhm(TuningCurve(Axis.TEMPERATURE, x, y)) == pytest.approx(
        2 * SINC2_HALF_X / slope, rel=0.01)


def test_curve_csv_round_trip(tmp_path, calibrated):
    curve = conversion_spectrum(_device_spec(), calibrated, "temperature", None, 64)
    path = curve.to_csv(tmp_path / "c.csv")
    raw = path.read_bytes()
    assert raw.startswith(b"x,relative_efficiency\n") and b"\r" not in raw
    back = TuningCurve.from_csv(path)
    assert back.axis is Axis.TEMPERATURE
    assert np.allclose(back.x, curve.x, rtol=1e-9)
    assert back.fwhm == curve.fwhm
