"""Quasi-phase-matching of difference-frequency generation in PPLN.

Wavelengths are in nm, temperatures in degC, poling periods in um, crystal
lengths in cm and wavevector mismatch in rad/m.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

# Jundt, Opt. Lett. 22, 1553 (1997): extraordinary index of congruent LiNbO3.
# (a1..a6, b1..b4); wavelength in um, f = (T - 24.5)(T + 570.82).
JUNDT_1997 = (
    5.35583, 0.100473, 0.20692, 100.0, 11.34927, 1.5334e-2,
    4.629e-7, 3.862e-8, -0.89e-8, 2.657e-5,
)

VALID_NM = (400.0, 4000.0)
PERIOD_RANGE_UM = (5.0, 50.0)
TEMPERATURE_RANGE_C = (20.0, 200.0)
PERIOD_SCAN_STEP_UM = 0.5
TEMPERATURE_SCAN_STEP_C = 2.0
DK_TOL = 1e-3  # rad/m
ENERGY_TOL = 1e-9  # 1/nm

# sinc^2(x) = 1/2 at x = 1.39156; FWHM in dk is 4 * 1.39156 / L.
SINC2_HALF_X = 1.3915573782515103


class DispersionRangeError(ValueError):
    pass


class EnergyMatchError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


class BracketError(ValueError):
    pass


@dataclass(frozen=True)
class DispersionModel:
    """Extraordinary-index Sellmeier model plus waveguide corrections.

    ``confinement`` (um^-2) applies a box-waveguide geometric correction
    n_eff^2 = n^2 - confinement * lambda^2; a square core of width w gives
    confinement = 1 / (2 w^2). ``effective_index_offset`` is added last. A
    uniform offset cancels out of the wavevector mismatch, so only
    ``confinement`` moves the phase-matching point.
    """

    sellmeier_coefficients: tuple[float, ...] = JUNDT_1997
    effective_index_offset: float = 0.0
    confinement: float = 0.0

    def __post_init__(self):
        if len(self.sellmeier_coefficients) != 10:
            raise ValueError("expected 10 Sellmeier coefficients (a1..a6, b1..b4)")
        if not all(math.isfinite(c) for c in self.sellmeier_coefficients):
            raise ValueError("Sellmeier coefficients must be finite")

    @property
    def equivalent_width_um(self) -> float | None:
        if self.confinement <= 0:
            return None
        return math.sqrt(1.0 / (2.0 * self.confinement))


def _sellmeier_n2(coeffs, lam_um, temperature):
    a1, a2, a3, a4, a5, a6, b1, b2, b3, b4 = coeffs
    f = (temperature - 24.5) * (temperature + 570.82)
    lam2 = lam_um * lam_um
    return (a1 + b1 * f
            + (a2 + b2 * f) / (lam2 - (a3 + b3 * f) ** 2)
            + (a4 + b4 * f) / (lam2 - a5 * a5)
            - a6 * lam2)


def refractive_index(lambda_nm, temperature: float, model: DispersionModel | None = None):
    """Effective extraordinary index at ``lambda_nm`` (scalar or array)."""
    model = model or DispersionModel()
    lam = np.asarray(lambda_nm, dtype=float)
    if np.any(~np.isfinite(lam)) or np.any(lam < VALID_NM[0]) or np.any(lam > VALID_NM[1]):
        raise DispersionRangeError(
            f"wavelength {lambda_nm} nm outside valid window "
            f"[{VALID_NM[0]:g}, {VALID_NM[1]:g}] nm"
        )
    lam_um = lam * 1e-3
    n2 = _sellmeier_n2(model.sellmeier_coefficients, lam_um, temperature)
    n2 = n2 - model.confinement * lam_um * lam_um
    n = np.sqrt(n2) + model.effective_index_offset
    return float(n) if n.ndim == 0 else n


class SolveFor(str, Enum):
    CONV = "conv"
    PUMP = "pump"


def energy_match(lambda_a: float, lambda_b: float, solve_for: str | SolveFor = "conv") -> float:
    """Third wavelength of 1/sig - 1/pump = 1/conv.

    ``solve_for="conv"``: (signal, pump) -> converted.
    ``solve_for="pump"``: (signal, converted) -> pump.
    """
    solve_for = SolveFor(solve_for)
    if lambda_a <= 0 or lambda_b <= 0:
        raise EnergyMatchError("wavelengths must be positive")
    inv = 1.0 / lambda_a - 1.0 / lambda_b
    if inv <= 0:
        raise EnergyMatchError(
            f"non-physical combination {lambda_a} nm, {lambda_b} nm: "
            "signal must be shorter than the other wavelength"
        )
    return 1.0 / inv


@dataclass(frozen=True)
class PhaseMatchSpec:
    lambda_sig: float
    lambda_pump: float
    lambda_conv: float
    poling_period: float
    temperature: float
    crystal_length: float = 4.0
    qpm_order: int = 1

    def __post_init__(self):
        if self.crystal_length <= 0:
            raise ValueError("crystal_length must be positive")
        if self.poling_period <= 0:
            raise ValueError("poling_period must be positive")
        if self.qpm_order == 0:
            raise ValueError("qpm_order must be non-zero")
        mismatch = 1 / self.lambda_sig - 1 / self.lambda_pump - 1 / self.lambda_conv
        if abs(mismatch) >= ENERGY_TOL:
            raise EnergyMatchError(f"energy conservation violated by {mismatch:.3e} 1/nm")

    @classmethod
    def from_signal_pump(cls, lambda_sig, lambda_pump, poling_period, temperature,
                         crystal_length=4.0, qpm_order=1) -> "PhaseMatchSpec":
        conv = energy_match(lambda_sig, lambda_pump, "conv")
        return cls(lambda_sig, lambda_pump, conv, poling_period, temperature,
                   crystal_length, qpm_order)

    @classmethod
    def from_signal_conv(cls, lambda_sig, lambda_conv, poling_period, temperature,
                         crystal_length=4.0, qpm_order=1) -> "PhaseMatchSpec":
        pump = energy_match(lambda_sig, lambda_conv, "pump")
        return cls(lambda_sig, pump, lambda_conv, poling_period, temperature,
                   crystal_length, qpm_order)


def _k(lambda_nm, temperature, model):
    return 2 * np.pi * refractive_index(lambda_nm, temperature, model) / (np.asarray(lambda_nm) * 1e-9)


def _material_mismatch(lambda_sig, lambda_pump, temperature, model):
    lambda_conv = 1.0 / (1.0 / np.asarray(lambda_sig, dtype=float) - 1.0 / np.asarray(lambda_pump, dtype=float))
    return (_k(lambda_sig, temperature, model) - _k(lambda_pump, temperature, model)
            - _k(lambda_conv, temperature, model))


def _grating(poling_period_um, qpm_order):
    return qpm_order * 2 * np.pi / (poling_period_um * 1e-6)


def delta_k(spec: PhaseMatchSpec, model: DispersionModel | None = None) -> float:
    """Wavevector mismatch k_sig - k_pump - k_conv - m 2pi/Lambda in rad/m.

    For DFG in a normally dispersive crystal k_sig exceeds k_pump + k_conv,
    so a positive QPM order subtracts the grating vector.
    """
    model = model or DispersionModel()
    mat = (_k(spec.lambda_sig, spec.temperature, model)
           - _k(spec.lambda_pump, spec.temperature, model)
           - _k(spec.lambda_conv, spec.temperature, model))
    return float(mat - _grating(spec.poling_period, spec.qpm_order))


def _scan_and_bisect(fn: Callable[[float], float], lo: float, hi: float, step: float,
                     what: str, prefer: float | None = None) -> float:
    grid = np.arange(lo, hi + 0.5 * step, step)
    grid[-1] = min(grid[-1], hi)
    vals = np.array([fn(x) for x in grid])
    brackets = [i for i in range(len(grid) - 1)
                if vals[i] == 0 or np.sign(vals[i]) != np.sign(vals[i + 1])]
    if not brackets:
        raise SolverError(
            f"no {what} root in [{lo:g}, {hi:g}]: mismatch runs from "
            f"{vals[0]:.4g} to {vals[-1]:.4g} rad/m"
        )
    if prefer is not None:
        i = min(brackets, key=lambda j: abs(0.5 * (grid[j] + grid[j + 1]) - prefer))
    else:
        i = brackets[0]
    a, b = float(grid[i]), float(grid[i + 1])
    fa = vals[i]
    if fa == 0:
        return a
    for _ in range(200):
        m = 0.5 * (a + b)
        fm = fn(m)
        if abs(fm) < DK_TOL * 1e-2 or b - a < 1e-15 * max(1.0, abs(m)):
            return m
        if np.sign(fm) == np.sign(fa):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def solve_poling_period(lambda_sig: float, lambda_pump: float, temperature: float,
                        model: DispersionModel | None = None, qpm_order: int = 1,
                        period_range: tuple[float, float] = PERIOD_RANGE_UM) -> float:
    """Poling period (um) that phase-matches the given signal and pump."""
    model = model or DispersionModel()
    energy_match(lambda_sig, lambda_pump, "conv")
    mat = float(_material_mismatch(lambda_sig, lambda_pump, temperature, model))
    fn = lambda period: mat - _grating(period, qpm_order)  # noqa: E731
    return _scan_and_bisect(fn, *period_range, PERIOD_SCAN_STEP_UM, "poling-period")


def solve_temperature(lambda_sig: float, lambda_pump: float, poling_period: float,
                      model: DispersionModel | None = None, qpm_order: int = 1,
                      temperature_range: tuple[float, float] = TEMPERATURE_RANGE_C,
                      near: float | None = None) -> float:
    """Crystal temperature (degC) that phase-matches the given wavelengths."""
    model = model or DispersionModel()
    energy_match(lambda_sig, lambda_pump, "conv")
    g = _grating(poling_period, qpm_order)
    fn = lambda t: float(_material_mismatch(lambda_sig, lambda_pump, t, model)) - g  # noqa: E731
    return _scan_and_bisect(fn, *temperature_range, TEMPERATURE_SCAN_STEP_C,
                            "temperature", prefer=near)


def calibrate_model(target_period: float = 25.45, lambda_sig: float = 925.0,
                    lambda_conv: float = 1560.0, temperature: float = 43.4,
                    base: DispersionModel | None = None) -> DispersionModel:
    """Fit ``confinement`` so the model phase-matches at ``target_period``."""
    base = base or DispersionModel()
    pump = energy_match(lambda_sig, lambda_conv, "pump")

    def period_error(c):
        m = replace(base, confinement=c)
        mat = float(_material_mismatch(lambda_sig, pump, temperature, m))
        return 2 * np.pi / mat * 1e6 - target_period

    lo, hi = -0.02, 0.05
    flo, fhi = period_error(lo), period_error(hi)
    if np.sign(flo) == np.sign(fhi):
        raise SolverError(
            f"cannot reach {target_period} um with confinement in [{lo}, {hi}] um^-2 "
            f"(periods {flo + target_period:.3f}..{fhi + target_period:.3f} um)"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = period_error(mid)
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < 1e-16:
            break
    return replace(base, confinement=0.5 * (lo + hi))


class Axis(str, Enum):
    TEMPERATURE = "temperature"
    SIGNAL_WAVELENGTH = "signal_wavelength"
    PUMP_WAVELENGTH = "pump_wavelength"


AXIS_UNITS = {Axis.TEMPERATURE: "degC", Axis.SIGNAL_WAVELENGTH: "nm",
              Axis.PUMP_WAVELENGTH: "nm"}


@dataclass
class TuningCurve:
    axis: Axis
    x: np.ndarray
    relative_efficiency: np.ndarray
    fwhm: float | None = None
    warning: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def samples(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.relative_efficiency.tolist()))

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        lines = ["x,relative_efficiency"]
        lines += [f"{x:.10g},{y:.10g}" for x, y in self.samples]
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
        side = path.with_suffix(".json")
        side.write_text(json.dumps({
            "axis": self.axis.value,
            "unit": AXIS_UNITS[self.axis],
            "fwhm": self.fwhm,
            "warning": self.warning,
            **self.metadata,
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "TuningCurve":
        path = Path(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        axis = Axis(meta.pop("axis"))
        meta.pop("unit", None)
        return cls(axis, data[:, 0], data[:, 1], fwhm=meta.pop("fwhm"),
                   warning=meta.pop("warning"), metadata=meta)


def sinc(x):
    x = np.asarray(x, dtype=float)
    return np.sinc(x / np.pi)


def conversion_spectrum(spec: PhaseMatchSpec, model: DispersionModel | None = None,
                        axis: str | Axis = Axis.TEMPERATURE,
                        x_range: Sequence[float] | None = None,
                        n_samples: int = 401) -> TuningCurve:
    """Relative conversion efficiency sinc^2(dk L / 2) along one tuning axis.

    Sweeping the signal holds the pump fixed (and vice versa); the converted
    wavelength follows energy conservation.
    """
    model = model or DispersionModel()
    axis = Axis(axis)
    if n_samples < 16:
        raise ValueError(f"n_samples must be at least 16, got {n_samples}")
    if x_range is None:
        centre = {Axis.TEMPERATURE: spec.temperature,
                  Axis.SIGNAL_WAVELENGTH: spec.lambda_sig,
                  Axis.PUMP_WAVELENGTH: spec.lambda_pump}[axis]
        half = {Axis.TEMPERATURE: 10.0, Axis.SIGNAL_WAVELENGTH: 1.0,
                Axis.PUMP_WAVELENGTH: 5.0}[axis]
        x_range = (centre - half, centre + half)
    lo, hi = float(x_range[0]), float(x_range[1])
    if not hi > lo:
        raise ValueError("range must be increasing")
    x = np.linspace(lo, hi, n_samples)
    grating = _grating(spec.poling_period, spec.qpm_order)
    if axis is Axis.TEMPERATURE:
        dk = np.array([_material_mismatch(spec.lambda_sig, spec.lambda_pump, t, model)
                       for t in x]) - grating
    elif axis is Axis.SIGNAL_WAVELENGTH:
        dk = _material_mismatch(x, spec.lambda_pump, spec.temperature, model) - grating
    else:
        dk = _material_mismatch(spec.lambda_sig, x, spec.temperature, model) - grating
    L = spec.crystal_length * 1e-2
    y = sinc(dk * L / 2) ** 2
    curve = TuningCurve(axis, x, y, metadata={
        "crystal_length_cm": spec.crystal_length,
        "poling_period_um": spec.poling_period,
        "temperature_c": spec.temperature,
        "lambda_sig_nm": spec.lambda_sig,
        "lambda_pump_nm": spec.lambda_pump,
        "lambda_conv_nm": spec.lambda_conv,
        "n_samples": n_samples,
    })
    try:
        curve.fwhm = fwhm(curve)
    except BracketError as exc:
        curve.warning = f"range does not bracket the central lobe: {exc}"
    return curve


def fwhm(curve: TuningCurve) -> float:
    """Full width at half maximum of the central lobe.

    Walks outward from the global peak to the first half-level crossing on
    each side and interpolates linearly, so side lobes are never included.
    """
    x = np.asarray(curve.x, dtype=float)
    y = np.asarray(curve.relative_efficiency, dtype=float)
    i = int(np.argmax(y))
    if i == 0 or i == len(y) - 1:
        raise BracketError("peak sits on the edge of the sampled range")
    half = 0.5 * y[i]
    if not half > 0:
        raise BracketError("curve has no positive peak")
    j = i
    while j > 0 and y[j - 1] >= half:
        j -= 1
    if j == 0:
        raise BracketError("half level never crossed below the peak")
    left = x[j - 1] + (half - y[j - 1]) * (x[j] - x[j - 1]) / (y[j] - y[j - 1])
    k = i
    while k < len(y) - 1 and y[k + 1] >= half:
        k += 1
    if k == len(y) - 1:
        raise BracketError("half level never crossed above the peak")
    right = x[k] + (half - y[k]) * (x[k + 1] - x[k]) / (y[k + 1] - y[k])
    return float(right - left)


def mismatch_slope(spec: PhaseMatchSpec, model: DispersionModel | None = None,
                   axis: str | Axis = Axis.SIGNAL_WAVELENGTH, step: float | None = None) -> float:
    """d(dk)/dx along ``axis`` by central differences (rad/m per axis unit)."""
    model = model or DispersionModel()
    axis = Axis(axis)
    if axis is Axis.TEMPERATURE:
        h = step or 1e-2
        f = lambda v: _material_mismatch(spec.lambda_sig, spec.lambda_pump, v, model)  # noqa: E731
        x0 = spec.temperature
    elif axis is Axis.SIGNAL_WAVELENGTH:
        h = step or 1e-3
        f = lambda v: _material_mismatch(v, spec.lambda_pump, spec.temperature, model)  # noqa: E731
        x0 = spec.lambda_sig
    else:
        h = step or 1e-3
        f = lambda v: _material_mismatch(spec.lambda_sig, v, spec.temperature, model)  # noqa: E731
        x0 = spec.lambda_pump
    return float((f(x0 + h) - f(x0 - h)) / (2 * h))


def analytic_fwhm(spec: PhaseMatchSpec, model: DispersionModel | None = None,
                  axis: str | Axis = Axis.SIGNAL_WAVELENGTH) -> float:
    """Small-detuning FWHM 4 x_half / (L |d dk/dx|)."""
    L = spec.crystal_length * 1e-2
    return 4 * SINC2_HALF_X / (L * abs(mismatch_slope(spec, model, axis)))


def solved_spec(lambda_sig: float, lambda_conv: float, temperature: float,
                model: DispersionModel | None = None, crystal_length: float = 4.0,
                qpm_order: int = 1) -> PhaseMatchSpec:
    """Phase-matched spec with the poling period solved at ``temperature``."""
    pump = energy_match(lambda_sig, lambda_conv, "pump")
    period = solve_poling_period(lambda_sig, pump, temperature, model, qpm_order)
    return PhaseMatchSpec(lambda_sig, pump, 1.0 / (1.0 / lambda_sig - 1.0 / pump),
                          period, temperature, crystal_length, qpm_order)
