"""Weighted nonlinear least squares for the converter efficiency curve and
the sinc^2 phase-matching line shape.

The solver is a damped Gauss-Newton (Levenberg-Marquardt) iteration with
analytic Jacobians.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .phasematch import SINC2_HALF_X

MAX_ITER = 200
XTOL = 1e-8
GTOL = 1e-10
SERIES_X = 1e-4


class RankDeficiencyError(ValueError):
    pass


class FitModel(str, Enum):
    SIN2_SQRT_POWER = "sin2_sqrt_power"
    SINC2_DETUNING = "sinc2_detuning"


PARAMS = {
    FitModel.SIN2_SQRT_POWER: ("eta_max", "eta_n", "length"),
    FitModel.SINC2_DETUNING: ("amplitude", "center", "scale"),
}


def _sinc(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < SERIES_X
    zs = np.where(small, 1.0, z)
    z2 = z * z
    return np.where(small, 1 - z2 / 6 + z2 * z2 / 120, np.sin(zs) / zs)


def _dsinc(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < SERIES_X
    zs = np.where(small, 1.0, z)
    series = -z / 3 + z**3 / 30
    return np.where(small, series, (np.cos(zs) - np.sin(zs) / zs) / zs)


def sin2_sqrt_power(P, eta_max, eta_n, length):
    """eta_max * sin^2(L sqrt(eta_n P)), P in W, eta_n in 1/(W cm^2), L in cm."""
    u = length * np.sqrt(np.clip(eta_n * np.asarray(P, float), 0, None))
    return eta_max * np.sin(u) ** 2


def sinc2_detuning(x, amplitude, center, scale):
    """amplitude * sinc^2(scale * (x - center)), sinc(z) = sin(z)/z."""
    return amplitude * _sinc(scale * (np.asarray(x, float) - center)) ** 2


def _jac_sin2(P, eta_max, eta_n, length):
    P = np.asarray(P, float)
    root = np.sqrt(np.clip(eta_n * P, 0, None))
    u = length * root
    s2u = np.sin(2 * u)
    return np.column_stack([
        np.sin(u) ** 2,
        eta_max * length**2 * P * _sinc(2 * u),
        eta_max * s2u * root,
    ])


def _jac_sinc2(x, amplitude, center, scale):
    dx = np.asarray(x, float) - center
    z = scale * dx
    s = _sinc(z)
    ds = _dsinc(z)
    return np.column_stack([s**2, -2 * amplitude * s * ds * scale, 2 * amplitude * s * ds * dx])


_FUNCS = {
    FitModel.SIN2_SQRT_POWER: (sin2_sqrt_power, _jac_sin2),
    FitModel.SINC2_DETUNING: (sinc2_detuning, _jac_sinc2),
}


def evaluate(model: FitModel | str, x, params) -> np.ndarray:
    return _FUNCS[FitModel(model)][0](x, *params)


def jacobian(model: FitModel | str, x, params) -> np.ndarray:
    return _FUNCS[FitModel(model)][1](x, *params)


@dataclass
class FitProblem:
    model: FitModel
    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray
    fixed: dict[str, float] = field(default_factory=dict)
    initial_guess: dict[str, float] | None = None

    def __post_init__(self):
        self.model = FitModel(self.model)
        self.x = np.asarray(self.x, float)
        self.y = np.asarray(self.y, float)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, float), self.x.shape).copy()
        if not (self.x.shape == self.y.shape and self.x.ndim == 1):
            raise ValueError("x, y and sigma must be 1-D and of equal length")
        unknown = set(self.fixed) - set(self.names)
        if unknown:
            raise ValueError(f"unknown fixed parameters: {sorted(unknown)}")
        if np.any(self.sigma <= 0) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("sigma must be positive and finite")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("data must be finite")
        if self.x.size < len(self.free) + 2:
            raise ValueError(f"need at least {len(self.free) + 2} points for "
                             f"{len(self.free)} free parameters, got {self.x.size}")
        if self.initial_guess is None:
            self.initial_guess = default_guess(self)
        missing = set(self.free) - set(self.initial_guess)
        if missing:
            raise ValueError(f"initial guess missing {sorted(missing)}")
        if not all(math.isfinite(self.initial_guess[n]) for n in self.free):
            raise ValueError("initial guess must be finite")

    @property
    def names(self) -> tuple[str, ...]:
        return PARAMS[self.model]

    @property
    def free(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n not in self.fixed)

    def full(self, theta) -> list[float]:
        it = iter(np.asarray(theta, float).tolist())
        return [self.fixed[n] if n in self.fixed else next(it) for n in self.names]

    def theta0(self) -> np.ndarray:
        return np.array([self.initial_guess[n] for n in self.free], float)

    def residuals(self, theta) -> np.ndarray:
        return (self.y - evaluate(self.model, self.x, self.full(theta))) / self.sigma

    def weighted_jacobian(self, theta) -> np.ndarray:
        J = jacobian(self.model, self.x, self.full(theta))
        cols = [i for i, n in enumerate(self.names) if n not in self.fixed]
        return J[:, cols] / self.sigma[:, None]

    @classmethod
    def from_csv(cls, path: str | os.PathLike, model: FitModel | str,
                 fixed: dict | None = None, initial_guess: dict | None = None) -> "FitProblem":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().replace(" ", "").split(",")
        if header != ["x", "y", "sigma"]:
            raise ValueError(f"{path}: expected header 'x,y,sigma', got {','.join(header)}")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(FitModel(model), data[:, 0], data[:, 1], data[:, 2], dict(fixed or {}),
                   initial_guess)

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("x,y,sigma\n")
            for row in zip(self.x.tolist(), self.y.tolist(), self.sigma.tolist()):
                fh.write("{!r},{!r},{!r}\n".format(*row))
        return path


def default_guess(problem: FitProblem) -> dict[str, float]:
    x, y = problem.x, problem.y
    i = int(np.argmax(y))
    if problem.model is FitModel.SIN2_SQRT_POWER:
        length = problem.fixed.get("length", 4.0)
        p_peak = x[i] if x[i] > 0 else float(np.max(x))
        return {"eta_max": float(max(y[i], 1e-3)), "length": length,
                "eta_n": float((math.pi / (2 * length)) ** 2 / p_peak)}
    above = x[y >= y[i] / 2]
    width = float(above.max() - above.min()) if above.size > 1 else float(np.ptp(x)) / 4
    return {"amplitude": float(y[i]), "center": float(x[i]),
            "scale": 2 * SINC2_HALF_X / max(width, 1e-12)}


@dataclass
class FitResult:
    model: FitModel
    names: tuple[str, ...]
    params: dict[str, float]
    errors: dict[str, float]
    fixed: dict[str, float]
    chi2: float
    dof: int
    converged: bool
    iterations: int
    grad_norm: float
    degenerate: bool = False
    covariance: np.ndarray | None = None
    message: str = ""

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else math.nan

    @property
    def free(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n not in self.fixed)

    def derived(self) -> dict[str, float]:
        """Optimal pump power (sin^2 model) or FWHM (sinc^2 model) with errors."""
        p = self.params
        if self.model is FitModel.SIN2_SQRT_POWER:
            if p["eta_n"] <= 0:
                return {}
            p_opt = (math.pi / (2 * p["length"])) ** 2 / p["eta_n"]
            grad = {"eta_n": -p_opt / p["eta_n"], "length": -2 * p_opt / p["length"]}
            return {"optimal_pump_power": p_opt,
                    "optimal_pump_power_err": self._propagate(grad)}
        w = 2 * SINC2_HALF_X / abs(p["scale"]) if p["scale"] else math.inf
        return {"fwhm": w, "fwhm_err": self._propagate({"scale": -w / p["scale"]})
                if p["scale"] else math.inf}

    def _propagate(self, grad: dict[str, float]) -> float:
        if self.covariance is None:
            return math.nan
        g = np.array([grad.get(n, 0.0) for n in self.free])
        var = float(g @ self.covariance @ g)
        return math.sqrt(var) if var >= 0 else math.nan

    def band(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Model curve and its 1-sigma band from the linearised covariance."""
        full = [self.params[n] for n in self.names]
        f = evaluate(self.model, x, full)
        J = jacobian(self.model, x, full)
        cols = [i for i, n in enumerate(self.names) if n not in self.fixed]
        J = J[:, cols]
        if self.covariance is None:
            return f, np.full_like(f, np.nan)
        var = np.einsum("ij,jk,ik->i", J, self.covariance, J)
        return f, np.sqrt(np.clip(var, 0, None))

    def as_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v
        return {
            "model": self.model.value,
            "params": self.params,
            "errors": {k: clean(v) for k, v in self.errors.items()},
            "fixed": self.fixed,
            "chi2": self.chi2,
            "dof": self.dof,
            "reduced_chi2": clean(self.reduced_chi2),
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "degenerate": self.degenerate,
            "derived": {k: clean(v) for k, v in self.derived().items()},
            "message": self.message,
        }

    def to_json(self, path: str | os.PathLike | None = None) -> str:
        text = json.dumps(self.as_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def fit(problem: FitProblem, max_iter: int = MAX_ITER, xtol: float = XTOL,
        gtol: float = GTOL) -> FitResult:
    """Minimise sum(((y - f(x; theta)) / sigma)^2) over the free parameters.

    A rank-deficient Jacobian at the starting point raises; one that only
    becomes singular at the solution is reported as ``degenerate`` with
    infinite errors on the unidentified directions.
    """
    theta = problem.theta0()
    n = theta.size
    r = problem.residuals(theta)
    J = problem.weighted_jacobian(theta)
    if np.linalg.matrix_rank(J) < n:
        raise RankDeficiencyError(
            f"Jacobian at the initial guess has rank {np.linalg.matrix_rank(J)} < {n}")
    chi2 = float(r @ r)
    A = J.T @ J
    g = J.T @ r
    lam = 1e-3 * float(np.max(np.diag(A)))
    converged = False
    it = 0
    msg = "iteration cap reached"
    while it < max_iter:
        if float(np.linalg.norm(g)) < gtol:
            converged, msg = True, "gradient below tolerance"
            break
        it += 1
        accepted = False
        while lam < 1e300:
            try:
                delta = np.linalg.solve(A + lam * np.eye(n), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = theta + delta
            r_t = problem.residuals(trial)
            chi2_t = float(r_t @ r_t)
            if np.isfinite(chi2_t) and chi2_t <= chi2:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged, msg = True, "no downhill step at machine precision"
            break
        lam = max(lam / 10, 1e-300)
        theta, r, chi2 = trial, r_t, chi2_t
        J = problem.weighted_jacobian(theta)
        A = J.T @ J
        g = J.T @ r
        scale = np.maximum(np.abs(theta), 1e-12)
        if float(np.max(np.abs(delta) / scale)) < xtol:
            converged, msg = True, "relative parameter change below tolerance"
            break

    dof = problem.x.size - n
    red = chi2 / dof if dof > 0 else math.nan
    svals = np.linalg.svd(J, compute_uv=False)
    degenerate = bool(svals[-1] <= 1e-8 * max(svals[0], 1e-300))
    if degenerate:
        cov = np.linalg.pinv(A) * red
        diag = np.diag(cov).copy()
        # directions the data cannot constrain get infinite errors
        _, _, vt = np.linalg.svd(J)
        null = vt[svals <= 1e-8 * max(svals[0], 1e-300)]
        weak = np.any(np.abs(null) > 1e-6, axis=0)
        diag[weak] = np.inf
        msg += "; normal matrix singular at solution"
    else:
        cov = np.linalg.inv(A) * red
        diag = np.diag(cov)
    full = problem.full(theta)
    params = dict(zip(problem.names, full))
    errors = {name: (float(math.sqrt(d)) if d >= 0 else math.nan)
              for name, d in zip(problem.free, diag)}
    return FitResult(problem.model, problem.names, params, errors, dict(problem.fixed),
                     chi2, dof, converged, it, float(np.linalg.norm(g)), degenerate, cov, msg)


def jacobian_check(problem: FitProblem, theta=None, rel_step: float = 1e-6) -> float:
    """Worst column-normalised deviation between analytic and central-difference
    Jacobians of the model at ``theta`` (free parameters; default initial guess)."""
    theta = problem.theta0() if theta is None else np.asarray(theta, float)
    Ja = jacobian(problem.model, problem.x, problem.full(theta))
    cols = [i for i, n in enumerate(problem.names) if n not in problem.fixed]
    Ja = Ja[:, cols]
    worst = 0.0
    for k in range(theta.size):
        h = rel_step * max(abs(theta[k]), 1.0)
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        fd = (evaluate(problem.model, problem.x, problem.full(up))
              - evaluate(problem.model, problem.x, problem.full(dn))) / (2 * h)
        norm = max(float(np.max(np.abs(Ja[:, k]))), float(np.max(np.abs(fd))))
        if norm == 0:
            continue
        worst = max(worst, float(np.max(np.abs(Ja[:, k] - fd))) / norm)
    return worst


def efficiency_sweep(chain, p_min: float, p_max: float, points: int, noise: float,
                     seed: int) -> FitProblem:
    """Synthetic end-to-end efficiency versus pump power (W) with relative
    Gaussian noise, ready to fit with the converter length pinned."""
    from .chain import end_to_end_efficiency

    if points < 5:
        raise ValueError("need at least 5 sweep points")
    P = np.linspace(p_min, p_max, points)
    truth = np.array([end_to_end_efficiency(chain.with_pump_power(p)) for p in P])
    rng = np.random.Generator(np.random.PCG64(seed))
    y = truth * (1 + noise * rng.standard_normal(points))
    sigma = noise * np.maximum(np.abs(y), 1e-3 * float(np.max(np.abs(y))))
    return FitProblem(FitModel.SIN2_SQRT_POWER, P, y, sigma,
                      fixed={"length": chain.converter.length})
