"""Command-line entry point: ``qfctwin <command> [config] [options]``.

Every command writes into a run directory (``--out``) holding its CSV/JSON
products and a ``manifest.json`` with file hashes. Exit codes: 0 success,
1 configuration, 2 solver, 3 simulation I/O, 4 analysis input.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ChainModel, end_to_end_efficiency, predict_rates, predict_snr
from .config import ConfigError, RunConfig, load_config
from .correlator import (
    CoincidenceHistogram,
    UnsortedTagsError,
    corrected_indistinguishability,
    cross_correlate,
    g2_zero,
    histogram_file,
    hom_visibility,
    integrate_peaks,
    PeakWindowError,
    period_warning,
    snr_from_counts,
)
from .fitting import FitModel, FitProblem, RankDeficiencyError, efficiency_sweep, fit
from .montecarlo import SimRun, default_threads, simulate
from .phasematch import (
    Axis,
    BracketError,
    DispersionRangeError,
    EnergyMatchError,
    PhaseMatchSpec,
    SolverError,
    TEMPERATURE_RANGE_C,
    conversion_spectrum,
    energy_match,
    solve_poling_period,
    solve_temperature,
)
from .tagstore import (
    TagCorruptionError,
    TagFormatError,
    TagOrderError,
    channel_timestamps,
    read_sidecar,
    sidecar_path,
)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_SIM_IO, EXIT_ANALYSIS = 0, 1, 2, 3, 4

SETUPS = {"hbt": ("hbt", "co"), "hom-co": ("umzi_hom", "co"), "hom-cross": ("umzi_hom", "cross")}
SNR_DEFINITION = "(rate_in - rate_out) / rate_out"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_CONFIG, message)


# --- helpers ------------------------------------------------------------------

def _dump(obj) -> str:
    def clean(o):
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating, float)):
            o = float(o)
            return o if math.isfinite(o) else str(o)
        if hasattr(o, "value") and not isinstance(o, (int, str)):
            return o.value
        return o
    return json.dumps(clean(obj), indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> Path:
    path.write_text(_dump(obj), encoding="utf-8")
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _manifest(out: Path, command: str, args: argparse.Namespace) -> Path:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    arguments = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
                 if k not in ("threads", "func", "out")}
    return _write_json(out / "manifest.json", {
        "command": command,
        "version": __version__,
        "arguments": arguments,
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    })


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_SIM_IO, f"cannot create run directory {out}: {exc}") from exc
    return out


def _config(path, required: bool = True) -> RunConfig:
    if path is None and not os.environ.get("QFC_CONFIG") and not required:
        return RunConfig()
    return load_config(path)


def _threads(args) -> int:
    t = args.threads if args.threads is not None else default_threads()
    if t < 1:
        raise CliError(EXIT_CONFIG, "--threads must be >= 1")
    return t


def _base_spec(cfg: RunConfig) -> PhaseMatchSpec:
    pm = cfg.phasematch
    return PhaseMatchSpec.from_signal_conv(pm.lambda_sig, pm.lambda_conv, pm.poling_period,
                                           pm.temperature, pm.crystal_length, pm.qpm_order)


# --- phasematch ---------------------------------------------------------------

def phasematch_products(cfg: RunConfig, out: Path, axis: str, x_range=None,
                        samples: int | None = None, centers=None,
                        temperature_range=TEMPERATURE_RANGE_C) -> dict:
    model = cfg.dispersion
    samples = samples or cfg.phasematch.samples
    if samples < 16:
        raise ValueError(f"--samples must be at least 16 (minimum sample count), got {samples}")
    spec = _base_spec(cfg)
    result = {
        "axis": axis,
        "lambda_sig_nm": spec.lambda_sig,
        "lambda_pump_nm": spec.lambda_pump,
        "lambda_conv_nm": spec.lambda_conv,
        "solved_poling_period_um": solve_poling_period(
            spec.lambda_sig, spec.lambda_pump, spec.temperature, model, spec.qpm_order),
        "solved_temperature_c": solve_temperature(
            spec.lambda_sig, spec.lambda_pump, spec.poling_period, model, spec.qpm_order,
            temperature_range=temperature_range, near=spec.temperature),
        "curves": [],
    }
    specs = [("curve", spec)]
    for c in centers or []:
        # pump tracks the signal so the converted line stays at lambda_conv
        pump = energy_match(c, cfg.phasematch.lambda_conv, "pump")
        t = solve_temperature(c, pump, spec.poling_period, model, spec.qpm_order,
                              temperature_range=temperature_range, near=spec.temperature)
        specs.append((f"curve_{c:g}nm", replace(spec, lambda_sig=c, lambda_pump=pump,
                                                 lambda_conv=cfg.phasematch.lambda_conv,
                                                 temperature=t)))
    for name, s in specs:
        curve = conversion_spectrum(s, model, axis, x_range, samples)
        curve.to_csv(out / f"{name}.csv")
        entry = {"file": f"{name}.csv", "lambda_sig_nm": s.lambda_sig,
                 "temperature_c": s.temperature, "fwhm": curve.fwhm,
                 "peak_x": float(curve.x[int(np.argmax(curve.relative_efficiency))])}
        if curve.warning:
            entry["warning"] = curve.warning
        lo, hi = TEMPERATURE_RANGE_C
        if not lo <= s.temperature <= hi:
            entry["warning"] = (entry.get("warning", "") +
                                f" temperature {s.temperature:.1f} C outside the Sellmeier fit range").strip()
        result["curves"].append(entry)
    return result


def cmd_phasematch(args) -> int:
    cfg = _config(args.config)
    out = _out_dir(args, "run_phasematch")
    res = phasematch_products(cfg, out, args.axis, args.range, args.samples, args.centers,
                              tuple(args.temperature_range) if args.temperature_range
                              else TEMPERATURE_RANGE_C)
    res["config"] = cfg.to_dict()
    _write_json(out / "results.json", res)
    _manifest(out, "phasematch", args)
    print(f"solved period {res['solved_poling_period_um']:.4f} um, "
          f"solved temperature {res['solved_temperature_c']:.2f} C")
    for c in res["curves"]:
        fw = "n/a" if c["fwhm"] is None else f"{c['fwhm']:.4g}"
        print(f"  {c['file']}: peak at {c['peak_x']:.4g}, fwhm {fw}  {c.get('warning', '')}")
    return EXIT_OK


# --- simulate -----------------------------------------------------------------

def build_run(cfg: RunConfig, setup: str, arm: str, pulses: int | None = None,
              seed: int | None = None, detuned: bool = False) -> SimRun:
    if setup not in SETUPS:
        raise ValueError(f"unknown setup {setup!r}; choose from {sorted(SETUPS)}")
    kind, pol = SETUPS[setup]
    chain: ChainModel | None = cfg.chain_for(arm)
    if detuned:
        if chain is None:
            raise ValueError(f"arm {arm!r} has no conversion chain to detune")
        chain = chain.with_stage(chain.converter.name, eta_max=0.0)
    pulses = cfg.simulation.pulses if pulses is None else pulses
    if pulses < 1:
        raise ValueError(f"--pulses must be >= 1, got {pulses}")
    return SimRun(cfg.simulation.seed if seed is None else seed, pulses, cfg.emitter,
                  cfg.setup_for(arm, kind, pol), chain, cfg.simulation.block_size)


def run_simulation(run: SimRun, path: Path, threads: int, **meta) -> dict:
    try:
        return simulate(run, path, threads, extra_meta=meta)
    except OSError as exc:
        raise CliError(EXIT_SIM_IO, f"writing {path}: {exc}") from exc


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    run = build_run(cfg, args.setup, args.arm, args.pulses, args.seed, args.detuned)
    out = _out_dir(args, "run_simulate")
    meta = run_simulation(run, out / "tags.qfct", _threads(args), setup=args.setup, arm=args.arm,
                          detuned=args.detuned, config=cfg.to_dict())
    _manifest(out, "simulate", args)
    print(f"{run.n_pulses} pulses -> {sum(meta['tags_per_channel'])} tags "
          f"{meta['tags_per_channel']} in {out / 'tags.qfct'}")
    return EXIT_OK


# --- correlate / hom ----------------------------------------------------------

def _analysis_params(cfg: RunConfig, args, tagfile: Path | None) -> dict:
    a = cfg.analysis
    period = args.period or a.period
    if period is None and tagfile is not None and sidecar_path(tagfile).exists():
        period = read_sidecar(tagfile).get("period_ps")
    period = period or cfg.emitter.period_ps
    return {"bin_width": args.bin or a.bin_width, "range": args.range or a.range,
            "period": float(period), "window": args.window or a.window}


def correlate_file(path: Path, params: dict, threads: int = 1) -> tuple[CoincidenceHistogram, dict]:
    """Histogram a tag file and estimate g2(0) from its periodic peaks."""
    if not Path(path).is_file():
        raise CliError(EXIT_ANALYSIS, f"tag file not found: {path}")
    try:
        if threads > 1:
            ts = channel_timestamps(path)
            hist = cross_correlate(ts.get(0, np.zeros(0, np.int64)), ts.get(1, np.zeros(0, np.int64)),
                                   params["bin_width"], params["range"], threads)
        else:
            hist = histogram_file(path, 0, 1, params["bin_width"], params["range"])
    except (TagFormatError, TagCorruptionError, TagOrderError, UnsortedTagsError) as exc:
        raise CliError(EXIT_ANALYSIS, f"{path}: {exc}") from exc
    areas = integrate_peaks(hist, params["period"], params["window"])
    g = g2_zero(areas)
    warnings = [w for w in [period_warning(areas, params["bin_width"])] if w]
    res = {
        "input": {"file": Path(path).name, "sha256": _sha256(Path(path))},
        "analysis": {**params, "n_side": areas.N,
                     "side_peaks": sorted(n for n in areas.A if n != 0)},
        "totals": list(hist.totals),
        "peaks": {str(n): a for n, a in sorted(areas.A.items())},
        "g2": g.as_dict(),
        "warnings": warnings,
    }
    return hist, res


def _g2_arg(text: str | None):
    if text is None:
        return None
    p = Path(text)
    if p.is_file():
        doc = json.loads(p.read_text(encoding="utf-8"))
        g = doc.get("g2", doc)
        return (float(g["value"]), float(g.get("error", 0.0)))
    try:
        return (float(text), 0.0)
    except ValueError:
        raise CliError(EXIT_ANALYSIS, f"--g2 is neither a number nor a results file: {text}") from None


def cmd_correlate(args) -> int:
    cfg = _config(args.config, required=False)
    out = _out_dir(args, "run_correlate")
    params = _analysis_params(cfg, args, Path(args.tagfile))
    hist, res = correlate_file(Path(args.tagfile), params, _threads(args))
    hist.to_csv(out / "histogram.csv")
    res["config"] = cfg.to_dict()
    _write_json(out / "results.json", res)
    _manifest(out, "correlate", args)
    g = res["g2"]
    print(f"g2(0) = {g['value']:.4f} +- {g['error']:.4f}  ({g['n_side']} side peaks)")
    for w in res["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def hom_products(co: Path, cross: Path, params: dict, out: Path, threads: int, g2=None) -> dict:
    h_co, r_co = correlate_file(co, params, threads)
    h_cross, r_cross = correlate_file(cross, params, threads)
    h_co.to_csv(out / "histogram_co.csv")
    h_cross.to_csv(out / "histogram_cross.csv")
    gpar = (r_co["g2"]["value"], r_co["g2"]["error"])
    gperp = (r_cross["g2"]["value"], r_cross["g2"]["error"])
    v, ev = hom_visibility(gpar, gperp)
    res = {"co": r_co, "cross": r_cross, "v_hom": v, "v_hom_err": ev,
           "warnings": r_co["warnings"] + r_cross["warnings"]}
    if g2 is not None:
        m, em = corrected_indistinguishability((v, ev), g2)
        res.update({"g2": g2[0], "g2_err": g2[1], "m_s": m, "m_s_err": em})
    return res


def cmd_hom(args) -> int:
    cfg = _config(args.config, required=False)
    out = _out_dir(args, "run_hom")
    params = _analysis_params(cfg, args, Path(args.co_file))
    res = hom_products(Path(args.co_file), Path(args.cross_file), params, out, _threads(args),
                       _g2_arg(args.g2))
    res["config"] = cfg.to_dict()
    _write_json(out / "results.json", res)
    _manifest(out, "hom", args)
    line = f"V_HOM = {res['v_hom']:.4f} +- {res['v_hom_err']:.4f}"
    if "m_s" in res:
        line += f"  M_s = {res['m_s']:.4f} +- {res['m_s_err']:.4f}"
    print(line)
    for w in res["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


# --- snr ----------------------------------------------------------------------

def _click_rate(path: Path) -> float:
    meta = read_sidecar(path)
    return sum(meta["tags_per_channel"]) / meta["acquisition_time_s"]


def snr_products(in_file: Path, out_file: Path) -> dict:
    r_in, r_out = _click_rate(in_file), _click_rate(out_file)
    return {"rate_in_pm_hz": r_in, "rate_out_pm_hz": r_out, "snr": snr_from_counts(r_in, r_out),
            "snr_definition": SNR_DEFINITION,
            "snr_alternative": {"definition": "rate_in / rate_out",
                                "value": r_in / r_out if r_out else math.inf}}


def cmd_snr(args) -> int:
    out = _out_dir(args, "run_snr")
    for p in (args.in_file, args.out_file):
        if not sidecar_path(p).exists():
            raise CliError(EXIT_ANALYSIS, f"missing metadata sidecar for {p}")
    res = snr_products(Path(args.in_file), Path(args.out_file))
    _write_json(out / "results.json", res)
    _manifest(out, "snr", args)
    print(f"SNR = {res['snr']:.1f}  (in {res['rate_in_pm_hz']:.4g} Hz, out {res['rate_out_pm_hz']:.4g} Hz)")
    return EXIT_OK


# --- rates / fit ----------------------------------------------------------------

def cmd_rates(args) -> int:
    cfg = _config(args.config)
    if cfg.chain is None:
        raise ConfigError("config has no [chain] section")
    chain = cfg.chain if args.pump is None else cfg.chain.with_pump_power(args.pump * 1e-3)
    out = _out_dir(args, "run_rates")
    budget = predict_rates(chain, cfg.emitter)
    res = {"pump_power_w": chain.pump_power, "budget": budget.as_dict(),
           "snr": predict_snr(chain, cfg.emitter), "config": cfg.to_dict()}
    _write_json(out / "results.json", res)
    _manifest(out, "rates", args)
    print(f"{'stage':<18}{'signal [Hz]':>14}{'noise [Hz]':>14}")
    for s in budget.stages:
        print(f"{s.name:<18}{s.signal:>14.4g}{s.noise:>14.4g}")
    print(f"SNR = {res['snr']:.1f}")
    return EXIT_OK


def fit_products(cfg: RunConfig, out: Path, data: str | None = None, model: str = "sin2_sqrt_power",
                 fixed: dict | None = None) -> dict:
    if data is None:
        if cfg.chain is None:
            raise ConfigError("synthetic sweep needs a [chain] section")
        s = cfg.sweep
        problem = efficiency_sweep(cfg.chain, s.pump_min, s.pump_max, s.points, s.noise, s.seed)
    else:
        if not Path(data).is_file():
            raise CliError(EXIT_ANALYSIS, f"data file not found: {data}")
        if fixed is None and model == FitModel.SIN2_SQRT_POWER.value:
            fixed = {"length": cfg.chain.converter.length if cfg.chain else 4.0}
        problem = FitProblem.from_csv(data, model, fixed)
    problem.to_csv(out / "data.csv")
    result = fit(problem)
    xs = np.linspace(float(problem.x.min()), float(problem.x.max()), 201)
    f, sf = result.band(xs)
    with open(out / "band.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,model,sigma\n")
        for row in zip(xs.tolist(), f.tolist(), sf.tolist()):
            fh.write("{!r},{!r},{!r}\n".format(*row))
    res = result.as_dict()
    if problem.model is FitModel.SIN2_SQRT_POWER and cfg.chain is not None:
        res["truth"] = {"eta_max": end_to_end_efficiency(cfg.chain.with_pump_power(
            (math.pi / (2 * cfg.chain.converter.length)) ** 2 / cfg.chain.converter.eta_n)),
            "optimal_pump_power": (math.pi / (2 * cfg.chain.converter.length)) ** 2
            / cfg.chain.converter.eta_n}
    return res


def cmd_fit(args) -> int:
    cfg = _config(args.config, required=args.data is None)
    out = _out_dir(args, "run_fit")
    fixed = None
    if args.fix:
        fixed = {}
        for item in args.fix:
            name, _, value = item.partition("=")
            try:
                fixed[name.strip()] = float(value)
            except ValueError:
                raise ConfigError(f"--fix expects name=value, got {item!r}") from None
    res = fit_products(cfg, out, args.data, args.model, fixed)
    res["config"] = cfg.to_dict()
    _write_json(out / "fit.json", res)
    _manifest(out, "fit", args)
    for k, v in res["params"].items():
        e = res["errors"].get(k)
        print(f"{k:>10} = {v:.6g}" + ("" if e is None else f" +- {e:.2g}") + ("" if k not in res["fixed"] else " (fixed)"))
    for k, v in res["derived"].items():
        print(f"{k:>10} = {v:.6g}")
    print(f"reduced chi2 = {res['reduced_chi2']:.3f}, converged = {res['converged']}")
    return EXIT_OK


# --- report ---------------------------------------------------------------------

class _Stage:
    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, exc, tb):
        if exc is None:
            return False
        raise CliError(_exit_code(exc), f"stage {self.name!r} failed: {exc}") from exc


def report(cfg: RunConfig, out: Path, threads: int, pulses: int | None = None) -> dict:
    params = {"bin_width": cfg.analysis.bin_width, "range": cfg.analysis.range,
              "period": cfg.period_ps, "window": cfg.analysis.window}
    summary: dict = {"pulses": pulses or cfg.simulation.pulses}
    with _Stage("phasematch"):
        d = out / "phasematch"
        d.mkdir(exist_ok=True)
        pm = phasematch_products(cfg, d, Axis.SIGNAL_WAVELENGTH.value)
        summary["phasematch"] = {"solved_poling_period_um": pm["solved_poling_period_um"],
                                 "solved_temperature_c": pm["solved_temperature_c"],
                                 "signal_fwhm_nm": pm["curves"][0]["fwhm"]}
    arms = {}
    for arm in ("nir", "telecom"):
        files = {}
        with _Stage(f"simulate {arm}"):
            d = out / arm
            d.mkdir(exist_ok=True)
            for setup in SETUPS:
                run = build_run(cfg, setup, arm, pulses)
                files[setup] = d / f"{setup}.qfct"
                run_simulation(run, files[setup], threads, setup=setup, arm=arm)
        with _Stage(f"correlate {arm}"):
            h, r = correlate_file(files["hbt"], params, threads)
            h.to_csv(out / arm / "histogram_hbt.csv")
            g = (r["g2"]["value"], r["g2"]["error"])
            hom = hom_products(files["hom-co"], files["hom-cross"], params, out / arm, threads, g)
        arms[arm] = {"g2": g[0], "g2_err": g[1], "v_hom": hom["v_hom"],
                     "v_hom_err": hom["v_hom_err"], "m_s": hom["m_s"], "m_s_err": hom["m_s_err"],
                     "detected_rate_hz": _click_rate(files["hbt"]),
                     "warnings": r["warnings"] + hom["warnings"]}
    summary["arms"] = arms
    if cfg.chain is not None:
        with _Stage("snr"):
            d = out / "snr"
            d.mkdir(exist_ok=True)
            run_in = build_run(cfg, "hbt", "telecom", pulses)
            run_simulation(run_in, d / "in_pm.qfct", threads, setup="hbt", arm="telecom")
            run_out = build_run(cfg, "hbt", "telecom", pulses, detuned=True)
            run_simulation(run_out, d / "out_pm.qfct", threads, setup="hbt", arm="telecom",
                           detuned=True)
            summary["snr"] = snr_products(d / "in_pm.qfct", d / "out_pm.qfct")
        with _Stage("rates"):
            budget = predict_rates(cfg.chain, cfg.emitter)
            summary["rates"] = {"input_hz": budget.input_rate, "output_hz": budget.output_rate,
                                "noise_hz": budget.noise_rate,
                                "predicted_snr": predict_snr(cfg.chain, cfg.emitter)}
        with _Stage("fit"):
            d = out / "fit"
            d.mkdir(exist_ok=True)
            f = fit_products(cfg, d)
            _write_json(d / "fit.json", f)
            summary["fit"] = {"eta_max": f["params"]["eta_max"],
                              "eta_max_err": f["errors"]["eta_max"],
                              "optimal_pump_power_w": f["derived"]["optimal_pump_power"],
                              "optimal_pump_power_err": f["derived"]["optimal_pump_power_err"],
                              "reduced_chi2": f["reduced_chi2"]}
    return summary


def summary_table(s: dict) -> str:
    def pm(v, e, scale=1.0, digits=3):
        return f"{v * scale:.{digits}f}({e * scale:.{digits}f})"
    rows = []
    if "fit" in s:
        rows.append(("eta_ext,max", pm(s["fit"]["eta_max"], s["fit"]["eta_max_err"])))
        rows.append(("P_opt [mW]", pm(s["fit"]["optimal_pump_power_w"],
                                      s["fit"]["optimal_pump_power_err"], 1e3, 1)))
    for arm, label in (("nir", "NIR"), ("telecom", "TC")):
        a = s["arms"][arm]
        rows.append((f"g2(0) {label}", pm(a["g2"], a["g2_err"])))
        rows.append((f"V_HOM {label}", pm(a["v_hom"], a["v_hom_err"])))
        rows.append((f"M_s {label}", pm(a["m_s"], a["m_s_err"])))
    if "rates" in s:
        rows.append(("input rate [MHz]", f"{s['rates']['input_hz'] / 1e6:.3f}"))
        rows.append(("output rate [MHz]", f"{s['rates']['output_hz'] / 1e6:.3f}"))
        rows.append(("SNR predicted", f"{s['rates']['predicted_snr']:.0f}"))
    if "snr" in s:
        rows.append(("SNR simulated", f"{s['snr']['snr']:.0f}"))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"


def cmd_report(args) -> int:
    cfg = _config(args.config)
    if args.pulses is not None and args.pulses < 1:
        raise ValueError(f"--pulses must be >= 1, got {args.pulses}")
    out = _out_dir(args, "run_report")
    s = report(cfg, out, _threads(args), args.pulses)
    s["config"] = cfg.to_dict()
    _write_json(out / "summary.json", s)
    table = summary_table(s)
    (out / "summary.txt").write_text(table, encoding="utf-8")
    _manifest(out, "report", args)
    print(table, end="")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config_positional: bool = True) -> None:
    if config_positional:
        p.add_argument("config", nargs="?", default=None,
                       help="config file, or 'paper' for the bundled preset (default: $QFC_CONFIG)")
    else:
        p.add_argument("--config", default=None, help="config file or 'paper' (default: $QFC_CONFIG)")
    p.add_argument("--out", default=None, help="run directory")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")


def _analysis_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bin", type=float, default=None, help="bin width [ps]")
    p.add_argument("--range", type=float, default=None, help="histogram half range [ps]")
    p.add_argument("--period", type=float, default=None, help="peak spacing [ps]")
    p.add_argument("--window", type=float, default=None, help="peak half window [ps]")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qfctwin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"qfctwin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phasematch", help="phase-matching tuning curves")
    _common(p)
    p.add_argument("--axis", choices=[a.value for a in Axis], default=Axis.TEMPERATURE.value)
    p.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"), default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--centers", type=float, nargs="+", default=None,
                   help="extra signal wavelengths [nm], each temperature-tuned into phase matching")
    p.add_argument("--temperature-range", type=float, nargs=2, metavar=("LO", "HI"), default=None)
    p.set_defaults(func=cmd_phasematch)

    p = sub.add_parser("simulate", help="Monte Carlo time-tag simulation")
    _common(p)
    p.add_argument("--setup", choices=sorted(SETUPS), default="hbt")
    p.add_argument("--arm", default="nir")
    p.add_argument("--pulses", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--detuned", action="store_true",
                   help="converter out of phase matching (noise only)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("correlate", help="coincidence histogram and g2(0) of a tag file")
    p.add_argument("tagfile")
    _common(p, config_positional=False)
    _analysis_flags(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("hom", help="HOM visibility from co/cross tag files")
    p.add_argument("co_file")
    p.add_argument("cross_file")
    _common(p, config_positional=False)
    _analysis_flags(p)
    p.add_argument("--g2", default=None, help="g2(0) value or a correlate results.json")
    p.set_defaults(func=cmd_hom)

    p = sub.add_parser("snr", help="SNR from in/out-of-phase-matching tag files")
    p.add_argument("in_file")
    p.add_argument("out_file")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_snr, threads=1)

    p = sub.add_parser("rates", help="chain rate budget")
    _common(p)
    p.add_argument("--pump", type=float, default=None, help="pump power [mW]")
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("fit", help="fit an efficiency or phase-matching curve")
    _common(p)
    p.add_argument("--data", default=None, help="CSV with x,y,sigma (default: synthetic sweep)")
    p.add_argument("--model", choices=[m.value for m in FitModel],
                   default=FitModel.SIN2_SQRT_POWER.value)
    p.add_argument("--fix", action="append", default=None, metavar="NAME=VALUE")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("report", help="end-to-end reproduction summary")
    _common(p)
    p.add_argument("--pulses", type=int, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (TagFormatError, TagCorruptionError, TagOrderError, UnsortedTagsError,
                        PeakWindowError, ZeroDivisionError)):
        return EXIT_ANALYSIS
    if isinstance(exc, (SolverError, BracketError, RankDeficiencyError, EnergyMatchError,
                        DispersionRangeError)):
        return EXIT_SOLVER
    if isinstance(exc, (ConfigError, ValueError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, OSError):
        return EXIT_SIM_IO
    raise exc


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(exc)
        print(f"qfctwin: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
