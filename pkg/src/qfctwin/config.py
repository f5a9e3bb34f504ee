"""Run configuration: INI-style sections with unit-suffixed values.

Sections::

    [emitter] [chain] [stage <name>]... [dispersion] [phasematch]
    [detector <name>]... [setup] [arm nir] [arm telecom] [analysis]
    [simulation] [sweep]

Stage sections are applied in file order. Values accept SI suffixes such as
``285 mW``, ``76 MHz``, ``-0.8 dB``, ``925.7 nm``, ``4 cm``, ``25 ns`` and
``3.7 %``. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import math
import os
import re
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .chain import ChainModel, EmitterModel, StageKind, StageModel, db_to_transmission
from .montecarlo import DetectorModel, MeasurementSetup, SetupKind
from .phasematch import JUNDT_1997, DispersionModel, calibrate_model

PAPER_PRESET = "paper"


class ConfigError(ValueError):
    pass


_SCALE = {
    "power": {"W": 1.0, "mW": 1e-3, "uW": 1e-6, "µW": 1e-6, "kW": 1e3},
    "frequency": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9},
    "length": {"m": 1.0, "cm": 1e-2, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9, "pm": 1e-12},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9, "ps": 1e-12, "fs": 1e-15},
    "temperature": {"C": 1.0, "degC": 1.0, "°C": 1.0},
    "ratio": {"": 1.0, "%": 1e-2},
    "db": {"dB": 1.0},
    "per_mw": {"Hz/mW": 1.0, "kHz/mW": 1e3, "Hz/W": 1e-3},
    "eta_n": {"/(W cm^2)": 1.0, "1/(W cm^2)": 1.0, "/W/cm^2": 1.0},
}
_CANONICAL = {
    "W": ("power", 1.0), "Hz": ("frequency", 1.0), "nm": ("length", 1e-9),
    "um": ("length", 1e-6), "cm": ("length", 1e-2), "ps": ("time", 1e-12),
    "C": ("temperature", 1.0), "ratio": ("ratio", 1.0), "dB": ("db", 1.0),
    "Hz/mW": ("per_mw", 1.0), "eta_n": ("eta_n", 1.0), "count": ("ratio", 1.0),
}
_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(.*?)\s*$")


def parse_quantity(text: str, unit: str) -> float:
    """Parse ``"285 mW"`` into the canonical ``unit`` (e.g. ``"W"`` -> 0.285)."""
    dim, canon = _CANONICAL[unit]
    m = _NUMBER.match(str(text))
    if not m:
        raise ConfigError(f"cannot parse quantity {text!r}")
    value, suffix = float(m.group(1)), m.group(2)
    scales = _SCALE[dim]
    if suffix == "":
        return value
    if suffix not in scales:
        raise ConfigError(f"unit {suffix!r} not valid for {dim} (expected one of {sorted(scales)})")
    # 12 significant digits strips power-of-ten round-off (25 ns -> 25000 ps)
    return float(f"{value * scales[suffix] / canon:.12g}")


def _int(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ConfigError(f"expected an integer, got {text!r}")
    return int(v)


def _q(unit: str) -> Callable[[str], float]:
    return lambda s: parse_quantity(s, unit)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(s):
        s = s.strip().lower()
        if s not in options:
            raise ConfigError(f"expected one of {options}, got {s!r}")
        return s
    return parse


def _opt_q(unit: str) -> Callable[[str], float | None]:
    def parse(s):
        return None if s.strip().lower() in ("auto", "none", "period") else parse_quantity(s, unit)
    return parse


_SCHEMAS: dict[str, dict[str, Callable[[str], Any]]] = {
    "emitter": {"rep_rate": _q("Hz"), "brightness": _q("ratio"), "g2_target": _q("ratio"),
                "overlap": _q("ratio"), "wavelength": _q("nm")},
    "chain": {"pump_power": _q("W"), "target_efficiency": _q("ratio")},
    "stage": {"kind": _choice(*(k.value for k in StageKind)), "transmission": _q("ratio"),
              "insertion_loss": _q("dB"), "eta_max": _q("ratio"), "eta_n": _q("eta_n"),
              "length": _q("cm"), "rate_per_mw": _q("Hz/mW"), "pedestal": _q("Hz"),
              "extinction": _q("dB")},
    "dispersion": {"coefficients": str, "effective_index_offset": float,
                   "confinement": str, "calibrate_period": _q("um"),
                   "calibrate_temperature": _q("C"), "calibrate_signal": _q("nm"),
                   "calibrate_conv": _q("nm")},
    "phasematch": {"lambda_sig": _q("nm"), "lambda_conv": _q("nm"), "poling_period": _q("um"),
                   "temperature": _q("C"), "crystal_length": _q("cm"), "qpm_order": _int,
                   "samples": _int},
    "detector": {"efficiency": _q("ratio"), "dark_rate": _q("Hz"), "jitter_sigma": _q("ps"),
                 "dead_time": _q("ps")},
    "setup": {"splitter_ratio": _q("ratio"), "umzi_delay": _opt_q("ps"),
              "coherence_time": _q("ps")},
    "arm": {"chain": _choice("none", "full"), "detectors": str},
    "analysis": {"bin_width": _q("ps"), "range": _q("ps"), "window": _q("ps"),
                 "period": _opt_q("ps")},
    "simulation": {"pulses": _int, "seed": _int, "block_size": _int},
    "sweep": {"pump_min": _q("W"), "pump_max": _q("W"), "points": _int, "noise": _q("ratio"),
              "seed": _int},
}
_MULTI = {"stage", "detector", "arm"}


@dataclass(frozen=True)
class ArmConfig:
    name: str
    use_chain: bool
    detectors: tuple[str, str]


@dataclass(frozen=True)
class AnalysisConfig:
    bin_width: float = 100.0
    range: float = 200_000.0
    window: float = 3000.0
    period: float | None = None


@dataclass(frozen=True)
class SimulationConfig:
    pulses: int = 10_000_000
    seed: int = 1
    block_size: int = 1 << 20


@dataclass(frozen=True)
class PhaseMatchConfig:
    lambda_sig: float = 925.0
    lambda_conv: float = 1560.0
    poling_period: float = 25.45
    temperature: float = 43.4
    crystal_length: float = 4.0
    qpm_order: int = 1
    samples: int = 801


@dataclass(frozen=True)
class SweepConfig:
    pump_min: float = 0.0
    pump_max: float = 0.4
    points: int = 20
    noise: float = 0.03
    seed: int = 3


@dataclass(frozen=True)
class RunConfig:
    emitter: EmitterModel = field(default_factory=EmitterModel)
    chain: ChainModel | None = None
    dispersion: DispersionModel = field(default_factory=DispersionModel)
    phasematch: PhaseMatchConfig = field(default_factory=PhaseMatchConfig)
    detectors: dict[str, DetectorModel] = field(default_factory=lambda: {"default": DetectorModel()})
    setup: MeasurementSetup = field(default_factory=MeasurementSetup)
    arms: dict[str, ArmConfig] = field(default_factory=dict)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    source: str = "<defaults>"

    def arm(self, name: str) -> ArmConfig:
        if name not in self.arms:
            raise ConfigError(f"unknown arm {name!r}; configured: {sorted(self.arms)}")
        return self.arms[name]

    def setup_for(self, arm: str, kind: str, polarization: str = "co") -> MeasurementSetup:
        a = self.arm(arm)
        dets = tuple(self.detectors[d] for d in a.detectors)
        return replace(self.setup, kind=SetupKind(kind), polarization=polarization, detectors=dets)

    def chain_for(self, arm: str) -> ChainModel | None:
        return self.chain if self.arm(arm).use_chain else None

    @property
    def period_ps(self) -> float:
        return self.analysis.period or self.emitter.period_ps

    def to_dict(self) -> dict:
        def clean(o):
            if isinstance(o, dict):
                return {k: clean(v) for k, v in o.items()}
            if isinstance(o, (list, tuple)):
                return [clean(v) for v in o]
            if hasattr(o, "value") and not isinstance(o, (int, float, str)):
                return o.value
            if isinstance(o, float) and not math.isfinite(o):
                return str(o)
            return o
        return clean({
            "source": self.source,
            "emitter": asdict(self.emitter),
            "chain": asdict(self.chain) if self.chain else None,
            "dispersion": asdict(self.dispersion),
            "phasematch": asdict(self.phasematch),
            "detectors": {k: asdict(v) for k, v in self.detectors.items()},
            "setup": asdict(self.setup),
            "arms": {k: asdict(v) for k, v in self.arms.items()},
            "analysis": asdict(self.analysis),
            "simulation": asdict(self.simulation),
            "sweep": asdict(self.sweep),
        })


def _section_parts(name: str) -> tuple[str, str | None]:
    parts = name.split(None, 1)
    kind = parts[0].strip().lower()
    label = parts[1].strip() if len(parts) > 1 else None
    if kind not in _SCHEMAS:
        raise ConfigError(f"unknown section [{name}]")
    if kind in _MULTI and not label:
        raise ConfigError(f"section [{kind}] needs a name, e.g. [{kind} main]")
    if kind not in _MULTI and label:
        raise ConfigError(f"section [{kind}] takes no name")
    return kind, label


def _parse_section(kind: str, name: str, items: dict[str, str]) -> dict[str, Any]:
    schema = _SCHEMAS[kind]
    out = {}
    for key, raw in items.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{name}] (allowed: {sorted(schema)})")
        try:
            out[key] = schema[key](raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"[{name}] {key} = {raw!r}: {exc}") from None
    return out


def _build_stage(name: str, v: dict) -> StageModel:
    kind = StageKind(v.pop("kind", None) or "loss")
    if "insertion_loss" in v:
        if "transmission" in v:
            raise ConfigError(f"[stage {name}]: give transmission or insertion_loss, not both")
        v["transmission"] = db_to_transmission(v.pop("insertion_loss"))
    if "extinction" in v:
        v["extinction_db"] = v.pop("extinction")
    try:
        return StageModel(name=name, kind=kind, **v)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[stage {name}]: {exc}") from None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"),
                                   strict=True, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None

    sections: dict[str, dict] = {}
    stages: list[StageModel] = []
    detectors: dict[str, DetectorModel] = {}
    arms: dict[str, ArmConfig] = {}
    for name in cp.sections():
        kind, label = _section_parts(name)
        vals = _parse_section(kind, name, dict(cp.items(name)))
        if kind == "stage":
            stages.append(_build_stage(label, vals))
        elif kind == "detector":
            try:
                detectors[label] = DetectorModel(**vals)
            except ValueError as exc:
                raise ConfigError(f"[detector {label}]: {exc}") from None
        elif kind == "arm":
            dets = tuple(d.strip() for d in vals.get("detectors", "default,default").split(","))
            if len(dets) == 1:
                dets = dets * 2
            arms[label] = ArmConfig(label, vals.get("chain", "none") == "full", dets)
        else:
            sections[kind] = vals

    try:
        emitter = EmitterModel(**sections.get("emitter", {}))
    except ValueError as exc:
        raise ConfigError(f"[emitter]: {exc}") from None

    chain = None
    chain_vals = dict(sections.get("chain", {}))
    target = chain_vals.pop("target_efficiency", None)
    if stages:
        try:
            chain = ChainModel(tuple(stages), **chain_vals)
        except ValueError as exc:
            raise ConfigError(f"[chain]: {exc}") from None
        if target is not None:
            from .chain import end_to_end_efficiency
            got = end_to_end_efficiency(chain)
            if abs(got - target) > 5e-4:
                raise ConfigError(f"[chain] stages give {got:.4f} end-to-end, "
                                  f"target_efficiency says {target:.4f}")
    elif chain_vals or target is not None:
        raise ConfigError("[chain] given without any [stage ...] sections")

    dispersion = _build_dispersion(sections.get("dispersion", {}))
    pm = PhaseMatchConfig(**sections.get("phasematch", {}))
    if pm.samples < 16:
        raise ConfigError(f"[phasematch] samples must be >= 16, got {pm.samples}")

    if not detectors:
        detectors = {"default": DetectorModel()}
    if not arms:
        arms = {"nir": ArmConfig("nir", False, (next(iter(detectors)),) * 2)}
    for arm in arms.values():
        if arm.use_chain and chain is None:
            raise ConfigError(f"[arm {arm.name}] uses the chain but no stages are configured")
        for d in arm.detectors:
            if d not in detectors:
                raise ConfigError(f"[arm {arm.name}] references unknown detector {d!r}")

    first_arm = next(iter(arms.values()))
    try:
        setup = MeasurementSetup(detectors=tuple(detectors[d] for d in first_arm.detectors),
                                 **sections.get("setup", {}))
    except ValueError as exc:
        raise ConfigError(f"[setup]: {exc}") from None

    analysis = AnalysisConfig(**sections.get("analysis", {}))
    if analysis.window >= (analysis.period or emitter.period_ps) / 2:
        raise ConfigError("[analysis] window must be below half the period")
    sim = SimulationConfig(**sections.get("simulation", {}))
    if sim.pulses < 1:
        raise ConfigError("[simulation] pulses must be >= 1")
    if not 0 <= sim.seed < 2**64:
        raise ConfigError("[simulation] seed must fit in 64 bits")
    sweep = SweepConfig(**sections.get("sweep", {}))
    return RunConfig(emitter=emitter, chain=chain, dispersion=dispersion, phasematch=pm,
                     detectors=detectors, setup=setup, arms=arms, analysis=analysis,
                     simulation=sim, sweep=sweep, source=source)


def _build_dispersion(v: dict) -> DispersionModel:
    coeffs = v.get("coefficients", "jundt1997").strip()
    if coeffs.lower() == "jundt1997":
        seq = JUNDT_1997
    else:
        try:
            seq = tuple(float(c) for c in coeffs.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"[dispersion] bad coefficients {coeffs!r}") from None
    try:
        model = DispersionModel(seq, effective_index_offset=v.get("effective_index_offset", 0.0))
    except ValueError as exc:
        raise ConfigError(f"[dispersion]: {exc}") from None
    conf = v.get("confinement", "0").strip().lower()
    if conf == "auto":
        return calibrate_model(
            target_period=v.get("calibrate_period", 25.45),
            lambda_sig=v.get("calibrate_signal", 925.0),
            lambda_conv=v.get("calibrate_conv", 1560.0),
            temperature=v.get("calibrate_temperature", 43.4),
            base=model,
        )
    try:
        return replace(model, confinement=float(conf))
    except ValueError:
        raise ConfigError(f"[dispersion] confinement must be a number or 'auto', got {conf!r}") from None


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Load a config file; ``"paper"`` selects the bundled preset and
    ``None`` falls back to ``$QFC_CONFIG``."""
    if path is None:
        path = os.environ.get("QFC_CONFIG")
        if not path:
            raise ConfigError("no config given and QFC_CONFIG is not set")
    if str(path) == PAPER_PRESET:
        text = resources.files("qfctwin").joinpath("data/paper.cfg").read_text(encoding="utf-8")
        return parse_config(text, source="paper.cfg")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), source=str(p))


def paper_config() -> RunConfig:
    return load_config(PAPER_PRESET)
