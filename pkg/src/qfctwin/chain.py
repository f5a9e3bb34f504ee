"""Photon budget of the conversion chain: rates, efficiency and SNR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum


class StageKind(str, Enum):
    LOSS = "loss"
    CONVERTER = "converter"
    NOISE_SOURCE = "noise_source"
    FILTER = "filter"


@dataclass(frozen=True)
class EmitterModel:
    """Pulsed single-photon source.

    ``brightness`` is the probability per pulse of at least one fiber-coupled
    photon; ``overlap`` is the pairwise wave-packet overlap of two photons.
    """

    rep_rate: float = 76e6
    brightness: float = 0.037
    g2_target: float = 0.044
    overlap: float = 0.75
    wavelength: float = 925.7

    def __post_init__(self):
        if not 0 < self.brightness <= 1:
            raise ValueError(f"brightness must be in (0, 1], got {self.brightness}")
        if not 0 <= self.g2_target < 1:
            raise ValueError(f"g2_target must be in [0, 1), got {self.g2_target}")
        if not 0 <= self.overlap <= 1:
            raise ValueError(f"overlap must be in [0, 1], got {self.overlap}")
        if self.rep_rate <= 0:
            raise ValueError("rep_rate must be positive")

    @property
    def period_ps(self) -> float:
        return 1e12 / self.rep_rate


@dataclass(frozen=True)
class StageModel:
    name: str
    kind: StageKind
    transmission: float = 1.0
    eta_max: float = 0.0
    eta_n: float = 0.0  # 1/(W cm^2)
    length: float = 0.0  # cm
    rate_per_mw: float = 0.0  # Hz/mW
    pedestal: float = 0.0  # Hz
    extinction_db: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StageKind(self.kind))
        if not 0 <= self.transmission <= 1:
            raise ValueError(f"{self.name}: transmission must be in [0, 1]")
        if not 0 <= self.eta_max <= 1:
            raise ValueError(f"{self.name}: eta_max must be in [0, 1]")
        if self.extinction_db < 0:
            raise ValueError(f"{self.name}: extinction must be >= 0 dB")
        if min(self.eta_n, self.length, self.rate_per_mw, self.pedestal) < 0:
            raise ValueError(f"{self.name}: negative stage parameter")

    @classmethod
    def loss(cls, name: str, transmission: float) -> "StageModel":
        return cls(name, StageKind.LOSS, transmission=transmission)

    @classmethod
    def filter(cls, name: str, insertion_loss_db: float = 0.0,
               extinction_db: float = 0.0) -> "StageModel":
        return cls(name, StageKind.FILTER, transmission=db_to_transmission(insertion_loss_db),
                   extinction_db=extinction_db)

    @classmethod
    def converter(cls, name: str, eta_max: float, eta_n: float, length: float) -> "StageModel":
        return cls(name, StageKind.CONVERTER, eta_max=eta_max, eta_n=eta_n, length=length)

    @classmethod
    def noise_source(cls, name: str, rate_per_mw: float, pedestal: float = 0.0) -> "StageModel":
        return cls(name, StageKind.NOISE_SOURCE, rate_per_mw=rate_per_mw, pedestal=pedestal)


@dataclass(frozen=True)
class ChainModel:
    stages: tuple[StageModel, ...]
    pump_power: float = 0.285  # W

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        n_conv = sum(s.kind is StageKind.CONVERTER for s in self.stages)
        if n_conv != 1:
            raise ValueError(f"chain needs exactly one converter stage, found {n_conv}")
        if self.pump_power < 0:
            raise ValueError("pump_power must be >= 0")

    @property
    def converter(self) -> StageModel:
        return next(s for s in self.stages if s.kind is StageKind.CONVERTER)

    def with_pump_power(self, power: float) -> "ChainModel":
        return replace(self, pump_power=power)

    def with_stage(self, name: str, **changes) -> "ChainModel":
        stages = tuple(replace(s, **changes) if s.name == name else s for s in self.stages)
        return replace(self, stages=stages)


def db_to_transmission(loss_db: float) -> float:
    return 10 ** (-abs(loss_db) / 10)


def converter_efficiency(P: float, eta_max: float, eta_n: float, length_cm: float) -> float:
    """eta_max * sin^2(L sqrt(eta_n P)); over-pumping reconverts, no clamping."""
    if min(P, eta_max, eta_n, length_cm) < 0:
        raise ValueError("converter parameters must be non-negative")
    return eta_max * math.sin(length_cm * math.sqrt(eta_n * P)) ** 2


def optimal_pump_power(eta_n: float, length_cm: float) -> float:
    """First maximum of the sin^2 efficiency curve, in W."""
    if eta_n <= 0 or length_cm <= 0:
        raise ValueError("eta_n and length must be positive")
    return (math.pi / (2 * length_cm)) ** 2 / eta_n


def external_efficiency(n_in: float, n_out: float) -> float:
    if n_in == 0:
        raise ZeroDivisionError("no input photons")
    return n_out / n_in


@dataclass
class StageRate:
    name: str
    kind: StageKind
    signal: float
    noise: float
    factor: float


@dataclass
class RateBudget:
    input_rate: float
    stages: list[StageRate] = field(default_factory=list)

    @property
    def output_rate(self) -> float:
        return self.stages[-1].signal if self.stages else self.input_rate

    @property
    def noise_rate(self) -> float:
        return self.stages[-1].noise if self.stages else 0.0

    @property
    def transmission(self) -> float:
        return self.output_rate / self.input_rate if self.input_rate else 0.0

    def as_dict(self) -> dict:
        return {
            "input_rate_hz": self.input_rate,
            "output_rate_hz": self.output_rate,
            "noise_rate_hz": self.noise_rate,
            "transmission": self.transmission,
            "stages": [
                {"name": s.name, "kind": s.kind.value, "signal_hz": s.signal,
                 "noise_hz": s.noise, "factor": s.factor}
                for s in self.stages
            ],
        }


def stage_factor(stage: StageModel, pump_power: float) -> float:
    if stage.kind is StageKind.CONVERTER:
        return converter_efficiency(pump_power, stage.eta_max, stage.eta_n, stage.length)
    if stage.kind is StageKind.NOISE_SOURCE:
        return 1.0
    return stage.transmission


def predict_rates(chain: ChainModel, emitter: EmitterModel) -> RateBudget:
    """Expected signal and noise rates after every stage.

    Loss stages scale signal and noise alike; filters pass signal with their
    transmission and noise with their extinction; noise sources add
    ``rate_per_mw * P + pedestal``; the converter leaves noise untouched.
    """
    p_mw = chain.pump_power * 1e3
    signal = emitter.rep_rate * emitter.brightness
    budget = RateBudget(input_rate=signal)
    noise = 0.0
    for st in chain.stages:
        f = stage_factor(st, chain.pump_power)
        signal *= f
        if st.kind is StageKind.LOSS:
            noise *= st.transmission
        elif st.kind is StageKind.FILTER:
            noise *= 10 ** (-st.extinction_db / 10)
        elif st.kind is StageKind.NOISE_SOURCE:
            noise += st.rate_per_mw * p_mw + st.pedestal
        budget.stages.append(StageRate(st.name, st.kind, signal, noise, f))
    return budget


def predict_snr(chain: ChainModel, emitter: EmitterModel) -> float:
    if not any(s.kind is StageKind.NOISE_SOURCE for s in chain.stages):
        raise ValueError("chain has no noise_source stage")
    budget = predict_rates(chain, emitter)
    if budget.noise_rate == 0:
        return math.inf
    return budget.output_rate / budget.noise_rate


def end_to_end_efficiency(chain: ChainModel) -> float:
    """Signal transmission of the whole chain at its pump power."""
    t = 1.0
    for st in chain.stages:
        t *= stage_factor(st, chain.pump_power)
    return t


def calibrate_converter(chain: ChainModel, target: float) -> ChainModel:
    """Solve the converter's eta_max so the chain at the optimal pump power
    reaches ``target`` end-to-end efficiency."""
    conv = chain.converter
    p_opt = optimal_pump_power(conv.eta_n, conv.length)
    rest = 1.0
    for st in chain.stages:
        if st.kind is not StageKind.CONVERTER:
            rest *= stage_factor(st, p_opt)
    eta_max = target / rest
    if not 0 < eta_max <= 1:
        raise ValueError(f"target {target} needs converter eta_max {eta_max:.4f} outside (0, 1]")
    return replace(chain.with_stage(conv.name, eta_max=eta_max), pump_power=p_opt)
