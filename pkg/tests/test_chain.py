from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfctwin.chain import (
    ChainModel,
    EmitterModel,
    StageModel,
    calibrate_converter,
    converter_efficiency,
    end_to_end_efficiency,
    external_efficiency,
    optimal_pump_power,
    predict_rates,
    predict_snr,
)
from qfctwin.config import paper_config

ETA_N = 0.5411
L = 4.0


def test_efficiency_zero_power():
    assert converter_efficiency(0.0, 0.484, ETA_N, L) == 0.0


def test_efficiency_at_device_optimum():
    assert converter_efficiency(0.285, 0.484, ETA_N, L) == pytest.approx(0.484, rel=1e-4)


def test_efficiency_half_power():
    expected = 0.484 * math.sin(math.pi / 2 * math.sqrt(0.5)) ** 2
    got = converter_efficiency(0.1425, 0.484, ETA_N, L)
    assert got == pytest.approx(0.389, abs=5e-4)
    assert got == pytest.approx(expected, rel=2e-4)


def test_efficiency_rejects_negative():
    with pytest.raises(ValueError):
        converter_efficiency(-1.0, 0.5, ETA_N, L)


def test_optimal_pump_power():
    p = optimal_pump_power(ETA_N, L)
    assert p == pytest.approx(0.285, rel=1e-3)
    assert converter_efficiency(p, 0.484, ETA_N, L) == pytest.approx(0.484, rel=1e-14)
    assert optimal_pump_power(ETA_N, 2 * L) == pytest.approx(p / 4, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 5), st.floats(0.05, 2), st.floats(0.5, 8))
def test_efficiency_periodic_in_sqrt_power(P, eta_n, length):
    # sin^2(L sqrt(eta_n P)) repeats when L sqrt(eta_n P) advances by pi
    u = length * math.sqrt(eta_n * P) + math.pi
    P2 = (u / length) ** 2 / eta_n
    assert converter_efficiency(P2, 0.5, eta_n, length) == pytest.approx(
        converter_efficiency(P, 0.5, eta_n, length), abs=1e-9)


def test_external_efficiency():
    assert external_efficiency(2.8e6, 1.3e6) == pytest.approx(0.464, abs=5e-4)
    assert external_efficiency(7.0, 7.0) == 1.0
    assert external_efficiency(7.0, 0.0) == 0.0
    with pytest.raises(ZeroDivisionError):
        external_efficiency(0.0, 1.0)


def _chain(*extra, pump=0.285):
    return ChainModel((StageModel.converter("c", 1.0, ETA_N, L), *extra), pump)


def test_input_rate():
    b = predict_rates(_chain(), EmitterModel(rep_rate=76e6, brightness=0.037))
    assert b.input_rate == pytest.approx(2.812e6)
    assert b.input_rate == pytest.approx(2.8e6, rel=0.02)


def test_single_loss_halves():
    chain = ChainModel((StageModel.loss("l", 0.5), StageModel.converter("c", 1.0, ETA_N, L)),
                       optimal_pump_power(ETA_N, L))
    b = predict_rates(chain, EmitterModel())
    assert b.output_rate == pytest.approx(b.input_rate / 2, rel=1e-12)


def test_reference_chain_rates():
    cfg = paper_config()
    b = predict_rates(cfg.chain, cfg.emitter)
    assert b.input_rate == pytest.approx(2.8e6, rel=0.02)
    assert b.output_rate == pytest.approx(1.3e6, rel=0.15)
    assert end_to_end_efficiency(cfg.chain) == pytest.approx(0.484, rel=1e-3)
    assert predict_snr(cfg.chain, cfg.emitter) > 400


def test_snr_examples():
    chain = _chain(StageModel.noise_source("n", 0.0, 0.0), pump=0.0)
    assert predict_snr(chain, EmitterModel()) == math.inf
    with pytest.raises(ValueError):
        predict_snr(_chain(), EmitterModel())
    # 1.3 MHz signal over 3.25 kHz noise
    em = EmitterModel(rep_rate=1.3e6, brightness=1.0)
    chain = _chain(StageModel.noise_source("n", 0.0, 3250.0), pump=optimal_pump_power(ETA_N, L))
    assert predict_snr(chain, em) == pytest.approx(400.0, rel=1e-9)


def test_chain_needs_one_converter():
    with pytest.raises(ValueError):
        ChainModel((StageModel.loss("l", 0.5),))


def test_calibrate_converter_hits_target():
    cfg = paper_config()
    chain = calibrate_converter(cfg.chain, 0.484)
    assert end_to_end_efficiency(chain) == pytest.approx(0.484, rel=1e-12)
    assert chain.converter.eta_max == pytest.approx(0.6612454390395771, rel=1e-9)


_stage = st.one_of(
    st.builds(StageModel.loss, st.just("l"), st.floats(0, 1)),
    st.builds(StageModel.filter, st.just("f"), st.floats(0, 3), st.floats(0, 60)),
    st.builds(StageModel.noise_source, st.just("n"), st.floats(0, 1e4), st.floats(0, 1e6)),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(_stage, max_size=4), st.integers(0, 4), st.floats(0, 1), st.floats(0, 0.5))
def test_extra_loss_never_increases_rates(stages, pos, t, pump):
    base = list(stages)
    base.insert(min(pos, len(base)), StageModel.converter("c", 0.6, ETA_N, L))
    lossy = list(base)
    lossy.insert(min(pos, len(lossy)), StageModel.loss("extra", t))
    em = EmitterModel()
    a = predict_rates(ChainModel(base, pump), em)
    b = predict_rates(ChainModel(lossy, pump), em)
    assert b.output_rate <= a.output_rate * (1 + 1e-12)
    assert b.noise_rate <= a.noise_rate * (1 + 1e-12) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 1), st.floats(0.1, 10))
def test_rates_linear_in_brightness(b, k):
    cfg = paper_config()
    b2 = min(1.0, b * k)
    r1 = predict_rates(cfg.chain, EmitterModel(brightness=b)).output_rate
    r2 = predict_rates(cfg.chain, EmitterModel(brightness=b2)).output_rate
    assert r2 == pytest.approx(r1 * b2 / b, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 60), st.floats(0, 30))
def test_snr_monotone_in_extinction(ext, more):
    cfg = paper_config()
    lo = cfg.chain.with_stage("dwdm", extinction_db=ext)
    hi = cfg.chain.with_stage("dwdm", extinction_db=ext + more)
    assert predict_snr(hi, cfg.emitter) >= predict_snr(lo, cfg.emitter)
