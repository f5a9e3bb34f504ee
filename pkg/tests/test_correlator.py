from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfctwin.chain import EmitterModel
from qfctwin.correlator import (
    CoincidenceHistogram,
    G2Result,
    PeakAreas,
    PeakWindowError,
    UnsortedTagsError,
    corrected_indistinguishability,
    correlate_chunked,
    cross_correlate,
    g2_zero,
    histogram_file,
    hom_result,
    hom_visibility,
    integrate_peaks,
    naive_cross_correlate,
    period_warning,
    snr_from_counts,
)
from qfctwin.montecarlo import DetectorModel, MeasurementSetup, SimRun, simulate, simulate_tags
from qfctwin.tagstore import TagFileHeader, TagWriter

PERIOD = 1e12 / 76e6


def test_single_pair_bin():
    h = cross_correlate([0], [5000], 1000, 10_000)
    assert h.counts.size == 20
    assert h.counts.sum() == 1
    assert h.counts[15] == 1
    assert h.centers[15] == 5500


def test_self_correlation_symmetric():
    rng = np.random.default_rng(1)
    # on a 100 ps grid every delay sits on a bin's lower edge, so the
    # histogram mirrors exactly about the zero-delay bin
    ts = np.unique(rng.integers(0, 10**5, 500)) * 100
    h = cross_correlate(ts, ts, 100, 50_000)
    mid = h.counts.size // 2
    assert h.counts[mid] == ts.size
    k = np.arange(1, mid - 1)  # the last bin also holds delay == +range
    assert np.array_equal(h.counts[mid + k], h.counts[mid - k])


def test_range_edges():
    h = cross_correlate([1000], [0, 2000], 100, 1000)
    assert h.counts[0] == 1 and h.counts[-1] == 1
    h = cross_correlate([1000], [-1 + 0, 2001], 100, 1000)
    assert h.counts.sum() == 0


def test_poisson_streams_flat_and_equal_to_brute_force():
    rng = np.random.default_rng(2)
    rate, T = 1e6, 5e-3  # 5000 tags per stream, 1e4 in total
    a = np.sort(rng.integers(0, int(T * 1e12), rng.poisson(rate * T)))
    b = np.sort(rng.integers(0, int(T * 1e12), rng.poisson(rate * T)))
    h = cross_correlate(a, b, 1000, 200_000)
    assert np.array_equal(h.counts, naive_cross_correlate(a, b, 1000, 200_000).counts)
    assert h.counts.mean() == pytest.approx(rate**2 * T * 1e-9, rel=0.05)


def test_unsorted_rejected():
    with pytest.raises(UnsortedTagsError):
        cross_correlate([5, 3], [1], 1, 10)
    with pytest.raises(UnsortedTagsError):
        cross_correlate([1], [9, 2], 1, 10)


def test_bin_must_divide_range():
    with pytest.raises(ValueError):
        cross_correlate([0], [1], 300, 1000)


_tags = st.lists(st.integers(0, 20_000), max_size=60).map(sorted)


@settings(max_examples=200, deadline=None)
@given(_tags, _tags, st.sampled_from([(1, 50), (10, 1000), (100, 3000), (7, 700)]))
def test_sweep_equals_brute_force(a, b, binning):
    bw, rng = binning
    h = cross_correlate(a, b, bw, rng)
    assert np.array_equal(h.counts, naive_cross_correlate(a, b, bw, rng).counts)


@settings(max_examples=100, deadline=None)
@given(_tags, _tags, st.lists(st.integers(0, 20_000), max_size=5))
def test_chunk_merge_associative(a, b, bounds):
    one = cross_correlate(a, b, 10, 1000)
    parts = correlate_chunked(a, b, 10, 1000, bounds)
    assert parts.counts.tobytes() == one.counts.tobytes()


@settings(max_examples=50, deadline=None)
@given(_tags, _tags, st.integers(1, 8))
def test_thread_count_invariant(a, b, threads):
    assert np.array_equal(cross_correlate(a, b, 10, 1000, threads=threads).counts,
                          cross_correlate(a, b, 10, 1000).counts)


def _write(path, a, b):
    ts = np.concatenate([a, b]).astype(np.int64)
    ch = np.concatenate([np.zeros(len(a)), np.ones(len(b))]).astype(np.uint8)
    order = np.lexsort((ch, ts))
    with TagWriter(path, TagFileHeader()) as w:
        w.write(ts[order], ch[order])


def test_streaming_file_equals_one_shot(tmp_path):
    rng = np.random.default_rng(3)
    a = np.sort(rng.integers(0, 10**8, 20_000))
    b = np.sort(rng.integers(0, 10**8, 20_000))
    _write(tmp_path / "s.qfct", a, b)
    for chunk in (1, 17, 4096, 1 << 20):
        h = histogram_file(tmp_path / "s.qfct", 0, 1, 100, 200_000, chunk_size=chunk)
        assert np.array_equal(h.counts, cross_correlate(a, b, 100, 200_000).counts)
        assert h.totals == (a.size, b.size)


def test_flat_histogram_peak_areas():
    counts = np.full(4000, 3, dtype=np.int64)
    h = CoincidenceHistogram(100, 200_000, counts)
    areas = integrate_peaks(h, PERIOD, 3000)
    assert set(areas.A.values()) == {3 * 60}
    assert areas.N == 28


def test_delta_at_one_period():
    h = CoincidenceHistogram(100, 200_000, np.zeros(4000, dtype=np.int64))
    h.counts[int((PERIOD + 200_000) // 100)] = 7
    areas = integrate_peaks(h, PERIOD, 3000)
    assert areas.A[1] == 7
    assert sum(areas.A.values()) == 7


def test_partial_edge_windows_excluded():
    h = CoincidenceHistogram(100, 20_000, np.ones(400, dtype=np.int64))
    areas = integrate_peaks(h, 10_000, 4000)
    assert sorted(areas.A) == [-1, 0, 1]


def test_overlapping_windows_rejected():
    h = CoincidenceHistogram(100, 200_000, np.zeros(4000, dtype=np.int64))
    with pytest.raises(PeakWindowError):
        integrate_peaks(h, PERIOD, 7000)


def _areas(a0, side, n=20):
    A = {0: a0}
    for k in range(1, n // 2 + 1):
        A[k] = A[-k] = side
    return PeakAreas(PERIOD, 3000, A)


def test_g2_examples():
    g = g2_zero(_areas(4.4, 100))
    assert g.value == pytest.approx(0.044)
    assert g2_zero(_areas(0, 100)).value == 0
    assert g2_zero(_areas(100, 100)).value == 1.0
    with pytest.raises(ZeroDivisionError):
        g2_zero(_areas(5, 0))


def test_g2_poisson_error():
    g = g2_zero(_areas(50, 1000))
    assert g.error == pytest.approx(0.05 * math.sqrt(1 / 50 + 1 / 20_000), rel=1e-12)
    assert g2_zero(_areas(0, 1000)).error > 0


def test_hom_visibility_examples():
    v, _ = hom_visibility(0.143, 0.5)
    assert v == pytest.approx(0.714)
    assert hom_visibility(0.3, 0.3)[0] == 0
    assert hom_visibility(0.0, 0.3)[0] == 1
    with pytest.raises(ZeroDivisionError):
        hom_visibility(0.1, 0.0)


def test_corrected_indistinguishability_reference_values():
    assert corrected_indistinguishability(0.714, 0.044)[0] == pytest.approx(0.7929, abs=5e-4)
    assert corrected_indistinguishability(0.708, 0.051)[0] == pytest.approx(0.7997, abs=5e-4)
    assert round(corrected_indistinguishability(0.714, 0.044)[0], 3) == 0.793
    assert round(corrected_indistinguishability(0.708, 0.051)[0], 3) == 0.800
    assert corrected_indistinguishability(0.6, 0.0)[0] == 0.6
    with pytest.raises(ValueError):
        corrected_indistinguishability(0.5, 1.0)


def test_error_propagation_matches_finite_differences():
    v, g, ev, eg = 0.71, 0.05, 0.01, 0.003
    _, err = corrected_indistinguishability((v, ev), (g, eg))
    h = 1e-7
    f = lambda v, g: (v + g) / (1 - g)  # noqa: E731
    dv = (f(v + h, g) - f(v - h, g)) / (2 * h)
    dg = (f(v, g + h) - f(v, g - h)) / (2 * h)
    assert err == pytest.approx(math.hypot(dv * ev, dg * eg), rel=1e-6)
    _, ev2 = hom_visibility((0.15, 0.004), (0.5, 0.01))
    assert ev2 == pytest.approx(math.hypot(0.004 / 0.5, 0.15 * 0.01 / 0.25), rel=1e-12)


def test_hom_result_bundle():
    res = hom_result(_areas(143, 1000), _areas(500, 1000), g2=G2Result(0.044, 0.001))
    assert res.v_hom == pytest.approx(0.714)
    assert res.m_s == pytest.approx(0.7929, abs=5e-4)
    assert res.v_hom <= 1 and res.v_hom_err >= 0 and res.m_s_err >= 0


def test_snr_examples():
    assert snr_from_counts(401 * 7.0, 7.0) == pytest.approx(400)
    assert snr_from_counts(5.0, 5.0) == 0
    assert snr_from_counts(5.0, 0.0) == math.inf
    with pytest.raises(ValueError):
        snr_from_counts(5.0, -1.0)


def _hbt_setup():
    return MeasurementSetup(detectors=(DetectorModel(), DetectorModel()))


def test_error_scales_with_inverse_root_time():
    em = EmitterModel(brightness=0.2, g2_target=0.05)
    errs = []
    for n in (1_000_000, 4_000_000):
        tags = simulate_tags(SimRun(21, n, em, _hbt_setup()))
        h = cross_correlate(tags.channel_times(0), tags.channel_times(1), 100, 200_000)
        errs.append(g2_zero(integrate_peaks(h, PERIOD, 3000)).error)
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.2)


def test_period_mismatch_warning(tmp_path):
    em = EmitterModel(brightness=0.3, g2_target=0.05)
    path = tmp_path / "h.qfct"
    simulate(SimRun(22, 300_000, em, _hbt_setup()), path)
    h = histogram_file(path)
    assert period_warning(integrate_peaks(h, PERIOD, 3000)) is None
    msg = period_warning(integrate_peaks(h, 13_000.0, 3000))
    assert msg and "mismatch" in msg


def test_histogram_csv_round_trip(tmp_path):
    h = cross_correlate([0, 10, 400], [5, 250, 900], 10, 1000)
    path = h.to_csv(tmp_path / "h.csv")
    assert path.read_text().startswith("delay_ps,counts\n")
    back = CoincidenceHistogram.from_csv(path)
    assert back.bin_width == 10 and back.range == 1000
    assert np.array_equal(back.counts, h.counts)
