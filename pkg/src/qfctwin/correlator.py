"""Coincidence histograms from time tags and the estimators built on them.

Delays are ``t_b - t_a`` in integer picoseconds. Bin ``i`` covers
``[-range + i*bin_width, -range + (i+1)*bin_width)``; a delay of exactly
``+range`` falls in the last bin.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tagstore import iter_chunks


class UnsortedTagsError(ValueError):
    pass


class PeakWindowError(ValueError):
    pass


def _as_int_ps(value: float, name: str) -> int:
    iv = int(round(value))
    if abs(iv - value) > 1e-9 or iv <= 0:
        raise ValueError(f"{name} must be a positive whole number of ps, got {value}")
    return iv


def _check_sorted(ts: np.ndarray, name: str) -> None:
    if ts.size > 1 and np.any(ts[1:] < ts[:-1]):
        i = int(np.flatnonzero(ts[1:] < ts[:-1])[0]) + 1
        raise UnsortedTagsError(f"{name} not sorted at index {i}")


@dataclass
class CoincidenceHistogram:
    bin_width: int
    range: int
    counts: np.ndarray
    channels: tuple[int, int] = (0, 1)
    totals: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.counts.size != 2 * self.range // self.bin_width:
            raise ValueError("bins length must equal 2*range/bin_width")

    @property
    def centers(self) -> np.ndarray:
        return -self.range + (np.arange(self.counts.size) + 0.5) * self.bin_width

    def __add__(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        if (self.bin_width, self.range) != (other.bin_width, other.range):
            raise ValueError("histograms have different binning")
        return CoincidenceHistogram(self.bin_width, self.range, self.counts + other.counts,
                                    self.channels,
                                    (self.totals[0] + other.totals[0], self.totals[1] + other.totals[1]))

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("delay_ps,counts\n")
            for c, n in zip(self.centers.tolist(), self.counts.tolist()):
                fh.write(f"{c:g},{n}\n")
        return path

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "CoincidenceHistogram":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        centers, counts = data[:, 0], data[:, 1].astype(np.int64)
        bw = int(round(centers[1] - centers[0]))
        rng = int(round(-centers[0] + bw / 2))
        return cls(bw, rng, counts)


def _bin_index(d: np.ndarray, bin_width: int, range_ps: int) -> np.ndarray:
    idx = (d + range_ps) // bin_width
    n_bins = 2 * range_ps // bin_width
    return np.minimum(idx, n_bins - 1)


def _sweep(a: np.ndarray, b: np.ndarray, bin_width: int, range_ps: int,
           chunk: int = 1 << 18) -> np.ndarray:
    n_bins = 2 * range_ps // bin_width
    hist = np.zeros(n_bins, dtype=np.int64)
    for s in range(0, a.size, chunk):
        aa = a[s:s + chunk]
        lo = np.searchsorted(b, aa - range_ps, side="left")
        hi = np.searchsorted(b, aa + range_ps, side="right")
        k = hi - lo
        total = int(k.sum())
        if total == 0:
            continue
        ia = np.repeat(np.arange(aa.size), k)
        start = np.repeat(lo - (np.cumsum(k) - k), k)
        ib = np.arange(total) + start
        d = b[ib] - aa[ia]
        hist += np.bincount(_bin_index(d, bin_width, range_ps), minlength=n_bins)
    return hist


def cross_correlate(tags_a, tags_b, bin_width: float = 100, range_ps: float = 200_000,
                    threads: int = 1, channels: tuple[int, int] = (0, 1)) -> CoincidenceHistogram:
    """Histogram of ``t_b - t_a`` over every pair with ``|t_b - t_a| <= range``.

    Each start tag locates its partner window in the sorted stop stream by
    binary search, so the cost is O(n log n + pairs) rather than O(n^2).
    Splitting the start stream across threads yields identical integer bins.
    """
    bw = _as_int_ps(bin_width, "bin_width")
    rng = _as_int_ps(range_ps, "range")
    if rng % bw:
        raise ValueError(f"bin_width {bw} must divide range {rng}")
    a = np.ascontiguousarray(tags_a, dtype=np.int64)
    b = np.ascontiguousarray(tags_b, dtype=np.int64)
    _check_sorted(a, "tags_a")
    _check_sorted(b, "tags_b")
    if threads > 1 and a.size > 1:
        parts = np.array_split(a, threads)
        with ThreadPoolExecutor(max_workers=threads) as pool:
            hists = list(pool.map(lambda p: _sweep(p, b, bw, rng), parts))
        counts = np.sum(hists, axis=0).astype(np.int64)
    else:
        counts = _sweep(a, b, bw, rng)
    return CoincidenceHistogram(bw, rng, counts, channels, (int(a.size), int(b.size)))


def naive_cross_correlate(tags_a, tags_b, bin_width: float = 100,
                          range_ps: float = 200_000) -> CoincidenceHistogram:
    """All-pairs reference implementation (O(n_a n_b)); test oracle only."""
    bw = _as_int_ps(bin_width, "bin_width")
    rng = _as_int_ps(range_ps, "range")
    a = np.asarray(tags_a, dtype=np.int64)
    b = np.asarray(tags_b, dtype=np.int64)
    n_bins = 2 * rng // bw
    counts = np.zeros(n_bins, dtype=np.int64)
    step = max(1, 4_000_000 // max(b.size, 1))
    for s in range(0, a.size, step):
        d = (b[None, :] - a[s:s + step, None]).ravel()
        d = d[np.abs(d) <= rng]
        counts += np.bincount(_bin_index(d, bw, rng), minlength=n_bins)
    return CoincidenceHistogram(bw, rng, counts, (0, 1), (int(a.size), int(b.size)))


def correlate_chunked(tags_a, tags_b, bin_width: float, range_ps: float,
                      boundaries) -> CoincidenceHistogram:
    """Correlate time segments independently and sum.

    Segment ``j`` owns start tags in ``[t_j, t_{j+1})`` and sees stop tags
    in ``[t_j - range, t_{j+1} + range]``, so every pair is counted once.
    """
    a = np.asarray(tags_a, dtype=np.int64)
    b = np.asarray(tags_b, dtype=np.int64)
    rng = _as_int_ps(range_ps, "range")
    edges = np.asarray(sorted(boundaries), dtype=np.int64)
    lo_edge = min(a[0] if a.size else 0, b[0] if b.size else 0)
    hi_edge = max(a[-1] if a.size else 0, b[-1] if b.size else 0) + 1
    edges = np.unique(np.concatenate([[lo_edge], edges, [hi_edge]]))
    total = None
    for t0, t1 in zip(edges[:-1], edges[1:]):
        sa = a[np.searchsorted(a, t0, "left"):np.searchsorted(a, t1, "left")]
        sb = b[np.searchsorted(b, t0 - rng, "left"):np.searchsorted(b, t1 + rng, "right")]
        h = cross_correlate(sa, sb, bin_width, range_ps)
        h.totals = (int(sa.size), 0)
        total = h if total is None else total + h
    total.totals = (int(a.size), int(b.size))
    return total


class StreamingCorrelator:
    """Constant-memory correlation over a globally time-ordered tag stream.

    A start tag is finalised once the stream has moved more than ``range``
    past it; stop tags older than every pending start minus ``range`` are
    dropped.
    """

    def __init__(self, channel_a: int, channel_b: int, bin_width: float = 100,
                 range_ps: float = 200_000):
        self.ch = (channel_a, channel_b)
        self.bw = _as_int_ps(bin_width, "bin_width")
        self.rng = _as_int_ps(range_ps, "range")
        if self.rng % self.bw:
            raise ValueError("bin_width must divide range")
        self.counts = np.zeros(2 * self.rng // self.bw, dtype=np.int64)
        self._a = np.zeros(0, np.int64)
        self._b = np.zeros(0, np.int64)
        self._last = None
        self.totals = [0, 0]
        self.peak_buffer = 0

    def feed(self, rec: np.ndarray) -> None:
        if rec.size == 0:
            return
        ts = rec["timestamp"].astype(np.int64)
        ch = rec["channel"]
        if self._last is not None and ts[0] < self._last:
            raise UnsortedTagsError("stream went backwards between chunks")
        _check_sorted(ts, "stream")
        self._last = int(ts[-1])
        new_a = ts[ch == self.ch[0]]
        new_b = ts[ch == self.ch[1]]
        self.totals[0] += new_a.size
        self.totals[1] += new_b.size
        self._a = np.concatenate([self._a, new_a])
        self._b = np.concatenate([self._b, new_b])
        self._flush(self._last - self.rng)

    def _flush(self, horizon: int | None) -> None:
        if horizon is None:
            done = self._a.size
        else:
            done = int(np.searchsorted(self._a, horizon, side="left"))
        if done:
            self.counts += _sweep(self._a[:done], self._b, self.bw, self.rng)
            self._a = self._a[done:]
        keep_from = (self._a[0] if self._a.size else (self._last or 0)) - self.rng
        self._b = self._b[np.searchsorted(self._b, keep_from, side="left"):]
        self.peak_buffer = max(self.peak_buffer, self._a.size + self._b.size)

    def result(self) -> CoincidenceHistogram:
        self._flush(None)
        return CoincidenceHistogram(self.bw, self.rng, self.counts.copy(), self.ch,
                                    (self.totals[0], self.totals[1]))


def histogram_file(path: str | os.PathLike, channel_a: int = 0, channel_b: int = 1,
                   bin_width: float = 100, range_ps: float = 200_000,
                   chunk_size: int = 1 << 16) -> CoincidenceHistogram:
    sc = StreamingCorrelator(channel_a, channel_b, bin_width, range_ps)
    for rec in iter_chunks(path, chunk_size=chunk_size):
        sc.feed(rec)
    return sc.result()


@dataclass
class PeakAreas:
    period: float
    window_half_width: float
    A: dict[int, int]
    centroids: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.window_half_width < self.period / 2:
            raise PeakWindowError("window_half_width must be below period/2")

    @property
    def N(self) -> int:
        return sum(1 for n in self.A if n != 0)

    def side(self) -> dict[int, int]:
        return {n: a for n, a in self.A.items() if n != 0}


def integrate_peaks(hist: CoincidenceHistogram, period: float,
                    window_half_width: float) -> PeakAreas:
    """Sum bins whose centres lie within +-window of each n*period.

    Peaks whose window does not fit inside the histogram range are dropped.
    """
    if not window_half_width < period / 2:
        raise PeakWindowError(
            f"windows overlap: half width {window_half_width} ps >= period/2 = {period / 2} ps")
    if period >= hist.range:
        raise PeakWindowError("period must be shorter than the histogram range")
    centers = hist.centers
    n_max = int(math.floor((hist.range - window_half_width) / period))
    A: dict[int, int] = {}
    cents: dict[int, float] = {}
    for n in range(-n_max, n_max + 1):
        c = n * period
        sel = (centers >= c - window_half_width) & (centers <= c + window_half_width)
        counts = hist.counts[sel]
        A[n] = int(counts.sum())
        cents[n] = float(np.dot(centers[sel] - c, counts) / A[n]) if A[n] else 0.0
    return PeakAreas(period, window_half_width, A, cents)


def period_warning(areas: PeakAreas, bin_width: float = 100.0) -> str | None:
    """Warn when peak centroids drift linearly with peak index, i.e. the
    assumed period does not match the histogram."""
    ns = np.array([n for n in areas.A if n != 0 and areas.A[n] > 0], dtype=float)
    if ns.size < 2:
        return None
    off = np.array([areas.centroids[int(n)] for n in ns])
    w = np.array([areas.A[int(n)] for n in ns], dtype=float)
    slope = float(np.sum(w * ns * off) / np.sum(w * ns * ns))
    drift = abs(slope) * float(np.max(np.abs(ns)))
    if drift > max(areas.window_half_width / 4, 3 * bin_width):
        return (f"peak centroids drift by {drift:.0f} ps across the histogram "
                f"(~{slope:.1f} ps per peak); the configured period {areas.period:.1f} ps "
                "looks mismatched and peaks are smeared")
    return None


@dataclass
class G2Result:
    value: float
    error: float
    zero_area: int = 0
    side_mean: float = 0.0
    n_side: int = 0

    def as_dict(self) -> dict:
        return {"value": self.value, "error": self.error, "zero_area": self.zero_area,
                "side_mean": self.side_mean, "n_side": self.n_side}


@dataclass
class HomResult:
    g2_parallel: G2Result
    g2_perp: G2Result
    v_hom: float
    v_hom_err: float
    m_s: float | None = None
    m_s_err: float | None = None
    g2: float | None = None

    def as_dict(self) -> dict:
        return {"g2_parallel": self.g2_parallel.as_dict(), "g2_perp": self.g2_perp.as_dict(),
                "v_hom": self.v_hom, "v_hom_err": self.v_hom_err, "m_s": self.m_s,
                "m_s_err": self.m_s_err, "g2": self.g2}


def g2_zero(areas: PeakAreas, n_side: int | None = None) -> G2Result:
    """Zero-delay area over the mean side-peak area, with Poisson errors.

    ``n_side`` restricts the side peaks to ``1 <= |n| <= n_side``.
    """
    side = {n: a for n, a in areas.side().items() if n_side is None or abs(n) <= n_side}
    if not side:
        raise PeakWindowError("no side peaks in range")
    total = sum(side.values())
    if total == 0:
        raise ZeroDivisionError("all side peaks are empty")
    N = len(side)
    mean = total / N
    a0 = areas.A[0]
    g = a0 / mean
    # an empty zero peak still carries a one-count uncertainty
    rel = math.sqrt(1 / max(a0, 1) + 1 / total)
    err = (g if a0 > 0 else 1 / mean) * rel
    return G2Result(g, err, int(a0), mean, N)


def _val_err(x) -> tuple[float, float]:
    if isinstance(x, G2Result):
        return x.value, x.error
    if isinstance(x, tuple):
        return float(x[0]), float(x[1])
    return float(x), 0.0


def hom_visibility(g2_parallel, g2_perp) -> tuple[float, float]:
    """V = 1 - g2_par / g2_perp; inputs are floats, (value, error) or G2Result."""
    gp, ep = _val_err(g2_parallel)
    gq, eq = _val_err(g2_perp)
    if gq == 0:
        raise ZeroDivisionError("g2_perp is zero")
    v = 1 - gp / gq
    err = math.hypot(ep / gq, gp * eq / gq**2)
    return v, err


def corrected_indistinguishability(v_hom, g2) -> tuple[float, float]:
    """M_s = (V + g2) / (1 - g2) with first-order error propagation."""
    v, ev = _val_err(v_hom)
    g, eg = _val_err(g2)
    if g >= 1:
        raise ValueError(f"g2 must be below 1, got {g}")
    m = (v + g) / (1 - g)
    err = math.hypot(ev / (1 - g), eg * (1 + v) / (1 - g) ** 2)
    return m, err


def snr_from_counts(rate_in_pm: float, rate_out_pm: float) -> float:
    """(in - out) / out, the out-of-phase-matching rate being pure noise."""
    if rate_out_pm < 0:
        raise ValueError("rate_out_pm must be >= 0")
    if rate_out_pm == 0:
        return math.inf
    return (rate_in_pm - rate_out_pm) / rate_out_pm


def hom_result(co: PeakAreas, cross: PeakAreas, g2=None, n_side: int | None = None) -> HomResult:
    gpar = g2_zero(co, n_side)
    gperp = g2_zero(cross, n_side)
    v, ev = hom_visibility(gpar, gperp)
    res = HomResult(gpar, gperp, v, ev)
    if g2 is not None:
        res.g2 = _val_err(g2)[0]
        res.m_s, res.m_s_err = corrected_indistinguishability((v, ev), g2)
    return res
