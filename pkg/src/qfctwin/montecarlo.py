"""Pulse-by-pulse Monte Carlo of detector time tags.

Each excitation pulse carries 0, 1 or 2 photons. Photons survive the chain
independently, are routed through an HBT splitter or an unbalanced
Mach-Zehnder (UMZI), and are detected with finite efficiency, Gaussian
jitter, dark counts and non-paralyzable dead time. A detector registers at
most one click per optical time slot.

Two photons that reach the UMZI output splitter in the same slot through
different arms bunch (leave through one port together) with probability
equal to their effective overlap; otherwise they route independently.

Work is split into fixed-size pulse blocks. Every block draws from its own
RNG stream keyed by (seed, block, stage), so output depends only on the seed
and the block size, never on the number of worker threads.
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from math import comb
from typing import Sequence

import numpy as np

from . import __version__
from .chain import ChainModel, EmitterModel, predict_rates
from .tagstore import FLAG_DARK, FLAG_NOISE, TagFileHeader, TagWriter, make_records, write_sidecar

DEFAULT_BLOCK = 1 << 20
TIME_ORIGIN_PS = 10_000.0

_STREAM_SOURCE = 0
_STREAM_ROUTE = 1
_STREAM_BACKGROUND = 2


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class PhotonNumberDist:
    p0: float
    p1: float
    p2: float

    def __post_init__(self):
        if min(self.p0, self.p1, self.p2) < 0:
            raise ValueError("probabilities must be non-negative")
        if abs(self.p0 + self.p1 + self.p2 - 1) > 1e-12:
            raise ValueError("probabilities must sum to 1")

    @property
    def mean(self) -> float:
        return self.p1 + 2 * self.p2

    @property
    def g2(self) -> float:
        mu = self.mean
        return 2 * self.p2 / mu**2 if mu > 0 else 0.0

    @property
    def probabilities(self) -> tuple[float, float, float]:
        return (self.p0, self.p1, self.p2)


def calibrate_distribution(brightness: float, g2_target: float) -> PhotonNumberDist:
    """Truncated photon-number distribution with p1 + p2 = brightness and
    2 p2 / (p1 + 2 p2)^2 = g2_target.

    Substituting p1 = b - p2 gives g (b + p2)^2 = 2 p2, whose smaller root
    is p2 = ((1 - g b) - sqrt(1 - 2 g b)) / g.
    """
    b, g = float(brightness), float(g2_target)
    if not 0 < b <= 1:
        raise CalibrationError(f"brightness must be in (0, 1], got {b}")
    if g < 0:
        raise CalibrationError("g2_target must be >= 0")
    if g == 0:
        return PhotonNumberDist(1.0 - b, b, 0.0)
    disc = 1 - 2 * g * b
    if disc < 0:
        raise CalibrationError(
            f"g2={g} unreachable at brightness {b} with at most two photons per pulse; "
            f"feasible region is g2 <= 1/(2 b) = {1 / (2 * b):.4g}"
        )
    # cancellation-free form of ((1 - g b) - sqrt(disc)) / g
    p2 = g * b * b / ((1 - g * b) + math.sqrt(disc))
    if p2 > b:
        raise CalibrationError(f"g2={g} needs p2={p2:.4g} > brightness {b}")
    return PhotonNumberDist(1.0 - b, b - p2, p2)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 0.85
    dark_rate: float = 100.0  # Hz
    jitter_sigma: float = 35.0  # ps
    dead_time: float = 25_000.0  # ps

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ValueError("detector efficiency must be in [0, 1]")
        if min(self.dark_rate, self.jitter_sigma, self.dead_time) < 0:
            raise ValueError("detector parameters must be non-negative")


class SetupKind(str, Enum):
    HBT = "hbt"
    UMZI_HOM = "umzi_hom"


class Polarization(str, Enum):
    CO = "co"
    CROSS = "cross"


@dataclass(frozen=True)
class MeasurementSetup:
    """HBT splitter or UMZI for two-photon interference.

    ``umzi_delay`` defaults to one excitation period. A delay mismatch
    ``d`` scales the pair overlap by exp(-|d| / coherence_time), the overlap
    of two exponentially decaying wave packets.
    """

    kind: SetupKind = SetupKind.HBT
    umzi_delay: float | None = None  # ps
    polarization: Polarization = Polarization.CO
    splitter_ratio: float = 0.5
    detectors: tuple[DetectorModel, DetectorModel] = (DetectorModel(), DetectorModel())
    coherence_time: float = 150.0  # ps

    def __post_init__(self):
        object.__setattr__(self, "kind", SetupKind(self.kind))
        object.__setattr__(self, "polarization", Polarization(self.polarization))
        object.__setattr__(self, "detectors", tuple(self.detectors))
        if len(self.detectors) != 2:
            raise ValueError("a setup needs exactly two detectors")
        if not 0 < self.splitter_ratio < 1:
            raise ValueError("splitter_ratio must be in (0, 1)")
        if self.umzi_delay is not None and self.umzi_delay <= 0:
            raise ValueError("umzi_delay must be positive")
        if self.coherence_time <= 0:
            raise ValueError("coherence_time must be positive")

    def delay_ps(self, period_ps: float) -> float:
        return period_ps if self.umzi_delay is None else float(self.umzi_delay)

    def effective_overlap(self, overlap: float, period_ps: float) -> float:
        if self.kind is not SetupKind.UMZI_HOM or self.polarization is Polarization.CROSS:
            return 0.0
        mismatch = abs(self.delay_ps(period_ps) - period_ps)
        return overlap * math.exp(-mismatch / self.coherence_time)

    def port_share(self) -> tuple[float, float]:
        if self.kind is SetupKind.HBT:
            return (self.splitter_ratio, 1 - self.splitter_ratio)
        return (0.5, 0.5)


@dataclass(frozen=True)
class SimRun:
    seed: int
    n_pulses: int
    emitter: EmitterModel
    setup: MeasurementSetup
    chain: ChainModel | None = None
    block_size: int = DEFAULT_BLOCK

    def __post_init__(self):
        if self.n_pulses < 1:
            raise ValueError("n_pulses must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    @property
    def transmission(self) -> float:
        if self.chain is None:
            return 1.0
        return predict_rates(self.chain, self.emitter).transmission

    @property
    def noise_rate(self) -> float:
        if self.chain is None:
            return 0.0
        return predict_rates(self.chain, self.emitter).noise_rate

    @property
    def n_blocks(self) -> int:
        return -(-self.n_pulses // self.block_size)

    def describe(self) -> dict:
        out = {
            "seed": self.seed,
            "n_pulses": self.n_pulses,
            "block_size": self.block_size,
            "emitter": asdict(self.emitter),
            "setup": _jsonable(asdict(self.setup)),
            "transmission": self.transmission,
            "noise_rate_hz": self.noise_rate,
        }
        if self.chain is not None:
            out["chain"] = _jsonable(asdict(self.chain))
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    return obj


def block_rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(block, stream))))


@dataclass
class _Photons:
    pulse: np.ndarray  # int64 global pulse index
    arm: np.ndarray  # int8, 1 = long arm


def _source_block(run: SimRun, dist: PhotonNumberDist, t: float, block: int) -> _Photons:
    k0 = block * run.block_size
    k1 = min(run.n_pulses, k0 + run.block_size)
    rng = block_rng(run.seed, block, _STREAM_SOURCE)
    u = rng.random(k1 - k0)
    one = np.flatnonzero(u >= dist.p0)
    two = np.flatnonzero(u >= dist.p0 + dist.p1)
    pulse = np.sort(np.concatenate([one, two]), kind="stable") + k0
    alive = rng.random(pulse.size) < t
    pulse = pulse[alive]
    arm = (rng.random(pulse.size) < 0.5).astype(np.int8)
    return _Photons(pulse.astype(np.int64), arm)


@dataclass
class _Clicks:
    time: np.ndarray  # float64 ps
    channel: np.ndarray  # uint8
    flags: np.ndarray  # uint8

    @classmethod
    def empty(cls) -> "_Clicks":
        return cls(np.zeros(0), np.zeros(0, np.uint8), np.zeros(0, np.uint8))


def _pair_indices(slot: np.ndarray, arm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pair the j-th short-arm photon of a slot with its j-th long-arm photon.

    Inputs must be sorted by (slot, arm).
    """
    n = slot.size
    if n < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    group_key = slot * 2 + arm
    starts = np.flatnonzero(np.r_[True, group_key[1:] != group_key[:-1]])
    sizes = np.diff(np.r_[starts, n])
    rank = np.arange(n) - np.repeat(starts, sizes)
    key = slot * 8 + rank
    s_idx = np.flatnonzero(arm == 0)
    l_idx = np.flatnonzero(arm == 1)
    _, i_s, i_l = np.intersect1d(key[s_idx], key[l_idx], assume_unique=True, return_indices=True)
    return s_idx[i_s], l_idx[i_l]


def _resolve_block(run: SimRun, photons: _Photons, prev: _Photons | None, block: int,
                   overlap_eff: float, period: float) -> _Clicks:
    setup = run.setup
    k0 = block * run.block_size
    k1 = min(run.n_pulses, k0 + run.block_size)
    rng = block_rng(run.seed, block, _STREAM_ROUTE)
    umzi = setup.kind is SetupKind.UMZI_HOM
    if umzi:
        slot = photons.pulse + photons.arm
        arm = photons.arm
        own = slot < k1
        slot, arm = slot[own], arm[own]
        if prev is not None:
            carry = (prev.pulse + prev.arm) == k0
            slot = np.concatenate([prev.pulse[carry] + 1, slot])
            arm = np.concatenate([prev.arm[carry], arm])
        order = np.lexsort((arm, slot))
        slot, arm = slot[order], arm[order]
        offset = np.where(arm == 1, setup.delay_ps(period) - period, 0.0)
        port = (rng.random(slot.size) < 0.5).astype(np.int8)
        s_i, l_i = _pair_indices(slot, arm)
        bunch = rng.random(s_i.size) < overlap_eff
        common = (rng.random(s_i.size) < 0.5).astype(np.int8)
        port[s_i[bunch]] = common[bunch]
        port[l_i[bunch]] = common[bunch]
    else:
        slot = photons.pulse
        offset = np.zeros(slot.size)
        port = (rng.random(slot.size) >= setup.splitter_ratio).astype(np.int8)

    eff = np.array([d.efficiency for d in setup.detectors])
    detected = rng.random(slot.size) < eff[port]
    slot, port, offset = slot[detected], port[detected], offset[detected]
    # one click per detector per slot, at the earliest arrival
    order = np.lexsort((offset, port, slot))
    slot, port, offset = slot[order], port[order], offset[order]
    first = np.ones(slot.size, dtype=bool)
    first[1:] = (slot[1:] != slot[:-1]) | (port[1:] != port[:-1])
    slot, port, offset = slot[first], port[first], offset[first]
    sigma = np.array([d.jitter_sigma for d in setup.detectors])
    jitter = rng.standard_normal(slot.size) * sigma[port]
    time = TIME_ORIGIN_PS + slot * period + offset + jitter
    return _Clicks(time, port.astype(np.uint8), np.zeros(slot.size, np.uint8))


def _background_block(run: SimRun, block: int, noise_rate: float, period: float) -> _Clicks:
    k0 = block * run.block_size
    k1 = min(run.n_pulses, k0 + run.block_size)
    start = TIME_ORIGIN_PS + (k0 - 0.5) * period
    span_ps = (k1 - k0) * period
    rng = block_rng(run.seed, block, _STREAM_BACKGROUND)
    share = run.setup.port_share()
    parts = []
    for ch, det in enumerate(run.setup.detectors):
        for rate, flag in ((noise_rate * share[ch] * det.efficiency, FLAG_NOISE),
                           (det.dark_rate, FLAG_DARK)):
            n = rng.poisson(rate * span_ps * 1e-12)
            t = start + np.sort(rng.random(n)) * span_ps
            parts.append(_Clicks(t, np.full(n, ch, np.uint8), np.full(n, flag, np.uint8)))
    return _concat(parts)


def _concat(parts: Sequence[_Clicks]) -> _Clicks:
    if not parts:
        return _Clicks.empty()
    return _Clicks(np.concatenate([p.time for p in parts]),
                   np.concatenate([p.channel for p in parts]),
                   np.concatenate([p.flags for p in parts]))


def apply_dead_time(ts: np.ndarray, dead_time: float) -> np.ndarray:
    """Keep-mask for sorted single-channel timestamps under a
    non-paralyzable dead time."""
    n = ts.size
    keep = np.ones(n, dtype=bool)
    if dead_time <= 0 or n < 2:
        return keep
    cand = np.flatnonzero(np.diff(ts) < dead_time) + 1
    if cand.size == 0:
        return keep
    last_kept = np.zeros(n, dtype=ts.dtype)
    tsl = ts.tolist()
    for j in cand.tolist():
        p = j - 1
        lk = tsl[p] if keep[p] else last_kept[p]
        if tsl[j] - lk < dead_time:
            keep[j] = False
            last_kept[j] = lk
    return keep


@dataclass
class TagArrays:
    timestamp: np.ndarray  # int64 ps, globally sorted
    channel: np.ndarray
    flags: np.ndarray

    def channel_times(self, ch: int) -> np.ndarray:
        return self.timestamp[self.channel == ch]

    def records(self) -> np.ndarray:
        return make_records(self.timestamp, self.channel, self.flags)


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def default_threads() -> int:
    return os.cpu_count() or 1


def simulate_tags(run: SimRun, threads: int = 1) -> TagArrays:
    emitter, setup = run.emitter, run.setup
    dist = calibrate_distribution(emitter.brightness, emitter.g2_target)
    period = emitter.period_ps
    t = run.transmission
    noise = run.noise_rate
    m_eff = setup.effective_overlap(emitter.overlap, period)
    blocks = range(run.n_blocks)

    sources = _map(lambda b: _source_block(run, dist, t, b), blocks, threads)

    def resolve(b):
        clicks = _resolve_block(run, sources[b], sources[b - 1] if b else None, b, m_eff, period)
        return _concat([clicks, _background_block(run, b, noise, period)])

    merged = _concat(_map(resolve, blocks, threads))
    ts = np.rint(merged.time).astype(np.int64)
    np.maximum(ts, 0, out=ts)
    ch, fl = merged.channel, merged.flags

    keep = np.ones(ts.size, dtype=bool)
    order = np.lexsort((ts, ch))
    for c, det in enumerate(setup.detectors):
        idx = order[ch[order] == c]
        keep[idx] = apply_dead_time(ts[idx], det.dead_time)
    ts, ch, fl = ts[keep], ch[keep], fl[keep]
    order = np.lexsort((fl, ch, ts))
    return TagArrays(ts[order], ch[order], fl[order])


def simulate(run: SimRun, path: str | os.PathLike, threads: int = 1, extra_meta: dict | None = None) -> dict:
    """Simulate ``run`` and write a tag file plus ``<path>.meta.json``."""
    tags = simulate_tags(run, threads)
    with TagWriter(path, TagFileHeader(resolution_ps=1, channel_count=2)) as w:
        w.write_records(tags.records())
    meta = {
        "version": __version__,
        "run": run.describe(),
        "tags_per_channel": [int(np.sum(tags.channel == c)) for c in (0, 1)],
        "acquisition_time_s": run.n_pulses * run.emitter.period_ps * 1e-12,
        "period_ps": run.emitter.period_ps,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_sidecar(path, meta)
    return meta


# --- exact enumeration oracle -------------------------------------------------


def _pair_outcomes(m: float) -> dict[tuple[int, int], float]:
    """(n_c, n_d) distribution for one interfering pair."""
    return {(2, 0): m / 2 + (1 - m) / 4, (0, 2): m / 2 + (1 - m) / 4, (1, 1): (1 - m) / 2}


def _convolve(d1: dict, d2: dict) -> dict:
    out: dict[tuple[int, int], float] = {}
    for (a, b), p in d1.items():
        for (c, d), q in d2.items():
            key = (a + c, b + d)
            out[key] = out.get(key, 0.0) + p * q
    return out


def _port_counts(n_short: int, n_long: int, m: float, share: tuple[float, float]) -> dict:
    dist = {(0, 0): 1.0}
    pairs = min(n_short, n_long)
    for _ in range(pairs):
        dist = _convolve(dist, _pair_outcomes(m))
    for _ in range(n_short + n_long - 2 * pairs):
        dist = _convolve(dist, {(1, 0): share[0], (0, 1): share[1]})
    return dist


def _slot_clicks(n_short: int, n_long: int, m: float, share, eff) -> np.ndarray:
    """2x2 array P[click_c, click_d] for one slot's photon content."""
    out = np.zeros((2, 2))
    for (nc, nd), p in _port_counts(n_short, n_long, m, share).items():
        pc = 1 - (1 - eff[0]) ** nc
        pd = 1 - (1 - eff[1]) ** nd
        out[1, 1] += p * pc * pd
        out[1, 0] += p * pc * (1 - pd)
        out[0, 1] += p * (1 - pc) * pd
        out[0, 0] += p * (1 - pc) * (1 - pd)
    return out


def _pulse_arm_dist(dist: PhotonNumberDist, t: float, split: bool) -> dict[tuple[int, int], float]:
    """Joint distribution of (short-arm, long-arm) surviving photons of one pulse."""
    out: dict[tuple[int, int], float] = {}
    for n, pn in enumerate(dist.probabilities):
        if pn == 0:
            continue
        for s, l in itertools.product(range(n + 1), repeat=2):
            lost = n - s - l
            if lost < 0:
                continue
            if not split and l:
                continue
            if split:
                w = math.factorial(n) / (math.factorial(s) * math.factorial(l) * math.factorial(lost))
                p = w * (t / 2) ** (s + l) * (1 - t) ** lost
            else:
                p = comb(n, s) * t**s * (1 - t) ** lost
            out[(s, l)] = out.get((s, l), 0.0) + pn * p
    return out


@dataclass
class AnalyticPeaks:
    """Expected coincidence probability per pulse for each peak index.

    ``areas[n]`` covers |n| <= 1; every other peak equals ``far``.
    """

    areas: dict[int, float]
    far: float
    singles: tuple[float, float]
    background: tuple[float, float] = (0.0, 0.0)
    window_half_width: float | None = None
    period: float = 0.0
    meta: dict = field(default_factory=dict)

    def area(self, n: int) -> float:
        return self.areas.get(n, self.far)

    def expected(self, n: int, n_pulses: int) -> float:
        return self.area(n) * n_pulses

    def side_mean(self, n_side: int) -> float:
        idx = [n for n in range(-n_side, n_side + 1) if n != 0]
        return float(np.mean([self.area(n) for n in idx]))

    def g2_ratio(self, n_side: int | None = None) -> float:
        """Zero-delay area over side-peak mean (far peaks if ``n_side`` is None)."""
        denom = self.far if n_side is None else self.side_mean(n_side)
        return self.area(0) / denom


def analytic_histogram(emitter: EmitterModel, setup: MeasurementSetup,
                       transmission: float = 1.0, noise_rate: float = 0.0,
                       window_half_width: float = 3000.0) -> AnalyticPeaks:
    """Exact expected peak areas by enumerating photon numbers, arm and port
    choices and pairwise bunching over the pulses that can share a slot.

    Background (chain noise and dark counts) is uniform in time and adds
    accidental coincidences proportional to the window width. Dead time is
    not modelled here.
    """
    dist = calibrate_distribution(emitter.brightness, emitter.g2_target)
    period = emitter.period_ps
    share = setup.port_share()
    eff = tuple(d.efficiency for d in setup.detectors)
    m = setup.effective_overlap(emitter.overlap, period)
    umzi = setup.kind is SetupKind.UMZI_HOM

    joint = _pulse_arm_dist(dist, transmission, split=umzi)
    s_marg: dict[int, float] = {}
    l_marg: dict[int, float] = {}
    for (s, l), p in joint.items():
        s_marg[s] = s_marg.get(s, 0.0) + p
        l_marg[l] = l_marg.get(l, 0.0) + p

    cache: dict[tuple[int, int], np.ndarray] = {}

    def clicks(s, l):
        if (s, l) not in cache:
            cache[(s, l)] = _slot_clicks(s, l, m, share, eff)
        return cache[(s, l)]

    a0 = 0.0
    pc = pd = 0.0
    for s, ps in s_marg.items():
        for l, pl in l_marg.items():
            c = clicks(s, l)
            a0 += ps * pl * c[1, 1]
            pc += ps * pl * c[1, :].sum()
            pd += ps * pl * c[:, 1].sum()
    far = pc * pd
    areas = {0: a0}
    if umzi:
        # slot k holds (s_k, l_{k-1}); slot k+1 holds (s_{k+1}, l_k)
        ap = am = 0.0
        for (sk, lk), pk in joint.items():
            for lprev, pl in l_marg.items():
                ck = clicks(sk, lprev)
                for snext, ps in s_marg.items():
                    cn = clicks(snext, lk)
                    w = pk * pl * ps
                    ap += w * ck[1, :].sum() * cn[:, 1].sum()
                    am += w * ck[:, 1].sum() * cn[1, :].sum()
        areas[1], areas[-1] = ap, am
    else:
        areas[1] = areas[-1] = far

    bg = tuple(noise_rate * share[i] * eff[i] + setup.detectors[i].dark_rate for i in (0, 1))
    if any(bg):
        if window_half_width is None:
            raise ValueError("background requires window_half_width")
        win_s = 2 * window_half_width * 1e-12
        extra = win_s * (pc * bg[1] + pd * bg[0]) + win_s * period * 1e-12 * bg[0] * bg[1]
        areas = {n: a + extra for n, a in areas.items()}
        far += extra
    return AnalyticPeaks(areas=areas, far=far, singles=(pc, pd), background=bg,
                         window_half_width=window_half_width, period=period,
                         meta={"p": dist.probabilities, "overlap_eff": m,
                               "transmission": transmission})
