"""Synthetic multi-ticker market with injected event-driven price excursions.

Each ticker's close follows a geometric random walk partly driven by a common
market shock that also moves the NASDAQ channel; the dollar index is a
further correlated walk. At every event date the following closes are
multiplied by ``1 + peak * shape(k)``, where ``shape`` is zero on the first
post-event day, climbs linearly to 1 over ``rise`` days and falls linearly
back to 0 over ``decay`` days.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from evamp.config import build_dataclass, bundled_preset, load_dataclass, parse_kv_text
from evamp.errors import ConfigError
from evamp.labels import QuantConfig, encode_labels
from evamp.market.types import AlignedSeries, EventRecord

FILLER = (
    "announces", "quarterly", "update", "company", "shares", "board", "reports", "statement",
    "outlook", "investors", "management", "conference", "results", "operations", "strategic",
    "agreement", "market", "guidance", "review", "fiscal", "customers", "products", "team",
    "financial", "call", "plans", "today", "press", "release", "officer", "growth", "segment",
)


@dataclass(frozen=True)
class Scenario:
    """Generator settings; every field is a valid key in a scenario file.

    Returns are daily log returns; ``peak_min``/``peak_max`` are percent.
    """

    tickers: int = 20
    length: int = 400
    start_date: str = "2016-01-04"
    start_price_min: float = 20.0
    start_price_max: float = 300.0
    drift: float = 0.0003
    volatility: float = 0.005
    volatility_spread: float = 0.0
    market_beta: float = 0.5
    index_drift: float = 0.0003
    index_volatility: float = 0.008
    usd_volatility: float = 0.003
    usd_correlation: float = -0.3
    events: int = 100
    min_gap: int = 40
    peak_min: float = 1.0
    peak_max: float = 6.0
    rise_min: int = 1
    rise_max: int = 3
    decay_min: int = 3
    decay_max: int = 6
    sign: str = "both"
    n: int = 9
    interval: float = 0.3
    lookback: int = 30
    filler_words: int = 12
    market_cap_min: float = 3e8
    market_cap_max: float = 5e10

    def __post_init__(self):
        if self.tickers < 1 or self.length < 2:
            raise ConfigError("scenario needs at least one ticker and two days")
        if self.rise_min < 1 or self.decay_min < 1 or self.rise_max < self.rise_min \
                or self.decay_max < self.decay_min:
            raise ConfigError("profile rise/decay lengths must be positive ranges")
        if self.peak_min < 0 or self.peak_max < self.peak_min:
            raise ConfigError("peak range must satisfy 0 <= peak_min <= peak_max")
        if self.sign not in ("both", "up", "down"):
            raise ConfigError(f"sign must be both/up/down, got {self.sign!r}")
        if self.volatility < 0 or self.index_volatility < 0 or self.usd_volatility < 0:
            raise ConfigError("volatilities must be nonnegative")
        if not -1 <= self.market_beta <= 1 or not -1 <= self.usd_correlation <= 1:
            raise ConfigError("correlations must lie in [-1, 1]")

    @property
    def quant(self) -> QuantConfig:
        return QuantConfig(interval=self.interval, n=self.n)


def load_scenario(spec: str) -> Scenario:
    """A bundled scenario name (``standard``) or a path to a scenario file."""
    text = bundled_preset(f"scenario-{spec}")
    if text is not None:
        return build_dataclass(Scenario, parse_kv_text(text, spec), spec)
    return load_dataclass(Scenario, spec)


def amplification_profile(peak: float, rise: int, decay: int) -> np.ndarray:
    """Relative excursion for post-event days 1..(1 + rise + decay)."""
    if rise < 1 or decay < 1:
        raise ConfigError(f"profile lengths must be positive, got rise={rise} decay={decay}")
    k = np.arange(1, rise + decay + 2, dtype=np.float64)
    up = (k - 1) / rise
    down = 1.0 - (k - 1 - rise) / decay
    shape = np.where(k <= 1 + rise, up, down)
    return peak * shape


def magnitude_word(peak_pct: float, sc: Scenario) -> str:
    span = sc.peak_max - sc.peak_min
    rel = 0.5 if span == 0 else (abs(peak_pct) - sc.peak_min) / span
    size = "SMALL" if rel < 1 / 3 else "MEDIUM" if rel < 2 / 3 else "LARGE"
    return f"{'UP' if peak_pct >= 0 else 'DOWN'}_{size}"


def _event_positions(rng, lo: int, hi: int, k: int, gap: int) -> list[int]:
    """``k`` sorted positions in ``[lo, hi]`` pairwise at least ``gap`` apart."""
    room = hi - lo - (k - 1) * (gap - 1)
    if k == 0:
        return []
    if room < k:
        raise ConfigError(f"cannot place {k} events {gap} days apart in a {hi - lo + 1}-day span")
    picks = np.sort(rng.choice(room, size=k, replace=False))
    return [lo + int(p) + i * (gap - 1) for i, p in enumerate(picks)]


@dataclass(frozen=True)
class SyntheticMarket:
    series: dict[str, AlignedSeries]
    events: list[EventRecord]
    market_caps: dict[str, float]
    profiles: dict[str, tuple[float, int, int]]  # event key -> (peak fraction, rise, decay)


def synth_market(sc: Scenario, seed: int) -> SyntheticMarket:
    rng = np.random.default_rng(seed)
    T = sc.length
    start = np.datetime64(sc.start_date, "D")
    days = np.busday_offset(start, np.arange(T), roll="forward")
    dates = tuple(d.astype(dt.date) for d in days)

    market = rng.standard_normal(T)
    usd_own = rng.standard_normal(T)
    market[0] = usd_own[0] = 0.0
    nasdaq = 10000.0 * np.exp(np.cumsum(np.r_[0.0, sc.index_drift + sc.index_volatility * market[1:]]))
    usd_r = sc.usd_volatility * (sc.usd_correlation * market
                                 + np.sqrt(1 - sc.usd_correlation ** 2) * usd_own)
    usd = 95.0 * np.exp(np.cumsum(np.r_[0.0, usd_r[1:]]))

    names = [f"T{i:03d}" for i in range(sc.tickers)]
    per = [sc.events // sc.tickers + (1 if i < sc.events % sc.tickers else 0) for i in range(sc.tickers)]
    series, events, caps, profiles = {}, [], {}, {}
    cfg = sc.quant
    lo = sc.lookback + 5
    hi = T - cfg.n - 2
    for name, k in zip(names, per):
        p0 = float(np.exp(rng.uniform(np.log(sc.start_price_min), np.log(sc.start_price_max))))
        vol = sc.volatility * float(np.exp(rng.uniform(-sc.volatility_spread, sc.volatility_spread)))
        own = rng.standard_normal(T)
        r = sc.drift + vol * (sc.market_beta * market + np.sqrt(1 - sc.market_beta ** 2) * own)
        r[0] = 0.0
        close = p0 * np.exp(np.cumsum(r))
        caps[name] = float(np.exp(rng.uniform(np.log(sc.market_cap_min), np.log(sc.market_cap_max))))
        positions = _event_positions(rng, lo, hi, k, sc.min_gap)
        specs = []
        for pos in positions:
            peak_pct = float(rng.uniform(sc.peak_min, sc.peak_max))
            if sc.sign == "down" or (sc.sign == "both" and rng.random() < 0.5):
                peak_pct = -peak_pct
            rise = int(rng.integers(sc.rise_min, sc.rise_max + 1))
            decay = int(rng.integers(sc.decay_min, sc.decay_max + 1))
            words = list(rng.choice(FILLER, size=sc.filler_words))
            words.insert(int(rng.integers(0, len(words) + 1)), magnitude_word(peak_pct, sc))
            specs.append((pos, peak_pct / 100.0, rise, decay, " ".join([name] + words)))
        for pos, peak, rise, decay, _ in specs:
            prof = amplification_profile(peak, rise, decay)
            end = min(T, pos + 1 + len(prof))
            close[pos + 1:end] *= 1.0 + prof[: end - pos - 1]
        s = AlignedSeries(name, dates, np.column_stack([close, nasdaq, usd]))
        series[name] = s
        for pos, peak, rise, decay, text in specs:
            realized = tuple(float(x) for x in s.close[pos + 1:pos + 1 + cfg.n])
            ev = EventRecord(name, dates[pos], text, encode_labels(realized, cfg), realized)
            events.append(ev)
            profiles[ev.key] = (peak, rise, decay)
    return SyntheticMarket(series, events, caps, profiles)
