from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from enum import Enum

import numpy as np

from evamp.errors import DataError
from evamp.labels import LabelSequence

CHANNELS = ("close", "nasdaq", "usd_index")


@dataclass(frozen=True, eq=False)
class AlignedSeries:
    """Per-ticker trading-day series of (stock close, NASDAQ, dollar index)."""

    ticker: str
    dates: tuple[dt.date, ...]
    channels: np.ndarray  # [T, 3]

    def __post_init__(self):
        ch = np.array(self.channels, dtype=np.float64)
        ch.setflags(write=False)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "dates", tuple(self.dates))
        if ch.ndim != 2 or ch.shape[1] != 3 or ch.shape[0] != len(self.dates):
            raise DataError(f"{self.ticker}: channel matrix {ch.shape} does not match {len(self.dates)} dates")
        if any(b <= a for a, b in zip(self.dates, self.dates[1:])):
            raise DataError(f"{self.ticker}: dates are not strictly increasing")
        if not np.all(np.isfinite(ch)) or np.any(ch <= 0):
            raise DataError(f"{self.ticker}: prices must be finite and positive")
        object.__setattr__(self, "_index", {d: i for i, d in enumerate(self.dates)})

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def close(self) -> np.ndarray:
        return self.channels[:, 0]

    def index_of(self, date: dt.date) -> int | None:
        return self._index.get(date)

    def __eq__(self, other) -> bool:
        return (isinstance(other, AlignedSeries) and self.ticker == other.ticker
                and self.dates == other.dates and np.array_equal(self.channels, other.channels))


@dataclass(frozen=True)
class EventRecord:
    ticker: str
    date: dt.date
    text: str
    labels: LabelSequence | None = None
    realized: tuple[float, ...] | None = None

    @property
    def key(self) -> str:
        return f"{self.ticker}|{self.date.isoformat()}"


@dataclass(frozen=True)
class Rejection:
    line: int
    ticker: str
    date: str
    reason: str


@dataclass(frozen=True, eq=False)
class WindowSample:
    source: np.ndarray  # [lookback, 3]
    target: np.ndarray  # [horizon] stock close
    origin: tuple[str, dt.date]


class CapBucket(str, Enum):
    SMALL = "SmallCap"
    MID = "MidCap"
    LARGE = "LargeCap"


@dataclass(frozen=True)
class CapThresholds:
    """Market-cap cut points in currency units: small < mid_from <= mid < large_from."""

    mid_from: float = 2e9
    large_from: float = 10e9

    def bucket(self, market_cap: float) -> CapBucket:
        if market_cap < self.mid_from:
            return CapBucket.SMALL
        if market_cap < self.large_from:
            return CapBucket.MID
        return CapBucket.LARGE
