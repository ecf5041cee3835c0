from __future__ import annotations

import math
import warnings

import numpy as np

from evamp.errors import ConfigError, DataError
from evamp.market.types import AlignedSeries, EventRecord, WindowSample


class ShortSeriesWarning(UserWarning):
    pass


def split_counts(n_tickers: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment with at least one ticker per split."""
    raw = [n_tickers * r for r in ratios]
    counts = [math.floor(x) for x in raw]
    for i in sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))[: n_tickers - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        while counts[i] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return tuple(counts)


def split_by_ticker(records: list[EventRecord], ratios=(0.8, 0.1, 0.1), seed: int = 0
                    ) -> tuple[list[EventRecord], list[EventRecord], list[EventRecord]]:
    """Assign whole tickers to train/val/test; event order is preserved within each split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    tickers = sorted({r.ticker for r in records})
    if len(tickers) < 3:
        raise DataError(f"need at least 3 tickers to split, got {len(tickers)}")
    order = np.random.default_rng(seed).permutation(len(tickers))
    n_train, n_val, _ = split_counts(len(tickers), tuple(ratios))
    assign = {}
    for rank, idx in enumerate(order):
        assign[tickers[idx]] = 0 if rank < n_train else 1 if rank < n_train + n_val else 2
    parts: tuple[list, list, list] = ([], [], [])
    for r in records:
        parts[assign[r.ticker]].append(r)
    return parts


def make_windows(series: AlignedSeries, lookback: int = 30, horizon: int = 20, stride: int = 1
                 ) -> list[WindowSample]:
    if lookback < 1 or horizon < 1 or stride < 1:
        raise ConfigError("lookback, horizon and stride must be positive")
    T = len(series)
    if T < lookback + horizon:
        warnings.warn(f"{series.ticker}: {T} days is shorter than lookback+horizon={lookback + horizon}",
                      ShortSeriesWarning, stacklevel=2)
        return []
    out = []
    for start in range(0, T - lookback - horizon + 1, stride):
        end = start + lookback
        out.append(WindowSample(series.channels[start:end].copy(),
                                series.close[end:end + horizon].copy(),
                                (series.ticker, series.dates[end - 1])))
    return out
