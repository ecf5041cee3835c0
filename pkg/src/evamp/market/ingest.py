"""File ingestion: prices CSV, events JSONL, optional ticker metadata CSV."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from evamp.errors import DataError, LabelParseError
from evamp.labels import QuantConfig, parse_tokens
from evamp.market.types import (
    CHANNELS, AlignedSeries, CapBucket, CapThresholds, EventRecord, Rejection,
)

log = logging.getLogger(__name__)

PRICE_COLUMNS = ("date", "ticker") + CHANNELS


def _parse_date(text: str, where: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise DataError(f"{where}: bad date {text!r}") from exc


def _parse_price(text: str, where: str, column: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError as exc:
        raise DataError(f"{where}: {column} is not a number: {text!r}") from exc
    if not math.isfinite(value) or value <= 0:
        raise DataError(f"{where}: {column} must be a positive price, got {text!r}")
    return value


def ingest_prices(path) -> dict[str, AlignedSeries]:
    """Read the prices CSV into one aligned series per ticker.

    Empty cells are forward-filled from the previous trading day of the same
    ticker; leading rows that still miss any channel are dropped.
    """
    rows: dict[str, dict[dt.date, list[float]]] = defaultdict(dict)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty prices file") from None
        unknown = [h for h in header if h not in PRICE_COLUMNS]
        missing = [c for c in PRICE_COLUMNS if c not in header]
        if unknown:
            raise DataError(f"{path}: unknown column(s) {unknown}")
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        col = {name: header.index(name) for name in PRICE_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise DataError(f"{where}: expected {len(header)} fields, got {len(row)}")
            date = _parse_date(row[col["date"]], where)
            ticker = row[col["ticker"]].strip()
            if not ticker:
                raise DataError(f"{where}: empty ticker")
            if date in rows[ticker]:
                raise DataError(f"{where}: duplicate row for {ticker} on {date}")
            rows[ticker][date] = [_parse_price(row[col[c]], where, c) for c in CHANNELS]
    out = {}
    for ticker in sorted(rows):
        dates = sorted(rows[ticker])
        mat = np.array([rows[ticker][d] for d in dates], dtype=np.float64)
        for j in range(mat.shape[1]):
            for i in range(1, mat.shape[0]):
                if math.isnan(mat[i, j]):
                    mat[i, j] = mat[i - 1, j]
        complete = ~np.isnan(mat).any(axis=1)
        if not complete.any():
            log.warning("%s: no complete rows, ticker skipped", ticker)
            continue
        first = int(np.argmax(complete))
        out[ticker] = AlignedSeries(ticker, dates[first:], mat[first:])
    return out


def realized_after(series: AlignedSeries, date: dt.date, n: int) -> tuple[float, ...] | None:
    """Closes of the ``n`` trading days strictly after ``date``, if all exist."""
    i = series.index_of(date)
    if i is None or i + n >= len(series):
        return None
    return tuple(float(x) for x in series.close[i + 1:i + 1 + n])


def ingest_events(path, series: dict[str, AlignedSeries], cfg: QuantConfig | None = None
                  ) -> tuple[list[EventRecord], list[Rejection]]:
    """Read events JSONL and validate each against the loaded price series.

    Syntax and schema problems raise; events whose ticker or date is not in
    the price data are returned as rejections.
    """
    cfg = cfg or QuantConfig()
    records: list[EventRecord] = []
    rejected: list[Rejection] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{where}: expected a JSON object")
            for key in ("ticker", "date", "text"):
                if not isinstance(obj.get(key), str):
                    raise DataError(f"{where}: missing or non-string field {key!r}")
            extra = set(obj) - {"ticker", "date", "text", "labels"}
            if extra:
                raise DataError(f"{where}: unknown field(s) {sorted(extra)}")
            date = _parse_date(obj["date"], where)
            labels = None
            if obj.get("labels") is not None:
                try:
                    labels = parse_tokens(obj["labels"], cfg)
                except LabelParseError as exc:
                    raise LabelParseError(f"{where}: {exc}", exc.position) from exc
            s = series.get(obj["ticker"])
            if s is None:
                rejected.append(Rejection(lineno, obj["ticker"], obj["date"], "unknown ticker"))
                continue
            if s.index_of(date) is None:
                rejected.append(Rejection(lineno, obj["ticker"], obj["date"], "not a trading day"))
                continue
            records.append(EventRecord(obj["ticker"], date, obj["text"], labels,
                                       realized_after(s, date, cfg.n)))
    return records, rejected


def ingest_cap_buckets(path, thresholds: CapThresholds | None = None) -> dict[str, CapBucket]:
    """Ticker metadata CSV with header ``ticker,market_cap``."""
    thresholds = thresholds or CapThresholds()
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"ticker", "market_cap"}:
            raise DataError(f"{path}: header must be ticker,market_cap")
        for lineno, row in enumerate(reader, start=2):
            try:
                cap = float(row["market_cap"])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad market_cap {row['market_cap']!r}") from exc
            out[row["ticker"]] = thresholds.bucket(cap)
    return out


def write_prices(series: dict[str, AlignedSeries], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRICE_COLUMNS)
        for ticker in sorted(series):
            s = series[ticker]
            for d, row in zip(s.dates, s.channels):
                w.writerow([d.isoformat(), ticker] + [repr(float(x)) for x in row])


def write_events(events, path) -> None:
    from evamp.labels import render_tokens

    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            obj = {"ticker": e.ticker, "date": e.date.isoformat(), "text": e.text}
            if e.labels is not None:
                obj["labels"] = render_tokens(e.labels)
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def write_cap_metadata(caps: dict[str, float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ticker", "market_cap"])
        for ticker in sorted(caps):
            w.writerow([ticker, repr(float(caps[ticker]))])


def cap_buckets_or_default(path: Path | None, tickers, thresholds: CapThresholds | None = None
                           ) -> dict[str, CapBucket | None]:
    """Cap bucket per ticker; without metadata every ticker shares one bucket (None)."""
    if path is None:
        return {t: None for t in tickers}
    found = ingest_cap_buckets(path, thresholds)
    return {t: found.get(t) for t in tickers}
