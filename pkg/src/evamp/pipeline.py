"""Experiment plumbing behind the command line: data, forecasters, heads, reports.

Everything lives under one output directory::

    data/prices.csv, data/events.jsonl, data/caps.csv
    forecasters/<model>/<ticker>.bin, forecasters/<model>/loss.csv
    heads/<model>/<head>/<provider>.bin, ...loss.csv
    reports/<model>-<head>-<provider>.json / .csv
    comparison.csv

``model``, ``head`` and ``provider`` may each list several values; commands
then cover every combination.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from evamp.config import build_dataclass, bundled_preset, dump_dataclass, load_dataclass, parse_kv_text
from evamp.errors import ConfigError, DataError
from evamp.evalkit import (
    MetricRow, emit_report, label_report, micro_f1, price_metrics, price_report,
    value_match_f1,
)
from evamp.forecasters import Forecaster, ForecasterConfig, TrainConfig, load_forecaster, save_forecaster, train_forecaster
from evamp.heads import (
    HeadConfig, HeadTrainConfig, PrecomputedEncoder, baseline_bundles, create_head, infer_head, load_head,
    prepare_events, save_head, train_head,
)
from evamp.indicators import LabelLookupError, OracleProvider, make_provider
from evamp.labels import QuantConfig
from evamp.market import (
    CapBucket, cap_buckets_or_default, ingest_events, ingest_prices, load_scenario, make_windows,
    split_by_ticker, synth_market, write_cap_metadata, write_events, write_prices,
)

log = logging.getLogger(__name__)

MODELS = ("dlinear", "patchtst")
HEAD_KINDS = ("times", "timel", "sentievent")
COMPARISON_COLUMNS = ("model", "head", "provider", "events", "baseline_rmse", "baseline_mae", "rmse", "mae",
                      "mae_reduction", "direction_f1", "value_f1_w5")


def _words(text: str) -> tuple[str, ...]:
    return tuple(w for w in re.split(r"[;\s]+", text.strip()) if w)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment; every field is a key in a config file.

    ``model``, ``head`` and ``provider`` take several values separated by
    spaces or semicolons. ``train_labels`` picks the labels heads learn
    from: ``oracle`` (gold) or ``provider`` (the evaluated provider itself).
    """

    scenario: str = "standard"
    prices: Path | None = None
    events: Path | None = None
    caps: Path | None = None
    model: str = "dlinear"
    head: str = "times"
    provider: str = "oracle"
    train_labels: str = "oracle"
    skip_missing: bool = False
    precomputed_text: Path | None = None
    seed: int = 1
    n: int = 9
    interval: float = 0.3
    lookback: int = 30
    horizon: int = 20
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    ts_lr: float = 1e-4
    ts_epochs: int = 50
    ts_batch: int = 32
    kernel: int = 25
    patch: int = 5
    depth: int = 2
    width: int = 64
    attn_heads: int = 4
    ffn: int = 128
    head_lr: float = 1e-2
    head_epochs: int = 100
    head_batch: int = 16
    alpha: float = 1.0
    hidden: int = 32
    label_dim: int = 16
    text_dim: int = 32
    text_heads: int = 4
    out: Path = Path("runs/default")

    def __post_init__(self):
        for m in self.models:
            if m not in MODELS:
                raise ConfigError(f"model must be one of {MODELS}, got {m!r}")
        for h in self.heads:
            if h not in HEAD_KINDS:
                raise ConfigError(f"head must be one of {HEAD_KINDS}, got {h!r}")
        if not self.models or not self.heads or not self.providers:
            raise ConfigError("model, head and provider each need at least one value")
        if self.train_labels not in ("oracle", "provider"):
            raise ConfigError(f"train_labels must be oracle or provider, got {self.train_labels!r}")
        if (self.events is None) != (self.prices is None):
            raise ConfigError("prices and events files must be given together")
        if len(self.split) != 3:
            raise ConfigError(f"split needs three ratios, got {self.split}")
        # fail on a bad head/forecaster setting before any work starts
        self.head_config("times")
        for m in self.models:
            self.forecaster_config(m)

    @property
    def models(self) -> tuple[str, ...]:
        return _words(self.model)

    @property
    def heads(self) -> tuple[str, ...]:
        return _words(self.head)

    @property
    def providers(self) -> tuple[str, ...]:
        return _words(self.provider)

    @property
    def quant(self) -> QuantConfig:
        return QuantConfig(interval=self.interval, n=self.n)

    def forecaster_config(self, kind: str) -> ForecasterConfig:
        return ForecasterConfig(kind=kind, lookback=self.lookback, horizon=self.horizon, kernel=self.kernel,
                                patch=self.patch, depth=self.depth, width=self.width, heads=self.attn_heads,
                                ffn=self.ffn)

    def head_config(self, kind: str) -> HeadConfig:
        return HeadConfig(kind=kind, n=self.n, interval=self.interval, alpha=self.alpha, hidden=self.hidden,
                          label_dim=self.label_dim, text_dim=self.text_dim, text_heads=self.text_heads)


def load_experiment(spec: str | None, overrides: dict | None = None) -> ExperimentConfig:
    """A bundled preset name or a config path, then ``overrides`` (already typed) on top."""
    if spec is None:
        base = ExperimentConfig()
    else:
        text = bundled_preset(f"experiment-{spec}")
        if text is not None:
            base = build_dataclass(ExperimentConfig, parse_kv_text(text, spec), spec)
        elif Path(spec).is_file():
            base = load_dataclass(ExperimentConfig, spec)
        else:
            raise ConfigError(f"{spec!r} is neither a bundled preset nor a config file")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    return dataclasses.replace(base, **overrides) if overrides else base


def slug(spec: str) -> str:
    return re.sub(r"[^A-Za-z0-9.]+", "-", spec).strip("-")


def ticker_seed(seed: int, ticker: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(ticker.encode("utf-8"))])


# ---- data ------------------------------------------------------------------------

@dataclass
class Dataset:
    series: dict
    train: list
    val: list
    test: list
    caps: dict


def data_paths(cfg: ExperimentConfig) -> tuple[Path, Path, Path | None]:
    if cfg.prices is not None:
        return Path(cfg.prices), Path(cfg.events), None if cfg.caps is None else Path(cfg.caps)
    d = Path(cfg.out) / "data"
    caps = d / "caps.csv"
    return d / "prices.csv", d / "events.jsonl", caps if caps.is_file() else None


def generate(cfg: ExperimentConfig) -> Path:
    """Write the configured synthetic scenario into ``out/data``."""
    sc = load_scenario(cfg.scenario)
    if sc.n != cfg.n or sc.interval != cfg.interval:
        raise ConfigError(f"scenario n/interval ({sc.n}, {sc.interval}) disagree with the experiment "
                          f"({cfg.n}, {cfg.interval})")
    market = synth_market(sc, cfg.seed)
    d = Path(cfg.out) / "data"
    d.mkdir(parents=True, exist_ok=True)
    write_prices(market.series, d / "prices.csv")
    write_events(market.events, d / "events.jsonl")
    write_cap_metadata(market.market_caps, d / "caps.csv")
    return d


def load_data(cfg: ExperimentConfig) -> Dataset:
    prices, events, caps = data_paths(cfg)
    for p in (prices, events) + ((caps,) if caps is not None else ()):
        if not p.is_file():
            raise ConfigError(f"data file {p} does not exist (run gen first, or set prices/events)")
    series = ingest_prices(prices)
    records, rejected = ingest_events(events, series, cfg.quant)
    for r in rejected:
        log.warning("%s line %d (%s %s) rejected: %s", events, r.line, r.ticker, r.date, r.reason)
    train, val, test = split_by_ticker(records, tuple(cfg.split), seed=cfg.seed)
    return Dataset(series, train, val, test, cap_buckets_or_default(caps, series))


# ---- forecasters -------------------------------------------------------------------

def forecaster_dir(cfg: ExperimentConfig, model: str) -> Path:
    return Path(cfg.out) / "forecasters" / model


def train_forecasters(cfg: ExperimentConfig, data: Dataset, model: str) -> dict[str, Forecaster]:
    """One forecaster per ticker, each seeded from (seed, ticker) and trained on all its windows."""
    fcfg = cfg.forecaster_config(model)
    tcfg = TrainConfig(lr=cfg.ts_lr, epochs=cfg.ts_epochs, batch=cfg.ts_batch, seed=cfg.seed)
    d = forecaster_dir(cfg, model)
    d.mkdir(parents=True, exist_ok=True)
    out, curves = {}, []
    for ticker in sorted(data.series):
        windows = make_windows(data.series[ticker], fcfg.lookback, fcfg.horizon)
        if not windows:
            log.warning("%s: too short to train a forecaster", ticker)
            continue
        f = Forecaster.init(fcfg, ticker_seed(cfg.seed, ticker))
        curve = train_forecaster(f, windows, tcfg)
        curves.extend((ticker, i + 1, v) for i, v in enumerate(curve))
        save_forecaster(f, d / f"{ticker}.bin")
        out[ticker] = f
        log.info("%s %s: final loss %.6g", model, ticker, curve[-1] if curve else float("nan"))
    _write_csv(d / "loss.csv", ("ticker", "epoch", "loss"), curves)
    return out


def load_forecasters(cfg: ExperimentConfig, data: Dataset, model: str) -> dict[str, Forecaster]:
    d = forecaster_dir(cfg, model)
    if not d.is_dir():
        raise ConfigError(f"no trained {model} forecasters in {d} (run train-ts first)")
    out = {}
    for ticker in sorted(data.series):
        path = d / f"{ticker}.bin"
        if path.is_file():
            out[ticker] = load_forecaster(path)
    if not out:
        raise ConfigError(f"no trained {model} forecasters in {d}")
    return out


# ---- heads -------------------------------------------------------------------------

def head_path(cfg: ExperimentConfig, model: str, head: str, provider: str) -> Path:
    return Path(cfg.out) / "heads" / model / head / f"{slug(provider)}.bin"


def _encoder(cfg: ExperimentConfig, head: str):
    if head != "sentievent" or cfg.precomputed_text is None:
        return None
    return PrecomputedEncoder.from_jsonl(cfg.precomputed_text)


def _provider(cfg: ExperimentConfig, spec: str):
    return make_provider(spec, cfg.quant, cfg.seed)


def train_one_head(cfg: ExperimentConfig, data: Dataset, forecasters, model: str, head: str, provider: str):
    hcfg = cfg.head_config(head)
    labels = OracleProvider(cfg.quant) if cfg.train_labels == "oracle" else _provider(cfg, provider)
    btr = prepare_events(data.train, forecasters, data.series, cfg.n)
    bva = prepare_events(data.val, forecasters, data.series, cfg.n)
    h = create_head(hcfg, [e.ticker for e in btr.events], cfg.seed, _encoder(cfg, head))
    tcfg = HeadTrainConfig(lr=cfg.head_lr, epochs=cfg.head_epochs, batch=cfg.head_batch, seed=cfg.seed)
    result = train_head(h, btr, labels, tcfg, cfg.skip_missing, val=bva)
    path = head_path(cfg, model, head, provider)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_head(h, path)
    rows = [(i + 1, v, result.val_loss[i] if i < len(result.val_loss) else "")
            for i, v in enumerate(result.train_loss)]
    _write_csv(path.with_suffix(".loss.csv"), ("epoch", "train_loss", "val_loss"), rows)
    log.info("%s/%s/%s: kept epoch %d", model, head, provider, result.best_epoch)
    return h, result


# ---- evaluation --------------------------------------------------------------------

def _label_pairs(events, provider, skip_missing):
    gold_provider = OracleProvider(provider.cfg)
    pred, gold = [], []
    for e in events:
        if e.realized is None:
            continue
        try:
            p = provider(e)
        except LabelLookupError:
            if not skip_missing:
                raise
            continue
        pred.extend(p.window_labels)
        gold.extend(gold_provider(e).window_labels)
    return pred, gold


def evaluate_cell(cfg: ExperimentConfig, data: Dataset, forecasters, model: str, head: str, provider: str,
                  trained=None) -> tuple[list[MetricRow], dict]:
    """Report rows for one (model, head, provider) cell plus its comparison-table entry."""
    h = trained if trained is not None else _load_head(cfg, model, head, provider)
    prov = _provider(cfg, provider)
    setting = f"{model}+{head}"
    bucket_names = [b.value for b in CapBucket]
    rows: list[MetricRow] = []
    summary = None
    for split, events in (("val", data.val), ("test", data.test)):
        batch = prepare_events(events, forecasters, data.series, cfg.n)
        if len(batch) == 0:
            log.warning("%s split has no usable events", split)
            continue
        base = baseline_bundles(batch)
        upd = infer_head(h, batch, prov, cfg.skip_missing)
        for units in ("normalized", "currency"):
            rows += price_report(base, model, split, "baseline", units, data.caps, bucket_names)
            rows += price_report(upd, setting, split, "updated", units, data.caps, bucket_names)
        if split == "test":
            summary = (price_metrics(base), price_metrics(upd), len(upd))
    pred, gold = _label_pairs(data.test, prov, cfg.skip_missing)
    if pred:
        rows += label_report(pred, gold, f"provider:{provider}", "test")
    if summary is None:
        raise DataError("the test split has no usable events")
    b, u, count = summary
    entry = {"model": model, "head": head, "provider": provider, "events": count,
             "baseline_rmse": b.rmse, "baseline_mae": b.mae, "rmse": u.rmse, "mae": u.mae,
             "mae_reduction": 1.0 - u.mae / b.mae if b.mae else None,
             "direction_f1": micro_f1(pred, gold).value if pred else None,
             "value_f1_w5": value_match_f1(pred, gold, 5).value if pred else None}
    return rows, entry


def _load_head(cfg, model, head, provider):
    path = head_path(cfg, model, head, provider)
    if not path.is_file():
        raise ConfigError(f"no trained head at {path} (run train-head first)")
    return load_head(path, _encoder(cfg, head))


def write_cell_report(cfg: ExperimentConfig, model, head, provider, rows) -> tuple[Path, Path]:
    meta = {"model": model, "head": head, "provider": provider, "seed": cfg.seed, "n": cfg.n,
            "interval": cfg.interval, "train_labels": cfg.train_labels}
    return emit_report(rows, Path(cfg.out) / "reports", f"{model}-{head}-{slug(provider)}", meta)


def write_comparison(cfg: ExperimentConfig, entries: list[dict]) -> Path:
    path = Path(cfg.out) / "comparison.csv"
    rows = [[_cell(e[c]) for c in COMPARISON_COLUMNS] for e in entries]
    _write_csv(path, COMPARISON_COLUMNS, rows)
    return path


def _cell(v):
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


def cells(cfg: ExperimentConfig):
    for model in cfg.models:
        for head in cfg.heads:
            for provider in cfg.providers:
                yield model, head, provider


def save_resolved_config(cfg: ExperimentConfig) -> Path:
    """The effective config, so a run can be repeated from its output directory."""
    path = Path(cfg.out) / "experiment.cfg"
    path.write_text(dump_dataclass(cfg), encoding="utf-8")
    return path

