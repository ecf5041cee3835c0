"""Update heads over a frozen forecaster: TimeS, TimeL and SentiEvent."""
from __future__ import annotations

import dataclasses

import numpy as np

from evamp.errors import ConfigError, DataError
from evamp.heads.common import (
    FALLBACK_BUCKETS, EventBatch, FitResult, ForecastBundle, HeadConfig, HeadTrainConfig, StockTable,
    UpdateParams, amplification, direction_probs, fallback_bucket, fit, make_bundles,
    prepare_events, resolve_labels, update_prices,
)
from evamp.heads.sentievent import PrecomputedEncoder, SentiEventHead, tokenize, token_buckets
from evamp.heads.timel import TimelHead, labels_to_amplification
from evamp.heads.times import TimesHead
from evamp.indicators import IndicatorProvider
from evamp.ndcore.layers import load_into
from evamp.ndcore.serialize import dumps_params, load_params, save_params

HEADS = {"times": TimesHead, "timel": TimelHead, "sentievent": SentiEventHead}


def create_head(cfg: HeadConfig, tickers, seed, encoder: PrecomputedEncoder | None = None):
    if cfg.kind == "sentievent":
        return SentiEventHead(cfg, tickers, seed, encoder)
    if encoder is not None:
        raise ConfigError("precomputed text embeddings only apply to the sentievent head")
    return HEADS[cfg.kind](cfg, tickers, seed)


def head_inputs(head, batch: EventBatch, provider: IndicatorProvider | None, skip_missing: bool = False
                ) -> tuple[EventBatch, object]:
    """What the head consumes per event. SentiEvent reads text and never asks the provider."""
    if head.kind == "sentievent":
        return batch, head.encode(batch.events)
    if provider is None:
        raise ConfigError(f"the {head.kind} head needs a label provider")
    batch, labels = resolve_labels(batch, provider, skip_missing)
    return batch, head.encode(labels)


def _take(inputs, idx):
    if isinstance(inputs, np.ndarray):
        return inputs[idx]
    return [inputs[i] for i in idx]


def train_head(head, batch: EventBatch, provider: IndicatorProvider | None, cfg: HeadTrainConfig,
               skip_missing: bool = False, val: EventBatch | None = None) -> FitResult:
    """Fit the head in place on ``batch``; the forecaster outputs in ``batch`` are fixed data.

    ``val`` events, when given, only pick which epoch's parameters are kept.
    """
    batch, inputs = head_inputs(head, batch, provider, skip_missing)
    val_forward = val_truth = None
    if val is not None and len(val):
        val, val_inputs = head_inputs(head, val, provider, skip_missing)
        val_tickers = [e.ticker for e in val.events]
        val_truth = val.truth

        def val_forward(idx):
            return head.forward([val_tickers[i] for i in idx], _take(val_inputs, idx), val.baseline[idx])[0]

    tickers = [e.ticker for e in batch.events]

    def forward(idx):
        return head.forward([tickers[i] for i in idx], _take(inputs, idx), batch.baseline[idx])[0]

    return fit(forward, head.parameters(), len(batch), batch.truth, cfg, val_forward, val_truth)


def infer_head(head, batch: EventBatch, provider: IndicatorProvider | None, skip_missing: bool = False
               ) -> list[ForecastBundle]:
    batch, inputs = head_inputs(head, batch, provider, skip_missing)
    if len(batch) == 0:
        return []
    updated, amp = head.forward([e.ticker for e in batch.events], inputs, batch.baseline)
    return make_bundles(batch, amp.data, updated.data)


def baseline_bundles(batch: EventBatch) -> list[ForecastBundle]:
    """Bundles whose update is the identity, for scoring the bare forecaster."""
    zeros = np.zeros_like(batch.baseline)
    return make_bundles(batch, zeros, batch.baseline)


def _meta(head) -> dict:
    tickers = list(getattr(head.params, "stock").tickers) if hasattr(head.params, "stock") else []
    return {"head": dataclasses.asdict(head.cfg), "tickers": tickers,
            "precomputed_text": getattr(head, "encoder", None) is not None}


def head_to_bytes(head) -> bytes:
    return dumps_params(head.parameters(), _meta(head))


def save_head(head, path) -> None:
    save_params(head.parameters(), path, _meta(head))


def load_head(path, encoder: PrecomputedEncoder | None = None):
    arrays, meta = load_params(path)
    try:
        cfg = HeadConfig(**meta["head"])
        tickers = meta["tickers"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a head file ({exc})") from exc
    if meta.get("precomputed_text") and encoder is None:
        raise ConfigError(f"{path} was trained on precomputed text embeddings; supply them to load it")
    head = create_head(cfg, tickers, 0, encoder if meta.get("precomputed_text") else None)
    params = head.parameters()
    if set(params) != set(arrays):
        raise DataError(f"{path}: parameter names do not match a {cfg.kind} head")
    load_into(params, arrays)
    return head
