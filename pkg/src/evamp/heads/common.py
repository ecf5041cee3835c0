"""Pieces shared by every update head.

All heads end in the same linear update of the frozen forecaster's
normalized n-step prediction ``P``::

    P' = W_u @ [alpha * A, P] + b

and differ only in how the amplification vector ``A`` is produced.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from evamp.errors import ConfigError, ContractError, DataError, DimensionError, NumericalError
from evamp.forecasters import Forecaster, event_window
from evamp.indicators import IndicatorProvider, LabelLookupError
from evamp.labels import LabelSequence
from evamp.market.types import AlignedSeries, EventRecord
from evamp.ndcore import tensor as T
from evamp.ndcore.layers import EmbeddingParams, embed, forward_linear, zeros
from evamp.ndcore.optim import Adam
from evamp.ndcore.tensor import Tape, Tensor, parameter

log = logging.getLogger(__name__)

FALLBACK_BUCKETS = 8


@dataclass
class ForecastBundle:
    """One evaluated event; prices in the forecaster's normalized units.

    ``shift`` and ``scale`` convert back to currency: ``x * scale + shift``.
    """

    ticker: str
    key: str
    baseline: np.ndarray
    amplification: np.ndarray
    updated: np.ndarray
    truth: np.ndarray
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        n = len(self.baseline)
        if not (len(self.amplification) == len(self.updated) == len(self.truth) == n):
            raise DimensionError(f"{self.key}: bundle vectors differ in length")
        if np.any(np.abs(self.amplification) > 1.0):
            raise ContractError(f"{self.key}: amplification outside [-1, 1]")

    def currency(self, which: str) -> np.ndarray:
        return np.asarray(getattr(self, which)) * self.scale + self.shift


# ---- the shared update ------------------------------------------------------------

@dataclass
class UpdateParams:
    w: Tensor  # [n, 2n]; left block multiplies alpha*A, right block multiplies P
    b: Tensor  # [n]

    @classmethod
    def identity(cls, n: int) -> "UpdateParams":
        """``[0 | I]`` with zero bias: the update starts out returning ``P``."""
        return cls(parameter(np.hstack([np.zeros((n, n)), np.eye(n)])), zeros((n,)))

    @property
    def n(self) -> int:
        return self.b.shape[0]


def update_prices(p: UpdateParams, A, P, alpha: float) -> Tensor:
    A, P = T.as_tensor(A), T.as_tensor(P)
    if A.shape != P.shape or A.shape[-1] != p.n:
        raise DimensionError(f"update: A {A.shape} and P {P.shape} must both end in n={p.n}")
    return forward_linear(T.concat([A * float(alpha), P], axis=-1), p.w, p.b)


def direction_probs(w_a, states) -> Tensor:
    """Softmax over (increase, neutral, decrease) of ``W_a @ S``; no bias."""
    return T.softmax(forward_linear(states, w_a), axis=-1)


def amplification(probs) -> Tensor:
    """Expected direction ``P(increase) - P(decrease)``."""
    probs = T.as_tensor(probs)
    return probs[..., 0] - probs[..., 2]


# ---- stock embeddings ------------------------------------------------------------

def fallback_bucket(ticker: str, buckets: int = FALLBACK_BUCKETS) -> int:
    return zlib.crc32(ticker.encode("utf-8")) % buckets


@dataclass
class StockTable:
    """Known tickers get their own row; anything else hashes into a fallback row.

    Rows start at zero, so an unseen ticker begins from the same neutral
    state every ticker had before training.
    """

    tickers: tuple[str, ...]
    emb: EmbeddingParams
    buckets: int = FALLBACK_BUCKETS

    @classmethod
    def init(cls, tickers, dim: int, buckets: int = FALLBACK_BUCKETS) -> "StockTable":
        tickers = tuple(sorted(set(tickers)))
        return cls(tickers, EmbeddingParams(zeros((len(tickers) + buckets, dim))), buckets)

    def __post_init__(self):
        self._rows = {t: i for i, t in enumerate(self.tickers)}

    def row(self, ticker: str) -> int:
        i = self._rows.get(ticker)
        return i if i is not None else len(self.tickers) + fallback_bucket(ticker, self.buckets)

    def lookup(self, tickers) -> Tensor:
        return embed(self.emb, np.array([self.row(t) for t in tickers], dtype=np.int64))


# ---- event preparation -----------------------------------------------------------

@dataclass
class EventBatch:
    """Frozen-forecaster outputs for a set of events, all ``[E, n]``."""

    events: list[EventRecord]
    baseline: np.ndarray
    truth: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.events)

    def subset(self, idx) -> "EventBatch":
        idx = list(idx)
        return EventBatch([self.events[i] for i in idx], self.baseline[idx], self.truth[idx],
                          self.shift[idx], self.scale[idx])


def prepare_events(events, forecasters: dict[str, Forecaster], series: dict[str, AlignedSeries],
                   n: int) -> EventBatch:
    """Run each ticker's frozen forecaster on its events.

    Events lacking realized prices, a forecaster, or enough history are
    skipped and listed in ``skipped``.
    """
    for model in forecasters.values():
        if n > model.cfg.horizon:
            raise ConfigError(f"n={n} exceeds forecaster horizon {model.cfg.horizon}")
    kept, base, truth, shift, scale, skipped = [], [], [], [], [], []
    for e in events:
        model = forecasters.get(e.ticker)
        if e.realized is None or len(e.realized) < n:
            skipped.append((e.key, "no realized prices"))
            continue
        if model is None or e.ticker not in series:
            skipped.append((e.key, "no forecaster"))
            continue
        try:
            window = event_window(series[e.ticker], e.date, model.cfg.lookback)
        except DataError as exc:
            skipped.append((e.key, str(exc)))
            continue
        pred, stats = model.predict_normalized(window)
        kept.append(e)
        base.append(pred[:n])
        truth.append(stats.normalize_close(np.asarray(e.realized[:n], dtype=np.float64)))
        shift.append(float(stats.shift[0]))
        scale.append(float(stats.scale[0]))
    if skipped:
        log.info("skipped %d of %d events", len(skipped), len(kept) + len(skipped))
    empty = np.zeros((0, n))
    return EventBatch(kept, np.array(base) if base else empty, np.array(truth) if truth else empty,
                      np.array(shift), np.array(scale), skipped)


def resolve_labels(batch: EventBatch, provider: IndicatorProvider, skip_missing: bool = False
                   ) -> tuple[EventBatch, list[LabelSequence]]:
    """Ask the provider for every event; lookup misses are dropped if ``skip_missing``."""
    keep, labels = [], []
    for i, e in enumerate(batch.events):
        try:
            labels.append(provider(e))
        except LabelLookupError:
            if not skip_missing:
                raise
            batch.skipped.append((e.key, "no provider labels"))
            continue
        keep.append(i)
    out = batch.subset(keep) if len(keep) != len(batch) else batch
    out.skipped = batch.skipped
    return out, labels


# ---- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class HeadTrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    batch: int = 16
    seed: int = 0
    # keep the parameters of the epoch with the lowest validation loss
    select_on_val: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ConfigError(f"bad head training settings: {self}")


@dataclass
class FitResult:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int  # 1-based; 0 means the initial parameters were kept

    def __iter__(self):  # lets callers treat the result as the training curve
        return iter(self.train_loss)

    def __len__(self) -> int:
        return len(self.train_loss)

    def __getitem__(self, i):
        return self.train_loss[i]


def _mse_value(forward, idx, truth) -> float:
    return float(np.mean((forward(idx).data - truth) ** 2))


def fit(forward, params: dict[str, Tensor], n_items: int, truth: np.ndarray, cfg: HeadTrainConfig,
        val_forward=None, val_truth: np.ndarray | None = None) -> FitResult:
    """Minibatch Adam on mean squared error; ``forward(idx)`` returns ``P'`` for those items.

    With ``val_forward`` and ``cfg.select_on_val`` the parameters from the
    epoch with the lowest validation MSE (the initial ones included) are
    restored at the end.
    """
    if n_items == 0:
        raise DataError("no usable events to train on")
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    use_val = val_forward is not None and val_truth is not None and len(val_truth) > 0
    val_idx = np.arange(len(val_truth)) if use_val else None
    train_curve, val_curve = [], []
    best, best_epoch, snapshot = np.inf, 0, None
    if use_val and cfg.select_on_val:
        best = _mse_value(val_forward, val_idx, val_truth)
        snapshot = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_items)
        total = 0.0
        for start in range(0, n_items, cfg.batch):
            idx = order[start:start + cfg.batch]
            with Tape():
                loss = T.mse(forward(idx), truth[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite head loss {value} at epoch {epoch + 1}")
                opt.zero_grad()
                T.backward(loss)
            opt.step()
            total += value * len(idx)
        train_curve.append(total / n_items)
        if use_val:
            v = _mse_value(val_forward, val_idx, val_truth)
            val_curve.append(v)
            if cfg.select_on_val and v < best:
                best, best_epoch = v, epoch + 1
                snapshot = {k: p.data.copy() for k, p in params.items()}
    if snapshot is not None:
        for k, p in params.items():
            p.data = snapshot[k]
    else:
        best_epoch = cfg.epochs
    return FitResult(train_curve, val_curve, best_epoch)


def make_bundles(batch: EventBatch, amp: np.ndarray, updated: np.ndarray) -> list[ForecastBundle]:
    return [ForecastBundle(e.ticker, e.key, batch.baseline[i].copy(), amp[i].copy(), updated[i].copy(),
                           batch.truth[i].copy(), float(batch.shift[i]), float(batch.scale[i]))
            for i, e in enumerate(batch.events)]



@dataclass(frozen=True)
class HeadConfig:
    kind: str = "times"
    n: int = 9
    interval: float = 0.3
    magnitude_cap: int = 100
    alpha: float = 1.0
    hidden: int = 32
    label_dim: int = 16
    text_dim: int = 32
    text_heads: int = 4
    text_buckets: int = 16384
    fallback_buckets: int = FALLBACK_BUCKETS

    def __post_init__(self):
        if self.kind not in ("times", "timel", "sentievent"):
            raise ConfigError(f"head must be times, timel or sentievent, got {self.kind!r}")
        if not self.alpha >= 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.n < 1 or self.hidden < 1 or self.label_dim < 1 or self.text_dim < 1:
            raise ConfigError("head dimensions must be positive")
        if self.text_dim % self.text_heads:
            raise ConfigError(f"text_dim {self.text_dim} not divisible by {self.text_heads} heads")

    @property
    def quant(self):
        from evamp.labels import QuantConfig
        return QuantConfig(interval=self.interval, n=self.n, magnitude_cap=self.magnitude_cap)
