"""Per-ticker price forecasters: DLinear+W and PatchTST+W.

Both read a ``[lookback, 3]`` window (stock close, NASDAQ, dollar index),
standardized per channel by the window's own mean and std, and emit a
``horizon``-long prediction of the stock close in the same normalized units.
Each channel is processed independently; the per-channel outputs are
concatenated and mixed by a final projection ``W``.
"""
from __future__ import annotations

import dataclasses
import datetime as dt
import logging
from dataclasses import dataclass, field

import numpy as np

from evamp.errors import ConfigError, DataError, DimensionError, NumericalError
from evamp.market.types import AlignedSeries, WindowSample
from evamp.ndcore import tensor as T
from evamp.ndcore.layers import (
    AttentionParams, LayerNormParams, LinearParams, layer_norm, linear, load_into,
    multi_head_attention, named_parameters, uniform_init, zeros,
)
from evamp.ndcore.optim import Adam
from evamp.ndcore.serialize import dumps_params, load_params, loads_params, save_params
from evamp.ndcore.tensor import Tape, Tensor

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class ForecasterConfig:
    kind: str = "dlinear"
    lookback: int = 30
    horizon: int = 20
    channels: int = 3
    kernel: int = 25
    patch: int = 5
    stride: int = 0  # 0 means "same as patch"
    depth: int = 2
    width: int = 64
    heads: int = 4
    ffn: int = 128

    def __post_init__(self):
        if self.kind not in ("dlinear", "patchtst"):
            raise ConfigError(f"model must be dlinear or patchtst, got {self.kind!r}")
        if self.lookback < 1 or self.horizon < 1 or self.channels < 1:
            raise ConfigError("lookback, horizon and channels must be positive")
        if self.kind == "patchtst":
            if not 1 <= self.patch <= self.lookback or self.patch_stride < 1 \
                    or (self.lookback - self.patch) % self.patch_stride:
                raise ConfigError(f"invalid patch grid: lookback={self.lookback} patch={self.patch} "
                                  f"stride={self.patch_stride}")
            if self.width % self.heads:
                raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def patch_stride(self) -> int:
        return self.stride or self.patch

    @property
    def n_patches(self) -> int:
        return (self.lookback - self.patch) // self.patch_stride + 1

    @property
    def ma_kernel(self) -> int:
        k = max(1, min(self.kernel, self.lookback))
        return k if k % 2 else k - 1


# ---- normalization ------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    shift: np.ndarray  # [C]
    scale: np.ndarray  # [C], > 0

    @classmethod
    def fit(cls, source: np.ndarray) -> "NormStats":
        source = np.asarray(source, dtype=np.float64)
        return cls(source.mean(axis=-2), np.maximum(source.std(axis=-2), SCALE_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.shift[..., None, :]) / self.scale[..., None, :]

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.scale[..., None, :] + self.shift[..., None, :]

    def normalize_close(self, y: np.ndarray) -> np.ndarray:
        return (y - self.shift[..., :1]) / self.scale[..., :1]

    def denormalize_close(self, z: np.ndarray) -> np.ndarray:
        return z * self.scale[..., :1] + self.shift[..., :1]


# ---- DLinear+W ------------------------------------------------------------------

def moving_average_matrix(length: int, kernel: int) -> np.ndarray:
    """``M`` with ``M @ x`` the edge-replicated centered moving average of ``x``."""
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigError(f"moving-average kernel must be odd and >= 1, got {kernel}")
    half = (kernel - 1) // 2
    M = np.zeros((length, length))
    for i in range(length):
        for j in range(i - half, i + half + 1):
            M[i, min(max(j, 0), length - 1)] += 1.0 / kernel
    return M


def decompose(source: np.ndarray, kernel: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``[.., L, C]`` into trend and remainder along the time axis."""
    M = moving_average_matrix(source.shape[-2], kernel)
    trend = M @ source
    return trend, source - trend


@dataclass
class DLinearWParams:
    trend_w: Tensor   # [C, H, L]
    trend_b: Tensor   # [C, H]
    remain_w: Tensor  # [C, H, L]
    remain_b: Tensor  # [C, H]
    proj: LinearParams  # [H, C*H]

    @classmethod
    def init(cls, rng, cfg: ForecasterConfig) -> "DLinearWParams":
        C, H, L = cfg.channels, cfg.horizon, cfg.lookback
        return cls(uniform_init(rng, (C, H, L), L), zeros((C, H)), uniform_init(rng, (C, H, L), L),
                   zeros((C, H)), LinearParams.init(rng, C * H, H))


def _per_channel(x: np.ndarray | Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x [B, C, K]`` through channel-specific maps ``w [C, H, K]`` -> ``[B, C, H]``."""
    xc = T.transpose(T.as_tensor(x), (1, 0, 2))            # [C, B, K]
    y = T.matmul(xc, T.transpose(w, (0, 2, 1)))            # [C, B, H]
    y = y + T.reshape(b, (b.shape[0], 1, b.shape[1]))
    return T.transpose(y, (1, 0, 2))


def _project(p: LinearParams, per_channel: Tensor) -> Tensor:
    B, C, H = per_channel.shape
    return linear(p, T.reshape(per_channel, (B, C * H)))


def dlinear_forward(params: DLinearWParams, source, cfg: ForecasterConfig) -> Tensor:
    """Normalized ``[B, L, C]`` (or ``[L, C]``) -> ``[B, H]`` (or ``[H]``)."""
    x = np.asarray(source, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.lookback, cfg.channels):
        raise DimensionError(f"dlinear expects [.., {cfg.lookback}, {cfg.channels}], got {np.shape(source)}")
    trend, remain = decompose(x, cfg.ma_kernel)
    out = _per_channel(np.swapaxes(trend, 1, 2), params.trend_w, params.trend_b) \
        + _per_channel(np.swapaxes(remain, 1, 2), params.remain_w, params.remain_b)
    y = _project(params.proj, out)
    return y[0] if single else y


# ---- PatchTST+W -----------------------------------------------------------------

@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    norm1: LayerNormParams
    ff1: LinearParams
    ff2: LinearParams
    norm2: LayerNormParams

    @classmethod
    def init(cls, rng, width: int, heads: int, ffn: int) -> "EncoderLayerParams":
        return cls(AttentionParams.init(rng, width, heads), LayerNormParams.init(width),
                   LinearParams.init(rng, width, ffn), LinearParams.init(rng, ffn, width),
                   LayerNormParams.init(width))


@dataclass
class PatchTstWParams:
    embed: LinearParams   # patch -> width, shared by all channels
    pos: Tensor           # [P, width]
    layers: list = field(default_factory=list)
    head_w: Tensor = None  # [C, H, P*width]
    head_b: Tensor = None  # [C, H]
    proj: LinearParams = None

    @classmethod
    def init(cls, rng, cfg: ForecasterConfig) -> "PatchTstWParams":
        P, D, C, H = cfg.n_patches, cfg.width, cfg.channels, cfg.horizon
        embed = LinearParams.init(rng, cfg.patch, D)
        pos = T.parameter(rng.uniform(-0.02, 0.02, size=(P, D)))
        layers = [EncoderLayerParams.init(rng, D, cfg.heads, cfg.ffn) for _ in range(cfg.depth)]
        return cls(embed, pos, layers, uniform_init(rng, (C, H, P * D), P * D), zeros((C, H)),
                   LinearParams.init(rng, C * H, H))


def patchify(x: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """``[B, L, C]`` -> ``[B, C, P, patch]``."""
    L = x.shape[1]
    if patch > L or (L - patch) % stride:
        raise ConfigError(f"invalid patch grid: lookback={L} patch={patch} stride={stride}")
    starts = np.arange(0, L - patch + 1, stride)
    idx = starts[:, None] + np.arange(patch)[None, :]
    return np.swapaxes(x, 1, 2)[:, :, idx]


def encoder_layer(p: EncoderLayerParams, x: Tensor) -> Tensor:
    x = layer_norm(p.norm1, x + multi_head_attention(p.attn, x, x))
    return layer_norm(p.norm2, x + linear(p.ff2, T.gelu(linear(p.ff1, x))))


def patchtst_encode(params: PatchTstWParams, source, cfg: ForecasterConfig) -> Tensor:
    """Encoded patch tokens ``[B, C, P, width]``; channels never mix here."""
    x = np.asarray(source, dtype=np.float64)
    patches = patchify(x, cfg.patch, cfg.patch_stride)
    B, C, P, _ = patches.shape
    z = linear(params.embed, patches.reshape(B * C, P, cfg.patch)) + params.pos
    for layer in params.layers:
        z = encoder_layer(layer, z)
    return T.reshape(z, (B, C, P, z.shape[-1]))


def patchtst_forward(params: PatchTstWParams, source, cfg: ForecasterConfig) -> Tensor:
    x = np.asarray(source, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.lookback, cfg.channels):
        raise DimensionError(f"patchtst expects [.., {cfg.lookback}, {cfg.channels}], got {np.shape(source)}")
    z = patchtst_encode(params, x, cfg)
    B, C, P, D = z.shape
    out = _per_channel(T.reshape(z, (B, C, P * D)), params.head_w, params.head_b)
    y = _project(params.proj, out)
    return y[0] if single else y


# ---- model wrapper --------------------------------------------------------------

@dataclass
class Forecaster:
    cfg: ForecasterConfig
    params: DLinearWParams | PatchTstWParams

    @classmethod
    def init(cls, cfg: ForecasterConfig, seed) -> "Forecaster":
        rng = np.random.default_rng(seed)
        maker = DLinearWParams if cfg.kind == "dlinear" else PatchTstWParams
        return cls(cfg, maker.init(rng, cfg))

    def forward(self, source_norm) -> Tensor:
        fn = dlinear_forward if self.cfg.kind == "dlinear" else patchtst_forward
        return fn(self.params, source_norm, self.cfg)

    def parameters(self) -> dict[str, Tensor]:
        return named_parameters(self.params)

    def predict_normalized(self, source: np.ndarray) -> tuple[np.ndarray, NormStats]:
        """Raw ``[L, C]`` window -> (normalized horizon prediction, window stats)."""
        stats = NormStats.fit(source)
        return self.forward(stats.normalize(source)).data.copy(), stats

    def predict(self, source: np.ndarray) -> np.ndarray:
        z, stats = self.predict_normalized(source)
        return stats.denormalize_close(z)

    def to_bytes(self) -> bytes:
        return dumps_params(self.parameters(), {"forecaster": dataclasses.asdict(self.cfg)})


def _from_meta(arrays, meta) -> Forecaster:
    try:
        cfg = ForecasterConfig(**meta["forecaster"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"model file has no usable forecaster config: {exc}") from exc
    model = Forecaster.init(cfg, 0)
    load_into(model.params, arrays)
    return model


def save_forecaster(model: Forecaster, path, meta: dict | None = None) -> None:
    save_params(model.parameters(), path, {"forecaster": dataclasses.asdict(model.cfg), **(meta or {})})


def load_forecaster(path) -> Forecaster:
    return _from_meta(*load_params(path))


def forecaster_from_bytes(blob: bytes) -> Forecaster:
    return _from_meta(*loads_params(blob))


# ---- training -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch < 1:
            raise ConfigError(f"bad training settings: {self}")


def normalize_windows(windows: list[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into normalized inputs ``[N, L, C]`` and targets ``[N, H]``."""
    src = np.stack([w.source for w in windows])
    tgt = np.stack([w.target for w in windows])
    stats = NormStats.fit(src)
    return stats.normalize(src), stats.normalize_close(tgt)


def train_forecaster(model: Forecaster, windows: list[WindowSample], cfg: TrainConfig = TrainConfig(),
                     arrays: tuple[np.ndarray, np.ndarray] | None = None) -> list[float]:
    """Fit ``model`` in place by Adam on MSE; returns the mean loss of each epoch.

    ``arrays`` lets callers pass pre-normalized ``(inputs, targets)`` directly.
    """
    if arrays is None:
        if not windows:
            raise DataError("no training windows")
        x, y = normalize_windows(windows)
    else:
        x, y = arrays
        if len(x) == 0:
            raise DataError("no training windows")
    if y.shape[1] != model.cfg.horizon:
        raise DimensionError(f"targets have horizon {y.shape[1]}, model has {model.cfg.horizon}")
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch):
            idx = order[start:start + cfg.batch]
            with Tape():
                loss = T.mse(model.forward(x[idx]), y[idx])
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite training loss {value} at epoch {epoch + 1}, "
                                         f"batch starting {start}")
                opt.zero_grad()
                T.backward(loss)
            opt.step()
            total += value * len(idx)
        curve.append(total / len(x))
        log.debug("epoch %d loss %.6g", epoch + 1, curve[-1])
    return curve


# ---- event inference ------------------------------------------------------------

def event_window(series: AlignedSeries, date: dt.date, lookback: int) -> np.ndarray:
    """The ``[lookback, C]`` slice ending on (and including) ``date``."""
    i = series.index_of(date)
    if i is None:
        raise DataError(f"{series.ticker}: {date} is not a trading day")
    if i + 1 < lookback:
        raise DataError(f"{series.ticker}: {date} has {i + 1} days of history, need {lookback}")
    return series.channels[i + 1 - lookback:i + 1]


def predict_event_baseline(model: Forecaster, series: AlignedSeries, date: dt.date, n: int) -> np.ndarray:
    """Currency-unit forecast of the ``n`` closes after ``date``."""
    if not 1 <= n <= model.cfg.horizon:
        raise ConfigError(f"n={n} must lie in [1, horizon={model.cfg.horizon}]")
    return model.predict(event_window(series, date, model.cfg.lookback))[:n]
