"""Label providers: where an event's predicted label sequence comes from.

``OracleProvider`` encodes the realized prices (a perfect predictor),
``FileProvider`` reads labels produced elsewhere, and ``NoisyOracleProvider``
corrupts oracle labels at a controlled rate to mimic an imperfect model.
"""
from __future__ import annotations

import datetime as dt
import json
import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from evamp.config import build_dataclass, bundled_preset, parse_kv_text
from evamp.errors import ConfigError, DataError, LabelParseError
from evamp.labels import ChangeLabel, Direction, LabelSequence, QuantConfig, encode_labels, parse_tokens
from evamp.market.types import EventRecord


class ProviderKind(str, Enum):
    ORACLE = "Oracle"
    FILE = "File"
    NOISY = "NoisyOracle"


class LabelLookupError(DataError, KeyError):
    """The label store has no entry for an event."""

    def __str__(self) -> str:  # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""


class IndicatorProvider:
    kind: ProviderKind

    def __init__(self, cfg: QuantConfig | None = None):
        self.cfg = cfg or QuantConfig()

    def provide(self, event: EventRecord) -> LabelSequence:
        raise NotImplementedError

    def __call__(self, event: EventRecord) -> LabelSequence:
        seq = self.provide(event)
        seq.validate(self.cfg)
        return seq


class OracleProvider(IndicatorProvider):
    kind = ProviderKind.ORACLE

    def provide(self, event: EventRecord) -> LabelSequence:
        if event.realized is None:
            raise DataError(f"{event.key}: no realized prices for the oracle")
        return encode_labels(event.realized, self.cfg)


class FileProvider(IndicatorProvider):
    """Labels keyed by ``(ticker, date)``; parsing is lazy so one bad entry
    only fails the event that asks for it."""

    kind = ProviderKind.FILE

    def __init__(self, store: dict[tuple[str, dt.date], str], cfg: QuantConfig | None = None):
        super().__init__(cfg)
        self.store = dict(store)

    @classmethod
    def from_jsonl(cls, path, cfg: QuantConfig | None = None) -> "FileProvider":
        store = {}
        try:
            fh = open(path, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read label store {path}: {exc}") from exc
        with fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key = (str(obj["ticker"]), dt.date.fromisoformat(obj["date"]))
                    text = obj["labels"]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: bad label-store record ({exc})") from exc
                if not isinstance(text, str):
                    raise DataError(f"{path}:{lineno}: labels must be a string")
                store[key] = text
        return cls(store, cfg)

    def provide(self, event: EventRecord) -> LabelSequence:
        text = self.store.get((event.ticker, event.date))
        if text is None:
            raise LabelLookupError(f"no stored labels for {event.key}")
        try:
            return parse_tokens(text, self.cfg)
        except LabelParseError as exc:
            raise LabelParseError(f"{event.key}: {exc}", exc.position) from exc


def event_seed(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(key.encode("utf-8"))]))


def corrupt_label(label: ChangeLabel, flip: bool, shift: int, cap: int) -> ChangeLabel:
    """Apply one flip decision and magnitude shift; DEC never drops below 1."""
    direction = label.direction.flipped() if flip else label.direction
    lo = 1 if direction is Direction.DEC else 0
    return ChangeLabel(direction, int(min(max(label.magnitude + shift, lo), cap)))


@dataclass(frozen=True)
class NoisySettings:
    p: float = 0.0
    sigma: float = 0.0
    seed: int = 0
    # filled in for calibrated presets; informational only
    measured_direction_f1: float | None = None
    measured_value_f1: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"flip rate must lie in [0, 1], got {self.p}")
        if not self.sigma >= 0.0:
            raise ConfigError(f"magnitude sigma must be >= 0, got {self.sigma}")


class NoisyOracleProvider(IndicatorProvider):
    kind = ProviderKind.NOISY

    def __init__(self, settings: NoisySettings, cfg: QuantConfig | None = None):
        super().__init__(cfg)
        self.settings = settings
        self._oracle = OracleProvider(self.cfg)

    def provide(self, event: EventRecord) -> LabelSequence:
        gold = self._oracle.provide(event)
        rng = event_seed(self.settings.seed, event.key)
        out = []
        for label in gold.window_labels:
            flip = bool(rng.random() < self.settings.p)
            shift = int(np.rint(rng.normal(0.0, self.settings.sigma))) if self.settings.sigma > 0 else 0
            out.append(corrupt_label(label, flip, shift, self.cfg.magnitude_cap))
        return LabelSequence.from_windows(out, self.cfg)


def load_noisy_preset(name: str) -> NoisySettings:
    text = bundled_preset(f"provider-{name}")
    if text is None:
        raise ConfigError(f"no noisy-provider preset named {name!r}")
    return build_dataclass(NoisySettings, parse_kv_text(text, name), name)


def make_provider(spec: str, cfg: QuantConfig | None = None, seed: int | None = None) -> IndicatorProvider:
    """Build a provider from ``oracle``, ``file:PATH``, ``noisy:P,SIGMA[,SEED]`` or ``noisy:PRESET``.

    ``seed`` replaces the noise seed when the spec does not give one.
    """
    kind, _, arg = spec.partition(":")
    if kind == "oracle" and not arg:
        return OracleProvider(cfg)
    if kind == "file" and arg:
        if not Path(arg).is_file():
            raise ConfigError(f"label store {arg} does not exist")
        return FileProvider.from_jsonl(arg, cfg)
    if kind == "noisy" and arg:
        parts = [x.strip() for x in arg.split(",")]
        if len(parts) == 1 and not _is_number(parts[0]):
            settings = load_noisy_preset(parts[0])
            if seed is not None:
                settings = NoisySettings(settings.p, settings.sigma, seed, settings.measured_direction_f1,
                                         settings.measured_value_f1)
            return NoisyOracleProvider(settings, cfg)
        try:
            p = float(parts[0])
            sigma = float(parts[1]) if len(parts) > 1 else 0.0
            s = int(parts[2]) if len(parts) > 2 else (seed or 0)
        except ValueError as exc:
            raise ConfigError(f"bad noisy provider spec {spec!r}") from exc
        if len(parts) > 3:
            raise ConfigError(f"bad noisy provider spec {spec!r}")
        return NoisyOracleProvider(NoisySettings(p, sigma, s), cfg)
    raise ConfigError(f"provider must be oracle, file:PATH or noisy:P,SIGMA[,SEED]; got {spec!r}")


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True
