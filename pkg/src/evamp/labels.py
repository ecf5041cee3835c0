"""Discrete price-change labels.

A realized post-event price path ``P[1..n]`` is turned into percent changes
relative to ``P[1]``, bucketed by floor division with bucket width ``I``
percent, and rendered as ``INC_k`` / ``DEC_k`` tokens. The ``n`` steps are cut
into ``K`` contiguous windows; each window carries the label of its
largest-magnitude step.
"""
from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from enum import Enum

from evamp.errors import ContractError, LabelParseError

# values that are integers in exact decimal arithmetic can land a hair below
# the boundary in binary floating point
_FLOOR_SLACK = 1e-9

_TOKEN = re.compile(r"(INC|DEC)_(0|[1-9][0-9]*)")


class Direction(str, Enum):
    INC = "INC"
    DEC = "DEC"

    def flipped(self) -> "Direction":
        return Direction.DEC if self is Direction.INC else Direction.INC


class LabelClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QuantConfig:
    interval: float = 0.3
    n: int = 9
    windows: int = 3
    magnitude_cap: int = 100

    def __post_init__(self):
        if not self.interval > 0:
            raise ContractError(f"bucket width must be positive, got {self.interval}")
        if self.n < self.windows:
            raise ContractError(f"horizon n={self.n} shorter than window count {self.windows}")
        if self.magnitude_cap < 1:
            raise ContractError("magnitude cap must be >= 1")

    def window_bounds(self) -> list[tuple[int, int]]:
        """Half-open step ranges per window; the remainder goes to the last one."""
        size = self.n // self.windows
        bounds = [(w * size, (w + 1) * size) for w in range(self.windows)]
        bounds[-1] = (bounds[-1][0], self.n)
        return bounds


@dataclass(frozen=True, order=True)
class ChangeLabel:
    direction: Direction
    magnitude: int

    def __post_init__(self):
        if self.magnitude < 0:
            raise ContractError(f"negative magnitude {self.magnitude}")
        if self.direction is Direction.DEC and self.magnitude == 0:
            raise ContractError("DEC_0 is not a label; zero change is INC_0")

    @property
    def token(self) -> str:
        return f"{self.direction.value}_{self.magnitude}"

    @property
    def bucket(self) -> int:
        """The signed floor bucket index this label stands for."""
        return self.magnitude if self.direction is Direction.INC else -self.magnitude

    def __str__(self) -> str:
        return self.token


@dataclass(frozen=True)
class LabelSequence:
    window_labels: tuple[ChangeLabel, ...]
    expanded: tuple[ChangeLabel, ...]

    @classmethod
    def from_windows(cls, labels, cfg: QuantConfig) -> "LabelSequence":
        labels = tuple(labels)
        if len(labels) != cfg.windows:
            raise ContractError(f"expected {cfg.windows} window labels, got {len(labels)}")
        expanded = []
        for label, (lo, hi) in zip(labels, cfg.window_bounds()):
            expanded.extend([label] * (hi - lo))
        return cls(labels, tuple(expanded))

    def validate(self, cfg: QuantConfig) -> None:
        if len(self.window_labels) != cfg.windows or len(self.expanded) != cfg.n:
            raise ContractError(
                f"label sequence has {len(self.window_labels)} windows / {len(self.expanded)} steps, "
                f"config wants {cfg.windows} / {cfg.n}")
        for label, (lo, hi) in zip(self.window_labels, cfg.window_bounds()):
            if any(x != label for x in self.expanded[lo:hi]):
                raise ContractError("expanded labels disagree with their window label")
        if any(x.magnitude > cfg.magnitude_cap for x in self.window_labels):
            raise ContractError("label magnitude above cap")

    def __str__(self) -> str:
        return render_tokens(self)


def quantize_change(p_t: float, p_1: float, cfg: QuantConfig | float = 0.3) -> int:
    """Signed bucket index ``floor(percent_change / I)`` of ``p_t`` against ``p_1``."""
    interval = cfg.interval if isinstance(cfg, QuantConfig) else float(cfg)
    if not p_1 > 0:
        raise ContractError(f"reference price must be positive, got {p_1}")
    ratio = ((p_t - p_1) / p_1 * 100.0) / interval
    return math.floor(ratio + _FLOOR_SLACK)


def label_of(c: int, cfg: QuantConfig | None = None) -> ChangeLabel:
    cap = (cfg or QuantConfig()).magnitude_cap
    mag = abs(int(c))
    if mag > cap:
        warnings.warn(f"change bucket {c} exceeds magnitude cap {cap}; clamped", LabelClampWarning,
                      stacklevel=2)
        mag = cap
    return ChangeLabel(Direction.DEC if c < 0 else Direction.INC, mag)


def encode_labels(realized, cfg: QuantConfig) -> LabelSequence:
    prices = [float(p) for p in realized]
    if len(prices) != cfg.n:
        raise ContractError(f"expected {cfg.n} realized prices, got {len(prices)}")
    p1 = prices[0]
    if not p1 > 0:
        raise ContractError(f"first realized price must be positive, got {p1}")
    labels = []
    for lo, hi in cfg.window_bounds():
        best = lo
        for t in range(lo + 1, hi):
            # strict comparison keeps the earliest step on ties
            if abs(prices[t] - p1) > abs(prices[best] - p1):
                best = t
        labels.append(label_of(quantize_change(prices[best], p1, cfg), cfg))
    return LabelSequence.from_windows(labels, cfg)


def decode_label(label: ChangeLabel, cfg: QuantConfig | float = 0.3) -> float:
    """Bucket-midpoint fractional change; ``INC_0`` decodes to exactly zero."""
    interval = cfg.interval if isinstance(cfg, QuantConfig) else float(cfg)
    if label.magnitude == 0:
        return 0.0
    return (label.bucket + 0.5) * interval / 100.0


def parse_label(token: str, position: int = 1, cfg: QuantConfig | None = None) -> ChangeLabel:
    if token == "Neutral":
        return ChangeLabel(Direction.INC, 0)
    m = _TOKEN.fullmatch(token)
    if not m:
        raise LabelParseError(f"malformed label {token!r} at token {position}", position)
    mag = int(m.group(2))
    if m.group(1) == "DEC" and mag == 0:
        raise LabelParseError(f"DEC_0 is not a valid label (token {position})", position)
    return label_of(mag if m.group(1) == "INC" else -mag, cfg)


def parse_tokens(text: str, cfg: QuantConfig | None = None) -> LabelSequence:
    """Parse either ``K`` window tokens or ``n`` per-step tokens.

    Positions in error messages are 1-based.
    """
    cfg = cfg or QuantConfig()
    tokens = text.strip().split(" ") if text.strip() else []
    labels = []
    for i, tok in enumerate(tokens, start=1):
        labels.append(parse_label(tok, i, cfg))
    if len(labels) == cfg.windows:
        return LabelSequence.from_windows(labels, cfg)
    if len(labels) == cfg.n:
        windows = []
        for lo, hi in cfg.window_bounds():
            if any(x != labels[lo] for x in labels[lo:hi]):
                raise LabelParseError(f"steps {lo + 1}..{hi} do not share one label", lo + 1)
            windows.append(labels[lo])
        return LabelSequence(tuple(windows), tuple(labels))
    raise LabelParseError(f"expected {cfg.windows} or {cfg.n} labels, got {len(labels)}")


def render_tokens(seq: LabelSequence, expanded: bool = False) -> str:
    labels = seq.expanded if expanded else seq.window_labels
    return " ".join(x.token for x in labels)


def label_vocabulary(cap: int) -> list[ChangeLabel]:
    """All in-cap labels: INC_0..INC_cap then DEC_1..DEC_cap."""
    return ([ChangeLabel(Direction.INC, k) for k in range(cap + 1)]
            + [ChangeLabel(Direction.DEC, k) for k in range(1, cap + 1)])


def label_index(label: ChangeLabel, cap: int) -> int:
    if label.magnitude > cap:
        raise ContractError(f"{label.token} is outside the vocabulary (cap {cap})")
    return label.magnitude if label.direction is Direction.INC else cap + label.magnitude
