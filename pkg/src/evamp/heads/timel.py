"""TimeL: no stock state; labels are decoded back to approximate fractional
changes and those feed the shared update directly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evamp.heads.common import HeadConfig, UpdateParams, update_prices
from evamp.labels import LabelSequence, QuantConfig, decode_label
from evamp.ndcore.layers import named_parameters
from evamp.ndcore.tensor import Tensor


def labels_to_amplification(labels: LabelSequence, cfg: QuantConfig) -> np.ndarray:
    """Bucket-midpoint fraction for each expanded step."""
    return np.array([decode_label(x, cfg) for x in labels.expanded], dtype=np.float64)


@dataclass
class TimelParams:
    update: UpdateParams


class TimelHead:
    kind = "timel"

    def __init__(self, cfg: HeadConfig, tickers=(), seed=0):
        self.cfg = cfg
        self.params = TimelParams(UpdateParams.identity(cfg.n))

    def parameters(self):
        return named_parameters(self.params)

    def encode(self, labels: list[LabelSequence]) -> np.ndarray:
        q = self.cfg.quant
        return np.array([labels_to_amplification(s, q) for s in labels]).reshape(len(labels), self.cfg.n)

    def forward(self, tickers, amp, baseline) -> tuple[Tensor, Tensor]:
        amp = Tensor(amp)
        return update_prices(self.params.update, amp, baseline, self.cfg.alpha), amp
