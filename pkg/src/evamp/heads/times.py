"""TimeS: a per-stock GRU state rolled over label embeddings.

The state starts at the stock's embedding, takes one expanded label per
step, and is read out as a (increase, neutral, decrease) distribution whose
expected direction is the amplification fed to the shared update.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evamp.errors import ContractError, DimensionError
from evamp.heads.common import (
    HeadConfig, StockTable, UpdateParams, amplification, direction_probs, update_prices,
)
from evamp.labels import LabelSequence, label_index, label_vocabulary
from evamp.ndcore import tensor as T
from evamp.ndcore.layers import EmbeddingParams, GruCellParams, embed, gru_step, named_parameters, uniform_init
from evamp.ndcore.tensor import Tensor


def ordinal_label_code(cap: int, dim: int) -> np.ndarray:
    """Initial label embeddings: ``tanh(bucket / s)`` over ``dim`` geometric scales.

    Neighbouring buckets start close together and ``INC_0`` starts at zero, so
    magnitudes never seen in training still land between their neighbours.
    """
    scales = np.geomspace(1.0, max(cap, 2), dim)
    buckets = np.array([x.bucket for x in label_vocabulary(cap)], dtype=np.float64)
    return np.tanh(buckets[:, None] / scales[None, :])


@dataclass
class TimesParams:
    stock: StockTable
    labels: EmbeddingParams  # [(2*cap + 1), E]
    gru: GruCellParams       # input E, hidden H
    w_a: Tensor              # [3, H]
    update: UpdateParams


class TimesHead:
    kind = "times"

    def __init__(self, cfg: HeadConfig, tickers, seed):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        H, E = cfg.hidden, cfg.label_dim
        self.params = TimesParams(
            StockTable.init(tickers, H, cfg.fallback_buckets),
            EmbeddingParams(T.parameter(ordinal_label_code(cfg.magnitude_cap, E))),
            GruCellParams.init(rng, E, H),
            uniform_init(rng, (3, H), H),
            UpdateParams.identity(cfg.n),
        )

    def parameters(self):
        return named_parameters(self.params)

    def encode(self, labels: list[LabelSequence]) -> np.ndarray:
        """Expanded labels -> vocabulary indices ``[E, n]``."""
        cap = self.cfg.magnitude_cap
        out = np.array([[label_index(x, cap) for x in seq.expanded] for seq in labels], dtype=np.int64)
        if out.size and out.shape[1] != self.cfg.n:
            raise DimensionError(f"expected {self.cfg.n} expanded labels, got {out.shape[1]}")
        return out.reshape(len(labels), self.cfg.n)

    def roll_states(self, tickers, label_idx: np.ndarray) -> Tensor:
        """States ``[B, n, H]``; ``h_0`` is the stock embedding."""
        label_idx = np.asarray(label_idx)
        if label_idx.ndim != 2 or label_idx.shape[1] != self.cfg.n:
            raise ContractError(f"roll_states needs [B, {self.cfg.n}] label indices, got {label_idx.shape}")
        h = self.params.stock.lookup(tickers)
        states = []
        for t in range(label_idx.shape[1]):
            h = gru_step(self.params.gru, h, embed(self.params.labels, label_idx[:, t]))
            states.append(h)
        return T.stack(states, axis=1)

    def forward(self, tickers, label_idx, baseline) -> tuple[Tensor, Tensor]:
        """Returns ``(P', A)`` for a batch."""
        A = amplification(direction_probs(self.params.w_a, self.roll_states(tickers, label_idx)))
        return update_prices(self.params.update, A, baseline, self.cfg.alpha), A
