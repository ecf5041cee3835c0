"""SentiEvent: a label-free baseline that reads the event text itself.

The stock embedding attends over encoded text tokens to give one event
representation; adding a per-step positional row yields the GRU input at
each step, and the GRU states go through the same direction/update path as
TimeS.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass

import numpy as np

from evamp.errors import ConfigError, DataError, DimensionError
from evamp.heads.common import (
    HeadConfig, StockTable, UpdateParams, amplification, direction_probs, update_prices,
)
from evamp.ndcore import tensor as T
from evamp.ndcore.layers import (
    AttentionParams, EmbeddingParams, GruCellParams, embed, gru_step, multi_head_attention,
    named_parameters, uniform_init,
)
from evamp.ndcore.tensor import Tensor

_WORD = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    """Lowercased runs of word characters (underscores stay inside a token)."""
    return _WORD.findall(text.lower())


def token_buckets(text: str, buckets: int) -> list[int]:
    toks = tokenize(text)
    if not toks:
        raise DataError(f"event text has no tokens: {text!r}")
    return [zlib.crc32(t.encode("utf-8")) % buckets for t in toks]


class PrecomputedEncoder:
    """Fixed ``[L, D]`` token matrices keyed by event key (``TICKER|YYYY-MM-DD``)."""

    def __init__(self, matrices: dict[str, np.ndarray]):
        dims = {m.shape[1] for m in matrices.values()}
        if len(dims) > 1:
            raise DataError(f"precomputed embeddings disagree on width: {sorted(dims)}")
        self.matrices = matrices
        self.dim = dims.pop() if dims else None

    @classmethod
    def from_jsonl(cls, path) -> "PrecomputedEncoder":
        out = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    m = np.asarray(obj["matrix"], dtype=np.float64)
                    key = str(obj["key"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"{path}:{lineno}: bad embedding record ({exc})") from exc
                if m.ndim != 2 or m.shape[0] < 1:
                    raise DataError(f"{path}:{lineno}: matrix must be [L >= 1, D]")
                out[key] = m
        return cls(out)

    def __call__(self, key: str) -> np.ndarray:
        try:
            return self.matrices[key]
        except KeyError:
            raise DataError(f"no precomputed embedding for {key}") from None


@dataclass
class SentiEventParams:
    tokens: EmbeddingParams     # [buckets, D]; unused with a precomputed encoder
    stock: StockTable           # [V, H]
    attn: AttentionParams       # query width H, key/value width D
    pos: Tensor                 # [n, D]
    gru: GruCellParams          # input D, hidden H
    w_a: Tensor                 # [3, H]
    update: UpdateParams


class SentiEventHead:
    kind = "sentievent"

    def __init__(self, cfg: HeadConfig, tickers, seed, encoder: PrecomputedEncoder | None = None):
        self.cfg = cfg
        self.encoder = encoder
        if encoder is not None and encoder.dim not in (None, cfg.text_dim):
            raise ConfigError(f"precomputed embeddings have width {encoder.dim}, head expects {cfg.text_dim}")
        rng = np.random.default_rng(seed)
        D, H = cfg.text_dim, cfg.hidden
        self.params = SentiEventParams(
            EmbeddingParams.init(rng, cfg.text_buckets, D),
            StockTable.init(tickers, H, cfg.fallback_buckets),
            AttentionParams.init(rng, D, cfg.text_heads, query_dim=H),
            T.parameter(rng.uniform(-0.1, 0.1, size=(cfg.n, D))),
            GruCellParams.init(rng, D, H),
            uniform_init(rng, (3, H), H),
            UpdateParams.identity(cfg.n),
        )

    def parameters(self):
        params = named_parameters(self.params)
        if self.encoder is not None:
            params.pop("tokens.table")
        return params

    def encode(self, events) -> list:
        """Per-event token bucket ids, or fixed matrices with a precomputed encoder."""
        if self.encoder is not None:
            return [self.encoder(e.key) for e in events]
        return [token_buckets(e.text, self.cfg.text_buckets) for e in events]

    def _token_matrix(self, items) -> tuple[Tensor, np.ndarray]:
        """Padded ``[B, L, D]`` token vectors and the ``[B, L]`` validity mask."""
        L = max(len(x) for x in items)
        mask = np.zeros((len(items), L), dtype=bool)
        for i, x in enumerate(items):
            mask[i, :len(x)] = True
        if self.encoder is not None:
            mats = np.zeros((len(items), L, self.cfg.text_dim))
            for i, m in enumerate(items):
                mats[i, :len(m)] = m
            return Tensor(mats), mask
        ids = np.zeros((len(items), L), dtype=np.int64)
        for i, x in enumerate(items):
            ids[i, :len(x)] = x
        return embed(self.params.tokens, ids), mask

    def stock_event_repr(self, tickers, items) -> Tensor:
        """``E_s`` ``[B, D]``: the stock embedding attending over the event tokens."""
        kv, mask = self._token_matrix(items)
        query = T.reshape(self.params.stock.lookup(tickers), (len(items), 1, self.cfg.hidden))
        out = multi_head_attention(self.params.attn, query, kv, mask=mask)
        return T.reshape(out, (len(items), self.cfg.text_dim))

    def temporal_reprs(self, e_s) -> Tensor:
        """``E_{s,t} = E_s + pos[t]`` as ``[B, n, D]``."""
        e_s = T.as_tensor(e_s)
        if e_s.shape[-1] != self.cfg.text_dim:
            raise DimensionError(f"event repr width {e_s.shape[-1]} != {self.cfg.text_dim}")
        B = e_s.shape[0]
        return T.reshape(e_s, (B, 1, self.cfg.text_dim)) + self.params.pos

    def roll_states(self, tickers, items) -> Tensor:
        reprs = self.temporal_reprs(self.stock_event_repr(tickers, items))
        h = self.params.stock.lookup(tickers)
        states = []
        for t in range(self.cfg.n):
            h = gru_step(self.params.gru, h, reprs[:, t, :])
            states.append(h)
        return T.stack(states, axis=1)

    def forward(self, tickers, items, baseline) -> tuple[Tensor, Tensor]:
        A = amplification(direction_probs(self.params.w_a, self.roll_states(tickers, items)))
        return update_prices(self.params.update, A, baseline, self.cfg.alpha), A
