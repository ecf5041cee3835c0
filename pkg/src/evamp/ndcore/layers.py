"""Neural building blocks on top of the tape.

Parameter containers are plain dataclasses of :class:`Tensor`;
:func:`named_parameters` walks them (and dicts/lists of them) to produce the
flat ``name -> Tensor`` mapping used by the optimizer and serializer.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from evamp.errors import ConfigError, DimensionError
from evamp.ndcore import tensor as T
from evamp.ndcore.tensor import Tensor, parameter


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


def zeros(shape) -> Tensor:
    return parameter(np.zeros(shape))


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}

    def walk(node, name):
        if isinstance(node, Tensor):
            if node.requires_grad:
                out[name] = node
        elif dataclasses.is_dataclass(node) and not isinstance(node, type):
            for f in dataclasses.fields(node):
                walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(node, dict):
            for k in node:
                walk(node[k], f"{name}.{k}" if name else str(k))
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{name}.{i}" if name else str(i))

    walk(obj, prefix)
    return out


def load_into(obj, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy arrays into the parameters of ``obj`` in place; names must match."""
    params = named_parameters(obj, prefix)
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise DimensionError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
    for name, p in params.items():
        a = arrays[name]
        if a.shape != p.shape:
            raise DimensionError(f"{name}: stored shape {a.shape} vs model shape {p.shape}")
        p.data = np.array(a, dtype=np.float64)


# ---- linear -------------------------------------------------------------------

@dataclass
class LinearParams:
    w: Tensor  # [out, in]
    b: Tensor | None  # [out]

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, bias: bool = True) -> "LinearParams":
        return cls(uniform_init(rng, (n_out, n_in), n_in), zeros((n_out,)) if bias else None)


def forward_linear(x, w, b=None) -> Tensor:
    """``y = x @ w.T + b`` over the last axis of ``x``."""
    x = T.as_tensor(x)
    w = T.as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} does not conform to weight shape {w.shape}")
    y = T.matmul(x, T.transpose(w))
    if b is not None:
        b = T.as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
        y = y + b
    return y


def linear(p: LinearParams, x) -> Tensor:
    return forward_linear(x, p.w, p.b)


# ---- embedding ----------------------------------------------------------------

@dataclass
class EmbeddingParams:
    table: Tensor  # [vocab, dim]

    @classmethod
    def init(cls, rng, vocab: int, dim: int) -> "EmbeddingParams":
        return cls(uniform_init(rng, (vocab, dim), dim))


def embed(p: EmbeddingParams, index) -> Tensor:
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= p.table.shape[0]):
        raise DimensionError(f"embedding index out of range for table of {p.table.shape[0]} rows")
    return T.take_rows(p.table, index)


# ---- GRU ----------------------------------------------------------------------

@dataclass
class GruCellParams:
    """Gates act on ``[x, h]``; each weight is ``[hidden, input + hidden]``."""

    w_z: Tensor
    w_r: Tensor
    w_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[1] - self.w_z.shape[0]

    @classmethod
    def init(cls, rng, input_dim: int, hidden_dim: int) -> "GruCellParams":
        fan = input_dim + hidden_dim
        shape = (hidden_dim, fan)
        return cls(uniform_init(rng, shape, fan), uniform_init(rng, shape, fan),
                   uniform_init(rng, shape, fan), zeros((hidden_dim,)),
                   zeros((hidden_dim,)), zeros((hidden_dim,)))


def gru_step(p: GruCellParams, h_prev, x) -> Tensor:
    h_prev, x = T.as_tensor(h_prev), T.as_tensor(x)
    if h_prev.shape[-1] != p.hidden_dim or x.shape[-1] != p.input_dim:
        raise DimensionError(
            f"gru: h {h_prev.shape} / x {x.shape} vs cell (input={p.input_dim}, hidden={p.hidden_dim})")
    xh = T.concat([x, h_prev], axis=-1)
    z = T.sigmoid(forward_linear(xh, p.w_z, p.b_z))
    r = T.sigmoid(forward_linear(xh, p.w_r, p.b_r))
    cand = T.tanh(forward_linear(T.concat([x, r * h_prev], axis=-1), p.w_h, p.b_h))
    return (1.0 - z) * h_prev + z * cand


# ---- attention ----------------------------------------------------------------

@dataclass
class AttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    heads: int

    @classmethod
    def init(cls, rng, dim: int, heads: int, query_dim: int | None = None) -> "AttentionParams":
        if dim % heads:
            raise ConfigError(f"attention width {dim} is not divisible by {heads} heads")
        return cls(LinearParams.init(rng, query_dim or dim, dim), LinearParams.init(rng, dim, dim),
                   LinearParams.init(rng, dim, dim), LinearParams.init(rng, dim, dim), heads)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, length, dim = x.shape
    x = x.reshape(*lead, length, heads, dim // heads)
    nd = x.ndim
    return T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def multi_head_attention(p: AttentionParams, query, keys_values, mask=None) -> Tensor:
    """Scaled dot-product attention of ``query [.., Lq, Dq]`` over ``keys_values [.., L, D]``.

    ``mask`` is an optional boolean array broadcastable to ``[.., L]``; False
    positions are excluded from the softmax.
    """
    query, keys_values = T.as_tensor(query), T.as_tensor(keys_values)
    dim = p.k.w.shape[0]
    if dim % p.heads:
        raise ConfigError(f"attention width {dim} is not divisible by {p.heads} heads")
    dk = dim // p.heads
    q = _split_heads(linear(p.q, query), p.heads)
    k = _split_heads(linear(p.k, keys_values), p.heads)
    v = _split_heads(linear(p.v, keys_values), p.heads)
    nd = k.ndim
    scores = T.matmul(q, T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))) * (1.0 / np.sqrt(dk))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        # [.., L] -> [.., 1, 1, L]
        penalty = np.where(mask, 0.0, -1e30)[..., None, None, :]
        scores = scores + penalty
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v)  # [.., heads, Lq, dk]
    nd = ctx.ndim
    ctx = T.transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, lq, _, _ = ctx.shape
    return linear(p.o, ctx.reshape(*lead, lq, dim))


def attention_weights(p: AttentionParams, query, keys_values) -> np.ndarray:
    """Per-head attention probabilities ``[.., heads, Lq, L]`` (no tape)."""
    dim = p.k.w.shape[0]
    dk = dim // p.heads
    q = _split_heads(linear(p.q, query), p.heads).data
    k = _split_heads(linear(p.k, keys_values), p.heads).data
    s = q @ np.swapaxes(k, -1, -2) / np.sqrt(dk)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# ---- normalization ------------------------------------------------------------

@dataclass
class LayerNormParams:
    gain: Tensor
    shift: Tensor

    @classmethod
    def init(cls, dim: int) -> "LayerNormParams":
        return cls(parameter(np.ones(dim)), zeros((dim,)))


def layer_norm(p: LayerNormParams, x, eps: float = 1e-5) -> Tensor:
    mu = T.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = T.mean(centered * centered, axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * p.gain + p.shift
