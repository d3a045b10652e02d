"""Pre-norm encoder-decoder transformer on sequence-first ``(L, B, d)`` tensors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .layers import Dropout, LayerNorm, Linear, Module, parameter


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 8
    nhead: int = 1
    num_encoder_layers: int = 1
    num_decoder_layers: int = 1
    dim_feedforward: int = 8
    dropout_p: float = 0.1
    layer_norm_eps: float = 1e-5
    norm_first: bool = True

    def __post_init__(self):
        for field in ("d_model", "nhead", "num_encoder_layers", "num_decoder_layers", "dim_feedforward"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1")
        if self.d_model % self.nhead:
            raise ConfigError(f"d_model={self.d_model} is not divisible by nhead={self.nhead}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if not self.norm_first:
            raise ConfigError("only the pre-norm (norm_first=True) layout is implemented")

    def to_dict(self):
        return asdict(self)


def combine_masks(attn_mask, key_padding, batch, nhead, lq, lk):
    """Merge an additive ``(Lq, Lk)`` mask and a boolean ``(B, Lk)`` padding mask.

    Returns a constant array broadcastable to ``(B*nhead, Lq, Lk)``, or None.
    """
    if attn_mask is None and key_padding is None:
        return None
    mask = np.zeros((1, lq, lk))
    if attn_mask is not None:
        attn_mask = np.asarray(attn_mask, dtype=T.DTYPE)
        if attn_mask.shape != (lq, lk):
            raise T.DimensionError(f"attention mask {attn_mask.shape} does not match ({lq}, {lk})")
        mask = mask + attn_mask
    if key_padding is not None:
        key_padding = np.asarray(key_padding, dtype=bool)
        if key_padding.shape != (batch, lk):
            raise T.DimensionError(f"key padding mask {key_padding.shape} does not match ({batch}, {lk})")
        pad = np.where(key_padding, -np.inf, 0.0)
        pad = np.repeat(pad, nhead, axis=0)[:, None, :]
        mask = mask + pad
    return mask


def scaled_dot_product_attention(q, k, v, additive_mask=None, key_padding=None):
    """softmax(q kᵀ / √d_h + mask) v over the last two axes.

    ``q``: (..., Lq, d_h), ``k``/``v``: (..., Lk, d_h). ``key_padding`` is a
    boolean array over Lk (optionally with leading batch axes); True marks a key
    that must be ignored.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    d_h = q.shape[-1]
    if k.shape[-1] != d_h or v.shape[-2] != k.shape[-2]:
        raise T.DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.mul_scalar(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(d_h))
    mask = None
    if additive_mask is not None:
        mask = np.asarray(additive_mask, dtype=T.DTYPE)
    if key_padding is not None:
        pad = np.where(np.asarray(key_padding, dtype=bool), -np.inf, 0.0)[..., None, :]
        mask = pad if mask is None else mask + pad
    return T.matmul(T.softmax_lastdim(scores, mask), v)


class MultiheadAttention(Module):
    """Attention with one packed ``3d x d`` input projection and a ``d x d`` output projection."""

    def __init__(self, d_model, nhead):
        if d_model % nhead:
            raise ConfigError(f"d_model={d_model} is not divisible by nhead={nhead}")
        self.nhead = nhead
        self.in_proj_weight = parameter(3 * d_model, d_model)
        self.in_proj_bias = parameter(3 * d_model)
        self.out_proj = Linear(d_model, d_model)

    def _heads(self, x, length, batch):
        # (L, B, d) -> (B*h, L, d_h)
        d = x.shape[-1]
        x = T.reshape(x, (length, batch * self.nhead, d // self.nhead))
        return T.transpose(x, (1, 0, 2))

    def __call__(self, x_q, x_kv, attn_mask=None, key_padding=None):
        lq, batch, d = x_q.shape
        lk = x_kv.shape[0]
        if x_kv.shape[1] != batch:
            raise T.DimensionError(f"attention: query batch {batch} vs key batch {x_kv.shape[1]}")
        w, b = self.in_proj_weight, self.in_proj_bias
        if x_q is x_kv:
            qkv = T.linear(x_q, w, b)
            q, k, v = (T.take(qkv, (..., slice(i * d, (i + 1) * d))) for i in range(3))
        else:
            q = T.linear(x_q, T.take(w, slice(0, d)), T.take(b, slice(0, d)))
            kv = T.linear(x_kv, T.take(w, slice(d, 3 * d)), T.take(b, slice(d, 3 * d)))
            k, v = T.take(kv, (..., slice(0, d))), T.take(kv, (..., slice(d, 2 * d)))
        q, k, v = self._heads(q, lq, batch), self._heads(k, lk, batch), self._heads(v, lk, batch)
        mask = combine_masks(attn_mask, key_padding, batch, self.nhead, lq, lk)
        out = scaled_dot_product_attention(q, k, v, mask)
        out = T.reshape(T.transpose(out, (1, 0, 2)), (lq, batch, d))
        return self.out_proj(out)


class FeedForward(Module):
    def __init__(self, d_model, dim_feedforward, dropout_p):
        self.linear1 = Linear(d_model, dim_feedforward)
        self.dropout = Dropout(dropout_p)
        self.linear2 = Linear(dim_feedforward, d_model)

    def __call__(self, x):
        return self.linear2(self.dropout(T.relu(self.linear1(x))))


class EncoderLayer(Module):
    def __init__(self, cfg):
        self.self_attn = MultiheadAttention(cfg.d_model, cfg.nhead)
        self.ff = FeedForward(cfg.d_model, cfg.dim_feedforward, cfg.dropout_p)
        self.norm1 = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.norm2 = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.dropout1 = Dropout(cfg.dropout_p)
        self.dropout2 = Dropout(cfg.dropout_p)

    def __call__(self, x, key_padding=None):
        h = self.norm1(x)
        x = T.add(x, self.dropout1(self.self_attn(h, h, key_padding=key_padding)))
        return T.add(x, self.dropout2(self.ff(self.norm2(x))))


class DecoderLayer(Module):
    def __init__(self, cfg):
        self.self_attn = MultiheadAttention(cfg.d_model, cfg.nhead)
        self.cross_attn = MultiheadAttention(cfg.d_model, cfg.nhead)
        self.ff = FeedForward(cfg.d_model, cfg.dim_feedforward, cfg.dropout_p)
        self.norm1 = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.norm2 = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.norm3 = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.dropout1 = Dropout(cfg.dropout_p)
        self.dropout2 = Dropout(cfg.dropout_p)
        self.dropout3 = Dropout(cfg.dropout_p)

    def __call__(self, y, memory, tgt_mask=None, tgt_key_padding=None, memory_key_padding=None):
        h = self.norm1(y)
        y = T.add(y, self.dropout1(self.self_attn(h, h, tgt_mask, tgt_key_padding)))
        y = T.add(y, self.dropout2(self.cross_attn(self.norm2(y), memory, None, memory_key_padding)))
        return T.add(y, self.dropout3(self.ff(self.norm3(y))))


class Encoder(Module):
    def __init__(self, cfg):
        self.layers = [EncoderLayer(cfg) for _ in range(cfg.num_encoder_layers)]
        self.norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)

    def __call__(self, x, key_padding=None):
        for layer in self.layers:
            x = layer(x, key_padding)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, cfg):
        self.layers = [DecoderLayer(cfg) for _ in range(cfg.num_decoder_layers)]
        self.norm = LayerNorm(cfg.d_model, cfg.layer_norm_eps)

    def __call__(self, y, memory, tgt_mask=None, tgt_key_padding=None, memory_key_padding=None):
        for layer in self.layers:
            y = layer(y, memory, tgt_mask, tgt_key_padding, memory_key_padding)
        return self.norm(y)


class EncoderDecoder(Module):
    """Encoder stack + final norm feeding a decoder stack + final norm."""

    def __init__(self, cfg: TransformerConfig):
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def __call__(self, src, tgt, tgt_mask=None, src_key_padding=None,
                 tgt_key_padding=None, memory_key_padding=None):
        if src.ndim != 3 or tgt.ndim != 3:
            raise T.DimensionError(f"expected (seq, batch, feature) inputs, got {src.shape} and {tgt.shape}")
        if src.shape[1] != tgt.shape[1]:
            raise T.DimensionError(f"src batch {src.shape[1]} differs from tgt batch {tgt.shape[1]}")
        memory = self.encoder(src, src_key_padding)
        return self.decoder(tgt, memory, tgt_mask, tgt_key_padding, memory_key_padding)


def expected_parameter_count(cfg: TransformerConfig):
    """Closed-form scalar count of :class:`EncoderDecoder` for ``cfg``."""
    d, f = cfg.d_model, cfg.dim_feedforward
    attn = 4 * d * d + 4 * d
    ff = 2 * d * f + f + d
    norm = 2 * d
    enc = attn + ff + 2 * norm
    dec = 2 * attn + ff + 3 * norm
    return cfg.num_encoder_layers * enc + cfg.num_decoder_layers * dec + 2 * norm
