"""The five-rung model ladder: each stage adds one component to the previous one.

=========== ==========================================================
stage       adds
=========== ==========================================================
plain       bare encoder-decoder on raw scalar values (d_model = 1)
token       token embedding (×√d) and un-embedding to logits
masked      causal target mask in training and decoding
positional  sinusoidal positional encoding after the embedding
padded      PAD token, key-padding masks, PAD-ignoring loss
=========== ==========================================================
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import Linear, Module, init_xavier_uniform, set_dropout_rng
from .masking import causal_mask
from .tokens import NUM_TOKENS, PAD, Embedding, PositionalTable, unembed
from .transformer import EncoderDecoder, TransformerConfig

STAGES = ("plain", "token", "masked", "positional", "padded")

PLAIN_CONFIG = TransformerConfig(d_model=1, nhead=1, num_encoder_layers=1, num_decoder_layers=1,
                                 dim_feedforward=8, dropout_p=0.1, layer_norm_eps=1e-5)
TOKEN_CONFIG = TransformerConfig(d_model=8, nhead=1, num_encoder_layers=1, num_decoder_layers=1,
                                 dim_feedforward=8, dropout_p=0.1, layer_norm_eps=1e-5)


def stage_rank(stage):
    try:
        return STAGES.index(stage)
    except ValueError:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}") from None


class Seq2SeqModel(Module):
    """Encoder-decoder plus whichever pre/post-processing its stage enables."""

    def __init__(self, stage, config=None):
        rank = stage_rank(stage)
        self.stage = stage
        self.config = config or (PLAIN_CONFIG if rank == 0 else TOKEN_CONFIG)
        self.uses_tokens = rank >= 1
        self.uses_causal_mask = rank >= 2
        self.uses_positions = rank >= 3
        self.uses_padding = rank >= 4
        d = self.config.d_model
        if self.uses_tokens:
            rows = NUM_TOKENS + 1 if self.uses_padding else NUM_TOKENS
            self.embedding = Embedding(rows, d, PAD if self.uses_padding else None)
        if self.uses_positions:
            self.positional = PositionalTable(d, self.config.dropout_p)
        self.transformer = EncoderDecoder(self.config)
        if self.uses_tokens:
            self.unembedding = Linear(d, self.vocab_size)

    @property
    def vocab_size(self):
        return NUM_TOKENS + 1 if self.uses_padding else NUM_TOKENS

    @property
    def ignore_index(self):
        return PAD if self.uses_padding else None

    def initialize(self, seed):
        """Deterministic parameter init; also seeds the dropout stream."""
        init_xavier_uniform(self.registry(), seed)
        if self.uses_tokens:
            self.embedding.reset_padding_row()
        set_dropout_rng(self, np.random.default_rng([seed, 1]))
        return self

    def _prepare(self, seq):
        if not self.uses_tokens:
            return T.as_tensor(seq)
        x = self.embedding(seq)
        if self.uses_positions:
            x = self.positional(x)
        return x

    def __call__(self, src, tgt, src_key_padding=None, tgt_key_padding=None, memory_key_padding=None):
        """Token ids ``(L, B)`` in, logits ``(T, B, V)`` out; plain stage maps values to values.

        Masks the stage does not support are ignored, the causal mask is built here.
        """
        src = np.asarray(src) if self.uses_tokens else src
        tgt = np.asarray(tgt) if self.uses_tokens else tgt
        if self.uses_tokens and src.ndim == 1:
            src, tgt = src[:, None], tgt[:, None]
        x, y = self._prepare(src), self._prepare(tgt)
        tgt_mask = causal_mask(y.shape[0]) if self.uses_causal_mask else None
        if not self.uses_padding:
            src_key_padding = tgt_key_padding = memory_key_padding = None
        out = self.transformer(x, y, tgt_mask, src_key_padding, tgt_key_padding, memory_key_padding)
        return unembed(self.unembedding, out) if self.uses_tokens else out


def build_model(stage, seed, config=None):
    return Seq2SeqModel(stage, config).initialize(seed)
