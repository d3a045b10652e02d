"""Vocabulary, scaled token embedding, un-embedding and sinusoidal positions."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import Dropout, Linear, Module, parameter
from .transformer import ConfigError

ZERO, ONE, SOS, EOS, PAD = 0, 1, 2, 3, 4
NUM_TOKENS = 4  # excludes PAD
NAMES = {ZERO: "0", ONE: "1", SOS: "SOS", EOS: "EOS", PAD: "PAD"}

MAX_LEN = 64


class VocabularyError(IndexError):
    pass


class CapacityError(ValueError):
    pass


class Embedding(Module):
    """Lookup table scaled by √d_model; the optional padding row is zero and frozen."""

    def __init__(self, num_rows, d_model, padding_idx=None):
        self.weight = parameter(num_rows, d_model)
        self.d_model = d_model
        self.padding_idx = padding_idx

    def reset_padding_row(self):
        if self.padding_idx is not None:
            self.weight.data[self.padding_idx] = 0.0

    def __call__(self, tokens):
        tokens = np.asarray(tokens)
        try:
            return T.embedding(self.weight, tokens, math.sqrt(self.d_model), self.padding_idx)
        except IndexError as exc:
            raise VocabularyError(str(exc)) from None


def unembed(layer: Linear, features):
    """Per-token logits (unnormalised)."""
    return layer(features)


def positional_values(max_len, d_model):
    if d_model % 2:
        raise ConfigError(f"sinusoidal positions need an even d_model, got {d_model}")
    pos = np.arange(max_len, dtype=T.DTYPE)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=T.DTYPE) / d_model)
    pe = np.empty((max_len, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


class PositionalTable(Module):
    def __init__(self, d_model, dropout_p=0.0, max_len=MAX_LEN):
        self.pe = positional_values(max_len, d_model)
        self.dropout = Dropout(dropout_p)

    @property
    def max_len(self):
        return self.pe.shape[0]

    def __call__(self, x):
        """Add ``pe[pos]`` to every position of ``x`` (L, B, d); rank-2 input gets B=1."""
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = T.reshape(x, (x.shape[0], 1, x.shape[1]))
        length = x.shape[0]
        if length > self.max_len:
            raise CapacityError(f"sequence of length {length} exceeds the positional table ({self.max_len})")
        return self.dropout(T.add(x, self.pe[:length, None, :]))


def positional_table(max_len, d_model, dropout_p=0.0):
    return PositionalTable(d_model, dropout_p, max_len)


def write_positional_csv(path, pe, positions, layout="wide"):
    """Dump rows of ``pe`` for plotting.

    ``wide``: header ``pos,d0..d{n-1}``, one row per position.
    ``long``: header ``pos,dim,value``, one row per entry.
    """
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if layout == "wide":
            w.writerow(["pos"] + [f"d{i}" for i in range(pe.shape[1])])
            for p in positions:
                w.writerow([p] + [repr(float(v)) for v in pe[p]])
        elif layout == "long":
            w.writerow(["pos", "dim", "value"])
            for p in positions:
                for i, v in enumerate(pe[p]):
                    w.writerow([p, i, repr(float(v))])
        else:
            raise ValueError(f"unknown layout {layout!r}")
