"""Causal target masks and boolean key-padding masks."""

import numpy as np

from .tensor import ContractError
from .tokens import PAD


def causal_mask(t):
    """Additive ``(t, t)`` mask: 0 where key <= query, -inf strictly above the diagonal."""
    if t < 1:
        raise ContractError(f"causal mask length must be >= 1, got {t}")
    return np.triu(np.full((t, t), -np.inf), k=1)


def key_padding_mask(tokens, pad_id=PAD):
    """``(L, B)`` token ids -> ``(B, L)`` booleans, True where the token is padding."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[:, None]
    return (tokens == pad_id).T.copy()
