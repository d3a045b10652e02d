"""Binary seq2seq tasks, SOS/EOS framing, padding and the teacher-forcing shift."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import causal_mask, key_padding_mask
from .tensor import ContractError
from .tokens import EOS, PAD, SOS, CapacityError


@dataclass(frozen=True)
class TaskSpec:
    name: str
    src: tuple
    tgt: tuple

    def __post_init__(self):
        if not set(self.src) | set(self.tgt) <= {0, 1}:
            raise ValueError(f"task {self.name}: patterns may only contain 0 and 1")


def _task(name, src, tgt):
    return TaskSpec(name, tuple(src), tuple(tgt))


TASKS = {t.name: t for t in (
    _task("copy_zeros", [0, 0, 0, 0], [0, 0, 0, 0]),
    _task("copy_ones", [1, 1, 1, 1], [1, 1, 1, 1]),
    _task("invert_zeros", [0, 0, 0, 0], [1, 1, 1, 1]),
    _task("invert_ones", [1, 1, 1, 1], [0, 0, 0, 0]),
    _task("ones_to_zero", [1, 1, 1], [0]),
    _task("zeros_to_one", [0, 0, 0], [1]),
    _task("zero_to_ones", [0], [1, 1, 1]),
    _task("one_to_zeros", [1], [0, 0, 0]),
    _task("alt_0101", [0, 1, 0, 1], [0, 1, 0, 1]),
    _task("alt_1010", [1, 0, 1, 0], [1, 0, 1, 0]),
)}

GROUPS = {
    "copy_constant": ["copy_zeros", "copy_ones"],
    "three_to_one": ["ones_to_zero", "zeros_to_one"],
    "one_to_three": ["zero_to_ones", "one_to_zeros"],
    "alternating": ["alt_0101", "alt_1010"],
    # the eight joint tasks in the order of the reported decoding results
    "all_eight": ["copy_zeros", "copy_ones", "ones_to_zero", "zeros_to_one",
                  "zero_to_ones", "one_to_zeros", "alt_0101", "alt_1010"],
    # same eight, with the first two as inversions instead of copies
    "all_eight_inverted": ["invert_zeros", "invert_ones", "ones_to_zero", "zeros_to_one",
                           "zero_to_ones", "one_to_zeros", "alt_0101", "alt_1010"],
}


def tasks(*names):
    """Resolve task and group names into a flat list of :class:`TaskSpec`."""
    out = []
    for name in names:
        if name in GROUPS:
            out.extend(TASKS[n] for n in GROUPS[name])
        elif name in TASKS:
            out.append(TASKS[name])
        else:
            raise KeyError(f"unknown task or group {name!r}")
    return out


def generate_dataset(task_list, copies_per_task, rng_seed):
    if not task_list:
        raise ContractError("need at least one task")
    if copies_per_task < 1:
        raise ContractError(f"copies_per_task must be >= 1, got {copies_per_task}")
    pairs = [(list(t.src), list(t.tgt)) for t in task_list for _ in range(copies_per_task)]
    order = np.random.default_rng(rng_seed).permutation(len(pairs))
    return [pairs[i] for i in order]


def frame(payload):
    return [SOS, *payload, EOS]


def strip(tokens):
    """Payload of a framed sequence: drop SOS, stop at EOS, drop PAD."""
    out = []
    for tok in tokens:
        if tok == EOS:
            break
        if tok not in (SOS, PAD):
            out.append(int(tok))
    return out


def pad_columns(seqs, pad_to=None):
    """Stack framed sequences as columns of an ``(L, B)`` matrix, PAD-filled."""
    longest = max(len(s) for s in seqs)
    length = longest if pad_to is None else pad_to
    if length < longest:
        raise CapacityError(f"pad_to={pad_to} is shorter than the longest framed sequence ({longest})")
    out = np.full((length, len(seqs)), PAD, dtype=np.int64)
    for j, s in enumerate(seqs):
        out[:len(s), j] = s
    return out


@dataclass
class Batch:
    src: np.ndarray          # (S, B)
    tgt_in: np.ndarray       # (T, B)
    tgt_out: np.ndarray      # (T, B)
    src_key_padding: np.ndarray     # (B, S)
    tgt_key_padding: np.ndarray     # (B, T)
    memory_key_padding: np.ndarray  # (B, S), the source mask itself
    tgt_mask: np.ndarray     # (T, T)

    @property
    def size(self):
        return self.src.shape[1]

    @property
    def has_padding(self):
        return bool(self.src_key_padding.any() or self.tgt_key_padding.any())


def frame_and_pad(pairs, pad_to=None):
    """Frame ``(src, tgt)`` payload pairs with SOS/EOS, pad, and split the target.

    ``pad_to`` applies to the framed source and framed target alike.
    """
    src = pad_columns([frame(s) for s, _ in pairs], pad_to)
    tgt = pad_columns([frame(t) for _, t in pairs], pad_to)
    tgt_in, tgt_out = tgt[:-1], tgt[1:]
    src_kpm = key_padding_mask(src)
    return Batch(
        src=src,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        src_key_padding=src_kpm,
        tgt_key_padding=key_padding_mask(tgt_in),
        memory_key_padding=src_kpm,
        tgt_mask=causal_mask(tgt_in.shape[0]),
    )


def dump_dataset(pairs, path):
    with open(path, "w") as fh:
        for src, tgt in pairs:
            fh.write(f"{' '.join(map(str, src))} -> {' '.join(map(str, tgt))}\n")
