"""Losses, Adam, the multi-step schedule, teacher-forced training and greedy decoding."""

from __future__ import annotations

import time
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .seqdata import frame, frame_and_pad
from .tokens import EOS, SOS

MAX_DECODE_LEN = 15


class TrainingDiverged(RuntimeError):
    pass


def mse_loss(pred, target):
    return T.mse(pred, target)


def cross_entropy_loss(logits, targets, ignore_index=None):
    return T.cross_entropy(logits, targets, ignore_index)


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, registry):
    """One bias-corrected Adam update of every parameter that has a gradient."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in registry:
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class ScheduleSpec:
    initial_lr: float = 0.01
    gamma: float = 0.1
    milestones: tuple = ()

    def lr_at(self, epoch):
        """Learning rate used during 0-based ``epoch``."""
        return self.initial_lr * self.gamma ** bisect_right(sorted(self.milestones), epoch)


@dataclass
class TrainReport:
    losses: list
    lrs: list
    seed: int
    config: dict
    wall_clock: float = 0.0

    @property
    def final_loss(self):
        return self.losses[-1]

    def to_csv(self):
        lines = ["epoch,loss,lr"]
        lines += [f"{e},{loss!r},{lr!r}" for e, (loss, lr) in enumerate(zip(self.losses, self.lrs))]
        lines.append(f"# final_loss={self.final_loss!r} epochs={len(self.losses)} seed={self.seed}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# batching

def _value_batch(pairs):
    src = np.array([s for s, _ in pairs], dtype=T.DTYPE).T[:, :, None]
    tgt = np.array([t for _, t in pairs], dtype=T.DTYPE).T[:, :, None]
    return src, tgt


def make_batches(model, dataset, rng, batch_size=None):
    """Split ``dataset`` into the batches of one epoch.

    Models without PAD support only see length-homogeneous batches; the padded
    stage shuffles across lengths and pads to each batch's maximum.
    """
    if model.uses_padding:
        order = rng.permutation(len(dataset))
        size = batch_size or len(dataset)
        chunks = [[dataset[i] for i in order[k:k + size]] for k in range(0, len(order), size)]
        return [frame_and_pad(c) for c in chunks]
    groups = {}
    for pair in dataset:
        groups.setdefault((len(pair[0]), len(pair[1])), []).append(pair)
    batches = []
    for key in sorted(groups):
        items = groups[key]
        size = batch_size or len(items)
        for k in range(0, len(items), size):
            chunk = items[k:k + size]
            batches.append(_value_batch(chunk) if not model.uses_tokens else frame_and_pad(chunk))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def batch_loss(model, batch):
    """Teacher-forced loss of one batch and the number of scored targets."""
    if not model.uses_tokens:
        src, tgt = batch
        return mse_loss(model(T.Tensor(src), T.Tensor(tgt)), tgt), tgt.size
    logits = model(batch.src, batch.tgt_in, batch.src_key_padding,
                   batch.tgt_key_padding, batch.memory_key_padding)
    ignore = model.ignore_index
    scored = batch.tgt_out.size if ignore is None else int((batch.tgt_out != ignore).sum())
    return cross_entropy_loss(logits, batch.tgt_out, ignore), scored


def fit(model, dataset, epochs, schedule=ScheduleSpec(), rng_seed=0, batch_size=None, log=None):
    """Train ``model`` in place for a fixed number of epochs with Adam.

    The reported loss of an epoch is the mean over every scored target of that
    epoch's batches, measured with dropout active.
    """
    if not dataset:
        raise T.ContractError("cannot fit on an empty dataset")
    registry = model.registry()
    opt = AdamState(lr=schedule.lr_at(0))
    rng = np.random.default_rng([rng_seed, 2])
    losses, lrs = [], []
    start = time.perf_counter()
    model.train()
    for epoch in range(epochs):
        opt.lr = schedule.lr_at(epoch)
        total, count = 0.0, 0
        for batch in make_batches(model, dataset, rng, batch_size):
            registry.zero_grad()
            loss, n = batch_loss(model, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}")
            T.backward(loss)
            adam_step(opt, registry)
            total += value * n
            count += n
        losses.append(total / count)
        lrs.append(opt.lr)
        if log is not None:
            log(epoch, losses[-1], opt.lr)
    model.eval()
    return TrainReport(losses, lrs, rng_seed, model.config.to_dict(), time.perf_counter() - start)


# ---------------------------------------------------------------------------
# inference

def greedy_decode(model, src, max_len=MAX_DECODE_LEN):
    """Generate from ``[SOS]`` one argmax token at a time; return the emitted payload.

    ``src`` is a framed token sequence. Stops on EOS or after ``max_len``
    emitted tokens. Ties go to the lowest token id.
    """
    model.eval()
    src = np.asarray(src)[:, None]
    out = [SOS]
    for _ in range(max_len):
        logits = model(src, np.array(out)[:, None])
        nxt = int(np.argmax(logits.data[-1, 0]))
        if nxt == EOS:
            break
        out.append(nxt)
    return out[1:]


def decode_payload(model, payload, max_len=MAX_DECODE_LEN):
    return greedy_decode(model, frame(payload), max_len)


def predict_values(model, payload):
    """Plain-stage inference: one forward pass, the source doubling as target input."""
    model.eval()
    x = np.asarray(payload, dtype=T.DTYPE)[:, None, None]
    return model(T.Tensor(x), T.Tensor(x)).data[:, 0, 0].tolist()
