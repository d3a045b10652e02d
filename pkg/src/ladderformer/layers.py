"""Learnable layers, the named parameter registry, initialisation and checkpoints."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(*shape, fill=0.0):
    return Tensor(np.full(shape, fill), requires_grad=True)


class Module:
    """Container whose Tensor / Module attributes form a dotted parameter tree."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def registry(self):
        return ParameterRegistry(self.named_parameters())


class ParameterRegistry:
    """Ordered ``dotted.name -> Tensor`` map of a model's learnable tensors."""

    def __init__(self, items=()):
        self._params = OrderedDict()
        for name, t in items:
            if name in self._params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self._params[name] = t

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad.fill(0.0)

    def state(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state):
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names do not match: {sorted(missing)}")
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=T.DTYPE)
            if arr.shape != t.shape:
                raise T.DimensionError(f"{name}: stored shape {arr.shape} vs model shape {t.shape}")
            t.data[...] = arr


def count_parameters(registry):
    return sum(t.size for _, t in registry)


def subtotals(registry, depth=2):
    """Scalar counts grouped by the first ``depth`` components of the dotted names."""
    out = OrderedDict()
    for name, t in registry:
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + t.size
    return out


class Linear(Module):
    def __init__(self, n_in, n_out):
        self.weight = parameter(n_out, n_in)
        self.bias = parameter(n_out)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5):
        if d < 1:
            raise T.ContractError("LayerNorm needs at least one feature")
        self.weight = parameter(d, fill=1.0)
        self.bias = parameter(d)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    """Inverted dropout. Draws from ``rng`` (a numpy Generator) in training mode."""

    def __init__(self, p, rng=None):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def __call__(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = self.rng.random(x.shape) >= self.p
        return T.mul_const(x, keep / (1.0 - self.p))


def set_dropout_rng(model, rng):
    for m in model.modules():
        if isinstance(m, Dropout):
            m.rng = rng


def init_xavier_uniform(registry, rng_seed):
    """Glorot-uniform for every matrix, ones for norm gains, zeros for the rest.

    Matrices are drawn in registry order, so the result depends only on the seed.
    """
    rng = np.random.default_rng(rng_seed)
    for name, t in registry:
        leaf = name.rsplit(".", 1)[-1]
        if t.ndim == 2:
            fan_out, fan_in = t.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            t.data[...] = rng.uniform(-bound, bound, size=t.shape)
        elif leaf == "weight" and _is_norm(name):
            t.data[...] = 1.0
        else:
            t.data[...] = 0.0


def _is_norm(name):
    owner = name.rsplit(".", 1)[0].rsplit(".", 1)[-1]
    return owner.startswith("norm")


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u32 header_len | header JSON (utf-8) | payload
# payload: every tensor's values as little-endian float64, in header order.

MAGIC = b"LDRFMR"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, registry, header):
    entries, offset = [], 0
    for name, t in registry:
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size
    meta = dict(header, tensors=entries, format_version=CHECKPOINT_VERSION)
    blob = json.dumps(meta, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in registry)
    Path(path).write_bytes(MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(blob)) + blob + payload)


def read_checkpoint(path):
    """Return ``(header, {name: ndarray})``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", raw, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + n].decode())
    values = np.frombuffer(raw, dtype="<f8", offset=start + n)
    state = {}
    for e in header.pop("tensors"):
        size = int(np.prod(e["shape"], dtype=int))
        state[e["name"]] = values[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(T.DTYPE)
    return header, state
