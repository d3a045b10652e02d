import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladderformer import tensor as T
from ladderformer.layers import Linear, parameter
from ladderformer.models import TOKEN_CONFIG, Seq2SeqModel, build_model
from ladderformer.optimize import (AdamState, ScheduleSpec, TrainingDiverged, adam_step,
                                   batch_loss, cross_entropy_loss, decode_payload, fit,
                                   greedy_decode, make_batches, mse_loss)
from ladderformer.seqdata import frame, frame_and_pad, generate_dataset, tasks
from ladderformer.tensor import Tensor
from ladderformer.tokens import PAD


class OneParam:
    def __init__(self, value, grad):
        self.p = parameter(1, fill=value)
        self.p.grad = np.array([grad], dtype=float)

    def __iter__(self):
        return iter([("p", self.p)])


# ---------------------------------------------------------------------------
# losses

def test_mse_zero_error():
    assert mse_loss(Tensor([0.3, 1.0]), np.array([0.3, 1.0])).item() == 0.0


def test_mse_constant_half_on_balanced_targets():
    assert mse_loss(Tensor(np.full(8, 0.5)), np.array([0, 1] * 4, dtype=float)).item() == 0.25


def test_mse_hand_value():
    assert mse_loss(Tensor([1.0, 2.0]), np.array([0.0, 0.0])).item() == (1 + 4) / 2


def test_mse_shape_mismatch():
    with pytest.raises(T.DimensionError):
        mse_loss(Tensor([1.0, 2.0]), np.zeros(3))


def test_cross_entropy_uniform_four_way():
    loss = cross_entropy_loss(Tensor(np.zeros((3, 2, 4))), np.zeros((3, 2), dtype=int)).item()
    assert abs(loss - (-math.log(1 / 4))) < 1e-9


def test_cross_entropy_saturated():
    logits = np.zeros((2, 1, 4))
    logits[0, 0, 1] = logits[1, 0, 3] = 50.0
    assert cross_entropy_loss(Tensor(logits), np.array([[1], [3]])).item() < 1e-20


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 4))
def test_ignore_index_equals_filtered_subset(seed, t, b):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(t, b, 5)) * 3
    targets = rng.integers(0, 5, size=(t, b))
    targets[rng.random((t, b)) < 0.5] = PAD
    keep = targets != PAD
    full = cross_entropy_loss(Tensor(logits), targets, ignore_index=PAD)
    if not keep.any():
        assert full.item() == 0.0
        return
    subset = cross_entropy_loss(Tensor(logits[keep]), targets[keep])
    assert full.item() == subset.item()
    x_full, x_sub = Tensor(logits, requires_grad=True), Tensor(logits[keep], requires_grad=True)
    T.backward(cross_entropy_loss(x_full, targets, ignore_index=PAD))
    T.backward(cross_entropy_loss(x_sub, targets[keep]))
    assert x_full.grad[keep].tobytes() == x_sub.grad.tobytes()
    assert np.all(x_full.grad[~keep] == 0.0)


def test_half_pad_batch_equals_non_pad_half():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 2, 5))
    targets = np.array([[0, 4], [1, 4], [3, 4], [2, 4]])
    a = cross_entropy_loss(Tensor(logits), targets, ignore_index=PAD).item()
    b = cross_entropy_loss(Tensor(logits[:, :1]), targets[:, :1]).item()
    assert a == b


def test_cross_entropy_all_ignored():
    x = Tensor(np.ones((2, 1, 5)), requires_grad=True)
    loss = cross_entropy_loss(x, np.full((2, 1), PAD), ignore_index=PAD)
    T.backward(loss)
    assert loss.item() == 0.0 and np.all(x.grad == 0.0)


# ---------------------------------------------------------------------------
# Adam and schedule

def test_adam_first_step_magnitude():
    reg = OneParam(1.0, 1.0)
    adam_step(AdamState(lr=0.01), reg)
    # m_hat = v_hat = 1 -> step = lr / (1 + eps)
    assert abs((1.0 - reg.p.data[0]) - 0.01) < 1e-6


def test_adam_zero_gradient_keeps_parameter():
    reg = OneParam(0.3, 0.0)
    state = AdamState(lr=0.01)
    for _ in range(5):
        adam_step(state, reg)
    assert reg.p.data[0] == 0.3


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3))
def test_adam_first_step_follows_gradient_sign(g):
    reg = OneParam(0.0, g)
    adam_step(AdamState(lr=0.01), reg)
    assert np.sign(-reg.p.data[0]) == np.sign(g)
    assert abs(abs(reg.p.data[0]) - 0.01) < 1e-6


def test_adam_leaves_gradients_alone():
    reg = OneParam(0.0, 2.0)
    state = AdamState()
    adam_step(state, reg)
    adam_step(state, reg)
    assert reg.p.grad[0] == 2.0 and state.step_count == 2


def test_schedule():
    s = ScheduleSpec(0.01, 0.1, (1000,))
    assert s.lr_at(0) == s.lr_at(999) == 0.01
    assert abs(s.lr_at(1000) - 0.001) < 1e-15
    assert abs(s.lr_at(1500) - 0.001) < 1e-15
    assert abs(ScheduleSpec(1.0, 0.5, (3, 1)).lr_at(5) - 0.25) < 1e-15


# ---------------------------------------------------------------------------
# training

def test_homogeneous_batches_without_padding_support():
    model = build_model("masked", 0)
    data = generate_dataset(tasks("one_to_three", "three_to_one"), 5, 0)
    batches = make_batches(model, data, np.random.default_rng(0))
    assert len(batches) == 2
    assert all(not b.has_padding and b.size == 10 for b in batches)


def test_padded_minibatches():
    model = build_model("padded", 0)
    data = generate_dataset(tasks("all_eight"), 25, 0)
    batches = make_batches(model, data, np.random.default_rng(0), 32)
    assert [b.size for b in batches] == [32] * 6 + [8]


@pytest.mark.parametrize("seed", range(5))
def test_one_step_decreases_single_sample_loss(seed):
    cfg = dataclasses.replace(TOKEN_CONFIG, dropout_p=0.0)
    model = Seq2SeqModel("padded", cfg).initialize(seed)
    sample = [generate_dataset(tasks("all_eight"), 1, seed)[0]]
    batch = frame_and_pad(sample)
    before = batch_loss(model.eval(), batch)[0].item()
    fit(model, sample, 1, ScheduleSpec(1e-3), seed)
    after = batch_loss(model, batch)[0].item()
    assert after < before


def test_fit_report_and_finite_losses():
    model = build_model("plain", 0)
    report = fit(model, generate_dataset(tasks("copy_constant"), 5, 0), 20, ScheduleSpec(0.01, 0.1, (10,)), 0)
    assert len(report.losses) == len(report.lrs) == 20
    assert all(np.isfinite(report.losses))
    assert report.lrs[9] == 0.01 and abs(report.lrs[10] - 0.001) < 1e-15
    csv = report.to_csv().splitlines()
    assert csv[0] == "epoch,loss,lr" and len(csv) == 22 and csv[-1].startswith("# final_loss=")


def test_fit_aborts_on_nan():
    model = build_model("token", 0)
    model.unembedding.bias.data[0] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        fit(model, generate_dataset(tasks("three_to_one"), 2, 0), 3, ScheduleSpec(), 0)


def test_fit_rejects_empty_dataset():
    with pytest.raises(T.ContractError):
        fit(build_model("token", 0), [], 1)


# ---------------------------------------------------------------------------
# decoding

def test_decode_tie_breaks_to_lowest_id_and_runs_to_max_len():
    model = build_model("masked", 0)
    model.unembedding.weight.data[...] = 0.0
    model.unembedding.bias.data[...] = 0.0
    assert greedy_decode(model, frame([1])) == [0] * 15


def test_decode_stops_at_eos():
    model = build_model("masked", 0)
    model.unembedding.weight.data[...] = 0.0
    model.unembedding.bias.data[...] = [0.0, 0.0, 0.0, 1.0]
    assert decode_payload(model, [0, 1]) == []


def test_decode_is_deterministic():
    model = build_model("padded", 4)
    fit(model, generate_dataset(tasks("all_eight"), 1, 0), 3, ScheduleSpec(), 0)
    first = [decode_payload(model, t.src) for t in tasks("all_eight")]
    assert first == [decode_payload(model, t.src) for t in tasks("all_eight")]
