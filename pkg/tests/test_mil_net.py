import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtmil.errors import DegeneratePrevalence, FormatError, InvalidEpsilon, NoSupervision, NumericError, ShapeError
from mtmil.mil_net import (
    AdamState,
    ModelParams,
    TrainConfig,
    adam_step,
    batch_loss,
    checkpoint_bytes,
    forward,
    forward_many,
    grad_check,
    init_params,
    loss_and_grad,
    multitask_loss,
    params_from_checkpoint,
    quantize,
    weights_from_prevalence,
)

from oracles import gradient_instance, numeric_gradient


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def test_init_deterministic_zero_biases():
    a = init_params(6, 5, 4, 3, seed=7, gated=True)
    b = init_params(6, 5, 4, 3, seed=7, gated=True)
    assert a.equals(b)
    assert not np.any(a.b_e) and not np.any(a.b_heads)
    assert not a.equals(init_params(6, 5, 4, 3, seed=8, gated=True))


def test_glorot_variance():
    p = init_params(100, 100, 1, 1, seed=0)
    limit = math.sqrt(6 / 200)
    var = p.W_e.var()
    assert abs(var - (2 * limit) ** 2 / 12) < 0.1 * (2 * limit) ** 2 / 12
    assert np.abs(p.W_e).max() <= limit


def test_single_tile_attention_is_one():
    p = init_params(8, 4, 3, 2, seed=1)
    out = forward(p, np.random.default_rng(0).standard_normal((1, 8)))
    assert out.attention.tolist() == [1.0]
    assert np.allclose(out.probs.sum(axis=1), 1.0)


def test_identical_tiles_uniform_attention():
    p = init_params(8, 4, 3, 2, seed=1, gated=True)
    x = np.random.default_rng(1).standard_normal((1, 8))
    one = forward(p, x)
    many = forward(p, np.repeat(x, 7, axis=0))
    assert np.allclose(many.attention, 1 / 7, rtol=0, atol=1e-15)
    assert np.allclose(many.embedding, one.embedding, rtol=1e-12, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30), st.booleans())
def test_permutation_invariance_and_normalization(seed, n, gated):
    rng = np.random.default_rng(seed)
    p = init_params(8, 6, 5, 3, seed, gated)
    x = rng.standard_normal((n, 8)) * 3
    perm = rng.permutation(n)
    a, b = forward(p, x), forward(p, x[perm])
    assert np.allclose(b.attention, a.attention[perm], rtol=1e-6, atol=0)
    assert rel_err(a.probs, b.probs) < 1e-6
    assert rel_err(a.embedding, b.embedding) < 1e-6
    assert abs(a.attention.sum() - 1) < 1e-9 and np.all(a.attention > 0)
    assert np.allclose(a.probs.sum(axis=1), 1.0)


def test_forward_errors():
    p = init_params(4, 3, 2, 1, seed=0)
    with pytest.raises(ShapeError):
        forward(p, np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        forward(p, np.zeros((0, 4)))
    with pytest.raises(NumericError):
        forward(p, np.array([[np.inf, 0, 0, 0]]))


def test_forward_many_matches_forward():
    p = init_params(5, 4, 3, 2, seed=3)
    rng = np.random.default_rng(3)
    bags = [rng.standard_normal((n, 5)) for n in (1, 4, 9)]
    for bag, res in zip(bags, forward_many(p, bags)):
        ref = forward(p, bag)
        assert np.allclose(res.probs, ref.probs, rtol=1e-12)
        assert np.allclose(res.attention, ref.attention, rtol=1e-12)


def test_loss_examples():
    assert multitask_loss(np.array([[0.5, 0.5]]), [1], [(0.5, 0.5)]) == pytest.approx(0.5 * math.log(2), abs=1e-12)
    assert round(multitask_loss(np.array([[0.5, 0.5]]), [1], [(0.5, 0.5)]), 5) == 0.34657
    certain = np.array([[0.0, 1.0], [1.0, 0.0]])
    # p[y] = 1 is clamped to 1 - 1e-7, so the loss is zero up to the clamp
    assert multitask_loss(certain, [1, 0], [(1, 1), (1, 1)]) < 1e-6
    with pytest.raises(NoSupervision):
        multitask_loss(certain, [None, None], [(1, 1), (1, 1)])


def test_na_tasks_excluded_from_mean():
    probs = np.array([[0.2, 0.8], [0.6, 0.4], [0.9, 0.1]])
    cw = [(0.3, 0.7), (0.4, 0.6), (0.5, 0.5)]
    got = multitask_loss(probs, [1, None, 0], cw)
    assert got == pytest.approx((0.7 * -math.log(0.8) + 0.5 * -math.log(0.9)) / 2, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=5), st.data())
def test_half_weights_give_half_cross_entropy(p_pos, data):
    probs = np.array([[1 - p, p] for p in p_pos])
    labels = data.draw(st.lists(st.sampled_from([0, 1]), min_size=len(p_pos), max_size=len(p_pos)))
    half = multitask_loss(probs, labels, [(0.5, 0.5)] * len(p_pos))
    full = multitask_loss(probs, labels, [(1.0, 1.0)] * len(p_pos))
    assert half == full / 2


def test_weights_from_prevalence():
    assert weights_from_prevalence(0.13) == (0.13, 0.87)
    assert weights_from_prevalence(0.5) == (0.5, 0.5)
    assert weights_from_prevalence(0.02) == (0.02, 0.98)
    for bad in (0.0, 1.0):
        with pytest.raises(DegeneratePrevalence):
            weights_from_prevalence(bad)


def test_single_task_loss_matches_restricted_multitask():
    rng = np.random.default_rng(4)
    p3 = init_params(6, 5, 4, 3, seed=4)
    p1 = ModelParams(p3.W_e, p3.b_e, p3.V, p3.w, p3.W_heads[:1].copy(), p3.b_heads[:1].copy())
    x = rng.standard_normal((7, 6))
    for y in (0, 1):
        l1 = batch_loss(p1, [(x, [y])], [(0.2, 0.8)])
        l3 = batch_loss(p3, [(x, [y, None, None])], [(0.2, 0.8), (0.5, 0.5), (0.5, 0.5)])
        assert l1 == l3


@pytest.mark.parametrize("gated", [False, True])
def test_gradient_against_finite_differences(gated):
    params, batch, cw = gradient_instance(0, gated)
    _, analytic = loss_and_grad(params, batch, cw)
    numeric = numeric_gradient(lambda p: batch_loss(p, batch, cw), params)
    for name, arr in analytic.named_arrays():
        assert rel_err(arr, getattr(numeric, name)) < 1e-4, name


def test_gradient_agreement_over_100_seeds():
    worst = 0.0
    for seed in range(100):
        params, batch, cw = gradient_instance(seed, gated=bool(seed % 2))
        worst = max(worst, grad_check(params, batch, cw))
    assert worst < 1e-4


def test_grad_check_single_tile_bag():
    params, _, cw = gradient_instance(5, False)
    x = np.random.default_rng(5).standard_normal((1, 8))
    while np.min(np.abs(x @ params.W_e.T + params.b_e)) < 1e-2:
        x = x + 0.05
    assert grad_check(params, [(x, [1, 0, None])], cw) < 1e-5


def test_grad_check_rejects_zero_eps():
    params, batch, cw = gradient_instance(1, False)
    with pytest.raises(InvalidEpsilon):
        grad_check(params, batch, cw, eps=0)


def test_zero_weights_zero_gradient():
    params, batch, cw = gradient_instance(2, True)
    _, g = loss_and_grad(params, batch, np.zeros_like(cw))
    assert all(not np.any(arr) for _, arr in g.named_arrays())


def test_batch_of_copies_equals_single():
    params, batch, cw = gradient_instance(3, False)
    _, single = loss_and_grad(params, batch[:1], cw)
    _, many = loss_and_grad(params, batch[:1] * 4, cw)
    for name, arr in single.named_arrays():
        assert np.allclose(getattr(many, name), arr, rtol=1e-12, atol=1e-15)


def test_padding_does_not_leak():
    params, batch, cw = gradient_instance(4, True)
    short = (batch[0][0][:2], batch[0][1])
    _, alone = loss_and_grad(params, [short], cw)
    _, padded = loss_and_grad(params, [short, batch[1]], cw)
    _, other = loss_and_grad(params, [batch[1]], cw)
    for name, arr in alone.named_arrays():
        assert np.allclose(getattr(padded, name), (arr + getattr(other, name)) / 2, rtol=1e-10, atol=1e-14)


def test_adam_zero_gradient_no_decay():
    p = init_params(3, 2, 2, 1, seed=0)
    cfg = TrainConfig(weight_decay=0.0)
    new, st_ = adam_step(p, p.zeros_like(), AdamState.zeros(p), cfg)
    assert new.equals(p) and st_.step == 1


def test_adam_first_step_is_learning_rate():
    p = init_params(3, 2, 2, 1, seed=0)
    rng = np.random.default_rng(0)
    g = p.map(lambda a: rng.choice([-1, 1], size=a.shape) * rng.uniform(1e-3, 10, size=a.shape))
    cfg = TrainConfig(weight_decay=0.0, learning_rate=1e-3)
    new, _ = adam_step(p, g, AdamState.zeros(p), cfg)
    for name, arr in p.named_arrays():
        delta = getattr(new, name) - arr
        assert np.all(np.abs(np.abs(delta) - cfg.learning_rate) < 1e-6)
        assert np.all(np.sign(delta) == -np.sign(getattr(g, name)))


def test_adam_two_steps_by_hand():
    def scalar_params(v):
        z = np.zeros
        return ModelParams(np.array([[v]]), z(1), z((1, 1)), z(1), z((1, 2, 1)), z((1, 2)))

    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01)
    b1, b2, eps = 0.9, 0.999, 1e-8
    theta, m, v = 2.0, 0.0, 0.0
    p, state = scalar_params(theta), AdamState.zeros(scalar_params(0.0))
    for step, grad in ((1, 0.5), (2, -0.25)):
        theta = theta - 0.1 * 0.01 * theta
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        theta = theta - 0.1 * (m / (1 - b1**step)) / (math.sqrt(v / (1 - b2**step)) + eps)
        p, state = adam_step(p, scalar_params(grad), state, cfg)
        assert p.W_e[0, 0] == pytest.approx(theta, rel=1e-14)
    assert state.step == 2


@pytest.mark.parametrize("gated", [False, True])
def test_checkpoint_roundtrip(gated):
    p = init_params(5, 4, 3, 2, seed=9, gated=gated)
    blob = checkpoint_bytes(p)
    assert blob[:4] == b"MILM"
    assert struct.unpack_from("<H", blob, 4)[0] == 1
    assert struct.unpack_from("<4I", blob, 6) == (5, 4, 3, 2)
    assert struct.unpack_from("<H", blob, 22)[0] == int(gated)
    assert struct.unpack_from("<I", blob, len(blob) - 4)[0] == zlib.crc32(blob[:-4])
    back = params_from_checkpoint(blob)
    assert back.equals(quantize(p))
    assert checkpoint_bytes(back) == blob


def test_checkpoint_corruption():
    blob = checkpoint_bytes(init_params(3, 2, 2, 1, seed=0))
    flipped = bytearray(blob)
    flipped[30] ^= 0xFF
    for bad in (bytes(flipped), blob[:-5] + blob[-4:], b"XILM" + blob[4:], blob[:10]):
        with pytest.raises(FormatError):
            params_from_checkpoint(bad)


def test_validate_rejects_bad_shapes():
    p = init_params(3, 2, 2, 1, seed=0)
    p.b_e = np.zeros(5)
    with pytest.raises(ShapeError):
        checkpoint_bytes(p)
