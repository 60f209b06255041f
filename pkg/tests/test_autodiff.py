from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rpm_marl import autodiff as ad
from rpm_marl.autodiff import AdamState, ParamEntry, ParamVector, Tensor, adam_step, clip_grad_norm
from rpm_marl.errors import NonScalarLoss, ShapeMismatch

from fd_oracle import central_difference, relative_error


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_softmax_of_zeros_is_uniform():
    out = ad.softmax(Tensor(np.zeros(3))).numpy()
    assert np.allclose(out, 1 / 3)


def test_clamp_value_and_dead_gradient():
    x = leaf([1.5, 1.0, 0.5])
    y = ad.clamp(x, 0.8, 1.2)
    assert y.numpy().tolist() == [1.2, 1.0, 0.8]
    ad.sum(y).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_matmul_shapes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1)))
    assert (a @ b).shape == (2, 1)
    with pytest.raises(ShapeMismatch):
        ad.matmul(a, Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones(3)), b)


def test_sum_of_squares_gradient():
    x = leaf([1.0, 2.0])
    ad.sum(ad.square(x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(NonScalarLoss):
        ad.square(x).backward()


def test_non_parameter_leaves_untouched():
    x = leaf([1.0, 2.0])
    c = Tensor(np.array([3.0, 4.0]))
    ad.sum(x * c).backward()
    assert c.grad is None
    assert x.grad.tolist() == [3.0, 4.0]


def test_reused_node_accumulates():
    x = leaf([3.0])
    y = x * x + x
    ad.sum(y).backward()
    assert x.grad.tolist() == [7.0]


# one scalar function per op, each checked against central differences
OPS = {
    "add": lambda t, c: ad.sum(t + c),
    "sub": lambda t, c: ad.sum(ad.square(c - t)),
    "mul": lambda t, c: ad.sum(t * c * t),
    "exp": lambda t, c: ad.sum(ad.exp(t * 0.3)),
    "log": lambda t, c: ad.sum(ad.log(ad.square(t) + 1.0)),
    "relu": lambda t, c: ad.sum(ad.relu(t) * c),
    "tanh": lambda t, c: ad.sum(ad.tanh(t) * c),
    "clamp": lambda t, c: ad.sum(ad.clamp(t, -0.5, 0.7) * c),
    "minimum": lambda t, c: ad.sum(ad.minimum(t, c)),
    "matmul": lambda t, c: ad.sum(ad.square(t @ Tensor(np.outer(np.arange(4.0), 1.0 / (1 + np.arange(3.0)))))),
    "mean": lambda t, c: ad.mean(ad.square(ad.mean(t, axis=0))),
    "softmax": lambda t, c: ad.sum(ad.softmax(t) * c),
    "log_softmax": lambda t, c: ad.sum(ad.log_softmax(t, axis=-1) * c),
    "gather": lambda t, c: ad.sum(ad.square(ad.gather(t, np.array([0, 3, 2]), axis=-1))),
    "concat": lambda t, c: ad.sum(ad.square(ad.concat([t, t * c], axis=0))),
    "reshape": lambda t, c: ad.sum(ad.square(ad.reshape(t, (4, 3))) * Tensor(np.arange(12.0).reshape(4, 3))),
    "index": lambda t, c: ad.sum(ad.square(t[1:, ::2])),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(4))
def test_op_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3, 4))
    x0[np.abs(x0) < 0.05] += 0.2  # keep away from relu/clamp kinks
    c = Tensor(rng.normal(size=(3, 4)))
    fn = OPS[name]
    x = leaf(x0)
    fn(x, c).backward()
    numeric = central_difference(lambda v: fn(Tensor(v), c).item(), x0, h=1e-5)
    assert relative_error(x.grad, numeric) < 1e-6


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-10, 10)))
def test_softmax_log_paths_stay_finite(x):
    t = leaf(x * 10)
    loss = ad.sum(ad.log_softmax(t) * Tensor(np.ones((4, 5)))) + ad.sum(ad.log(ad.softmax(t)))
    loss.backward()
    assert np.isfinite(loss.item()) and np.isfinite(t.grad).all()


# ---------------------------------------------------------------- ParamVector
def test_param_vector_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    arrays = [("w", rng.normal(size=(3, 4)).astype(np.float32)), ("b", rng.normal(size=4).astype(np.float32))]
    pv = ParamVector.from_arrays(arrays)
    back = pv.unflatten()
    assert all(np.array_equal(back[n], a) for n, a in arrays)
    assert np.array_equal(pv.flatten_from(back), pv.flat)
    assert pv.flat.tobytes() == np.concatenate([a.ravel() for _, a in arrays]).tobytes()


def test_param_layout_must_cover_payload():
    with pytest.raises(ShapeMismatch):
        ParamVector(np.zeros(5, np.float32), [ParamEntry("a", (2,), 0), ParamEntry("b", (2,), 2)])
    with pytest.raises(ShapeMismatch):
        ParamVector(np.zeros(4, np.float32), [ParamEntry("a", (2,), 0), ParamEntry("b", (2,), 1)])


def test_freeze_is_read_only_and_independent():
    pv = ParamVector.from_arrays([("w", np.ones(3))])
    frozen = pv.freeze()
    pv.flat[0] = 5
    assert frozen.flat[0] == 1 and frozen.frozen and not pv.frozen
    with pytest.raises(ValueError):
        frozen.flat[0] = 2


# ----------------------------------------------------------------------- Adam
def test_zero_gradient_keeps_parameters():
    pv = ParamVector.from_arrays([("w", np.arange(4.0))])
    before = pv.flat.copy()
    state = AdamState.zeros_like(pv)
    for _ in range(3):
        adam_step(pv, np.zeros(4), state)
    assert np.array_equal(pv.flat, before)


def test_clip_scales_norm_twenty_by_half():
    g = np.array([12.0, 16.0])  # norm 20
    clipped, norm = clip_grad_norm(g, 10.0)
    assert norm == 20.0
    assert np.allclose(clipped, g * 0.5)


def test_first_adam_step_on_constant_gradient():
    pv = ParamVector(np.zeros(1, dtype=np.float64), [ParamEntry("x", (1,), 0)])
    adam_step(pv, np.ones(1), AdamState.zeros_like(pv), lr=1e-4)
    assert pv.flat[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_clipping_happens_before_moments():
    a = ParamVector(np.zeros(2, dtype=np.float64), [ParamEntry("x", (2,), 0)])
    b = ParamVector(np.zeros(2, dtype=np.float64), [ParamEntry("x", (2,), 0)])
    sa, sb = AdamState.zeros_like(a), AdamState.zeros_like(b)
    norm = adam_step(a, np.array([12.0, 16.0]), sa, max_grad_norm=10.0)
    adam_step(b, np.array([6.0, 8.0]), sb, max_grad_norm=None)
    assert norm == 20.0
    assert np.allclose(sa.m, sb.m) and np.allclose(sa.v, sb.v)
