"""ParamSet bookkeeping and the Adam update contract."""

import numpy as np
import pytest

from nftm.autodiff import Tensor, backward, mul, reduce, square, sub
from nftm.optim import ParamSet, adam_step


def test_first_step_moves_by_lr():
    ps = ParamSet()
    w = ps.add("w", Tensor(1.0, requires_grad=True))
    w.grad[...] = 1.0
    adam_step(ps, lr=0.1)
    assert w.data == pytest.approx(0.9, abs=1e-6)
    assert w.grad == 0.0  # zeroed afterwards


def test_zero_gradient_leaves_parameter_unchanged():
    ps = ParamSet()
    w = ps.add("w", Tensor([2.0, -3.0], requires_grad=True))
    adam_step(ps, lr=0.5)
    assert np.array_equal(w.data, [2.0, -3.0])


def test_two_steps_decrease_convex_quadratic():
    ps = ParamSet()
    w = ps.add("w", Tensor([4.0], requires_grad=True))
    target = Tensor([1.0])
    losses = []
    for _ in range(2):
        loss = reduce("sum", square(sub(w, target)))
        losses.append(loss.item())
        backward(loss)
        adam_step(ps, lr=0.05)
    final = reduce("sum", square(sub(w, target))).item()
    assert losses[1] < losses[0] and final < losses[1]


def test_missing_gradient_names_parameter():
    ps = ParamSet()
    ps.add("w", Tensor(1.0, requires_grad=True))
    ps["w"].grad = None
    with pytest.raises(ValueError, match="'w'"):
        adam_step(ps, lr=0.1)


def test_duplicate_name_rejected():
    ps = ParamSet()
    ps.add("w", Tensor(1.0, requires_grad=True))
    with pytest.raises(ValueError, match="duplicate"):
        ps.add("w", Tensor(2.0, requires_grad=True))


def test_requires_grad_enforced():
    ps = ParamSet()
    with pytest.raises(ValueError, match="requires_grad"):
        ps.add("w", Tensor(1.0))


def test_state_shapes_match_parameters():
    ps = ParamSet()
    ps.add("w", Tensor(np.zeros((2, 3)), requires_grad=True))
    assert ps._m["w"].shape == (2, 3) and ps._v["w"].shape == (2, 3)
    sd = ps.state_dict()
    ps["w"].data[...] = 7.0
    ps.load_state_dict(sd)
    assert np.array_equal(ps["w"].data, np.zeros((2, 3)))


def test_adam_bias_correction_tracks_sign():
    # constant gradient of 2: every bias-corrected step is ~lr in magnitude
    ps = ParamSet()
    w = ps.add("w", Tensor(0.0, requires_grad=True))
    for _ in range(3):
        backward(mul(w, Tensor(2.0)))
        adam_step(ps, lr=0.01)
    assert w.data == pytest.approx(-0.03, abs=1e-4)
