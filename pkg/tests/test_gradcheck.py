"""Finite-difference verifier behavior and spot checks from the op battery."""

import numpy as np
import pytest

from nftm import autodiff as ad
from nftm.autodiff import Tensor
from nftm.gradcheck import battery, finite_diff_check, ste_identity_check
from nftm.optim import ParamSet


def test_linear_function_error_is_float_noise():
    rng = np.random.default_rng(0)
    ps = ParamSet()
    ps.add("W", Tensor(rng.standard_normal((3, 3)), requires_grad=True))
    err = finite_diff_check(lambda p: ad.reduce("sum", p["W"]), ps)
    assert err <= 1e-10


def test_rejects_non_scalar_objective():
    ps = ParamSet()
    ps.add("x", Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(ValueError, match="scalar"):
        finite_diff_check(lambda p: ad.square(p["x"]), ps)


def test_hetero_nll_instance_passes():
    res = battery(trials=5, seed=1, subset={"hetero_nll"})
    assert res["hetero_nll"] <= 1e-4


def test_inpaint_composite_passes():
    res = battery(trials=3, seed=2, subset={"inpaint_unguarded2"})
    assert res["inpaint_unguarded2"] <= 1e-4


def test_rollout_composites_pass():
    res = battery(trials=3, seed=3, subset={"rollout2_direct", "rollout2_attention"})
    assert max(res.values()) <= 1e-4


def test_ste_identity_not_fd():
    # straight-through gradients are a surrogate: verified exactly, not by FD
    assert ste_identity_check(np.random.default_rng(4))


def test_battery_covers_all_pointwise_kinds():
    res = battery(trials=1, seed=0)
    for kind in ad.POINTWISE_KINDS:
        assert f"pointwise_{kind}" in res
