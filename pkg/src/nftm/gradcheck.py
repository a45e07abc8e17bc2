"""Central-finite-difference verification of analytic gradients.

`finite_diff_check` is the low-level probe; `battery` sweeps every
differentiable operation plus the composite two-step rollout losses over
seeded random instances and reports the worst relative error per operation.
Straight-through binarization is excluded by construction (its backward is
the identity surrogate, not the a.e.-zero true derivative) and is checked
exactly by `ste_identity_check` instead.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .optim import ParamSet


def finite_diff_check(f, params: ParamSet, eps: float = 1e-5) -> float:
    """Max over all parameter entries of |analytic - central difference| / (|cd| + 1e-12).

    ``f`` must be a deterministic scalar-valued function of ``params`` (it is
    re-evaluated 2 x #entries times, so keep the instance small).
    """
    params.zero_grad()
    loss = f(params)
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ValueError("finite_diff_check needs f to return a scalar Tensor")
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    params.zero_grad()

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params).item()
            flat[i] = orig - eps
            lo = f(params).item()
            flat[i] = orig
            cd = (hi - lo) / (2.0 * eps)
            err = abs(analytic[name].reshape(-1)[i] - cd) / (abs(cd) + 1e-12)
            if err > worst:
                worst = err
    return worst


def ste_identity_check(rng: np.random.Generator) -> bool:
    """STE forward is exactly binary and its backward is exactly the identity."""
    x = Tensor(rng.uniform(-2.0, 2.0, size=(4, 5)), requires_grad=True)
    y = ad.ste_binarize(x)
    if not np.all((y.data == 0.0) | (y.data == 1.0)):
        return False
    up = rng.standard_normal((4, 5))
    loss = ad.reduce("sum", ad.mul(y, Tensor(up)))
    backward(loss)
    return np.array_equal(x.grad, up)


# ---------------------------------------------------------------------------
# instance generators (kink-aware)
# ---------------------------------------------------------------------------

def _away_from(rng, shape, lo, hi, avoid=(), margin=1e-3, tries=200):
    for _ in range(tries):
        x = rng.uniform(lo, hi, size=shape)
        if all(np.abs(x - a).min() > margin for a in avoid):
            return x
    raise RuntimeError("could not sample inputs away from kinks")


def _tv_safe(rng, shape, margin=1e-3, tries=200):
    for _ in range(tries):
        x = rng.uniform(-2.0, 2.0, size=shape)
        dx = np.abs(x[..., :, 1:] - x[..., :, :-1])
        dy = np.abs(x[..., 1:, :] - x[..., :-1, :])
        if dx.min() > margin and dy.min() > margin:
            return x
    raise RuntimeError("could not sample TV-safe inputs")


def _param(ps, name, arr):
    return ps.add(name, Tensor(arr, requires_grad=True))


def _case_pointwise(kind):
    def build(rng):
        ps = ParamSet()
        if kind == "log":
            x = rng.uniform(0.3, 2.0, size=(2, 3))
        elif kind == "relu":
            x = _away_from(rng, (2, 3), -2.0, 2.0, avoid=(0.0,))
        else:
            x = rng.uniform(-2.0, 2.0, size=(2, 3))
        _param(ps, "x", x)
        return lambda p: ad.reduce("mean", ad.pointwise(kind, p["x"])), ps

    return build


def _case_arithmetic(rng):
    ps = ParamSet()
    _param(ps, "a", rng.uniform(-2.0, 2.0, size=(3, 2)))
    _param(ps, "b", rng.uniform(0.5, 2.5, size=(3, 2)))

    def f(p):
        return ad.reduce(
            "mean", ad.add(ad.mul(p["a"], p["b"]), ad.div(ad.sub(p["a"], p["b"]), p["b"]))
        )

    return f, ps


def _case_affine(rng):
    ps = ParamSet()
    _param(ps, "W", rng.uniform(-1.0, 1.0, size=(3, 2)))
    _param(ps, "b", rng.uniform(-1.0, 1.0, size=2))
    x = Tensor(rng.uniform(-2.0, 2.0, size=(4, 3)))
    return lambda p: ad.reduce("mean", ad.square(ad.affine(x, p["W"], p["b"]))), ps


def _case_conv(mode):
    def build(rng):
        ps = ParamSet()
        _param(ps, "K", rng.uniform(-0.5, 0.5, size=(3, 2, 3, 3)))
        _param(ps, "b", rng.uniform(-0.2, 0.2, size=3))
        _param(ps, "x", rng.uniform(-1.0, 1.0, size=(2, 4, 4)))
        return (
            lambda p: ad.reduce("mean", ad.square(ad.conv2d(p["x"], p["K"], p["b"], mode))),
            ps,
        )

    return build


def _case_clamp(rng):
    ps = ParamSet()
    _param(ps, "x", _away_from(rng, (3, 3), -2.0, 2.0, avoid=(-1.0, 1.0)))
    return lambda p: ad.reduce("sum", ad.square(ad.clamp_through(p["x"], -1.0, 1.0))), ps


def _case_reduce(kind):
    def build(rng):
        ps = ParamSet()
        _param(ps, "x", rng.uniform(-2.0, 2.0, size=(2, 3)))
        return lambda p: ad.square(ad.reduce(kind, p["x"])), ps

    return build


def _case_shapes(rng):
    ps = ParamSet()
    _param(ps, "a", rng.uniform(-2.0, 2.0, size=(2, 3)))
    _param(ps, "b", rng.uniform(-2.0, 2.0, size=(1, 3)))

    def f(p):
        cat = ad.concat([p["a"], p["b"]], axis=0)
        top = ad.narrow(cat, 0, 0, 2)
        return ad.reduce("mean", ad.square(ad.reshape(top, (6,))))

    return f, ps


def _case_laplacian(rng):
    from .heat import laplacian5

    ps = ParamSet()
    _param(ps, "u", rng.uniform(-2.0, 2.0, size=(4, 5)))
    return lambda p: ad.reduce("mean", ad.square(laplacian5(p["u"]))), ps


def _case_tv(rng):
    # the quadratic anchor keeps every probe gradient above the FD noise
    # floor: TV sign patterns cancel exactly on interior cells, and a zero
    # analytic gradient against float-roundoff central differences is
    # meaningless under a relative-error metric
    from .inpaint import tv_l1

    ps = ParamSet()
    _param(ps, "x", _tv_safe(rng, (2, 3, 4)))

    def f(p):
        return ad.add(tv_l1(p["x"]), ad.mul(ad.reduce("sum", ad.square(p["x"])), Tensor(0.05)))

    return f, ps


def _case_patches_1d(rng):
    from .field import FieldGrid, read_all_patches

    ps = ParamSet()
    _param(ps, "f", rng.uniform(-2.0, 2.0, size=6))

    def f(p):
        grid = FieldGrid(p["f"], "periodic")
        return ad.reduce("mean", ad.square(read_all_patches(grid, 1)))

    return f, ps


def _case_read_bilinear(rng):
    from .field import FieldGrid, Head, read_patch

    ps = ParamSet()
    _param(ps, "f", rng.uniform(-2.0, 2.0, size=(2, 4, 4)))
    pos = rng.uniform(0.6, 2.4, size=2)

    def f(p):
        grid = FieldGrid(p["f"], "replicate")
        patch = read_patch(grid, Head(pos, radius=1.0, support_shape="ball"))
        return ad.reduce("mean", ad.square(patch))

    return f, ps


def _case_scatter(rng):
    from .field import FieldGrid, Head, scatter_write

    ps = ParamSet()
    _param(ps, "f", rng.uniform(-2.0, 2.0, size=7))
    _param(ps, "v", rng.uniform(-2.0, 2.0, size=3))
    cells = rng.uniform(0.0, 6.4, size=3)

    def f(p):
        grid = FieldGrid(p["f"], "replicate")
        out = scatter_write(grid, [Head(c) for c in cells], p["v"])
        return ad.reduce("mean", ad.square(out.data))

    return f, ps


def _case_rollout_direct(rng):
    """Two machine steps, dense direct-write, smooth controller."""
    from .field import FieldGrid, MachineSpec, rollout

    ps = ParamSet()
    _param(ps, "W", rng.uniform(-0.8, 0.8, size=(3, 1)))
    _param(ps, "b", rng.uniform(-0.3, 0.3, size=1))
    f0 = rng.uniform(-1.0, 1.0, size=6)
    target = rng.uniform(-1.0, 1.0, size=6)

    def f(p):
        def controller(patches):
            z = ad.affine(patches, p["W"], p["b"])
            return ad.reshape(z, (patches.shape[0],))

        spec = MachineSpec(controller=controller, update_mode="direct-write", g=ad.tanh, radius=1)
        trace = rollout(spec, FieldGrid(f0, "periodic"), 2)
        return ad.reduce("mean", ad.square(ad.sub(trace.fields[-1].data, Tensor(target))))

    return f, ps


def _case_rollout_attention(rng):
    """Two attention-kernel steps with controller-produced weights."""
    from .field import FieldGrid, MachineSpec, rollout

    ps = ParamSet()
    _param(ps, "W", rng.uniform(-0.3, 0.3, size=(3, 3)))
    _param(ps, "b", rng.uniform(-0.2, 0.2, size=3))
    f0 = rng.uniform(-1.0, 1.0, size=5)
    target = rng.uniform(-1.0, 1.0, size=5)

    def f(p):
        def controller(patches):
            return ad.affine(patches, p["W"], p["b"])

        spec = MachineSpec(
            controller=controller, update_mode="attention-kernel", g=ad.tanh, radius=1
        )
        trace = rollout(spec, FieldGrid(f0, "periodic"), 2)
        return ad.reduce("mean", ad.square(ad.sub(trace.fields[-1].data, Tensor(target))))

    return f, ps


def _case_hetero_nll(rng):
    from .heat import PdeTrainConfig, hetero_nll

    ps = ParamSet()
    _param(ps, "raw_alpha", rng.uniform(-2.0, 2.0, size=(4, 4)))
    _param(ps, "s", rng.uniform(-1.5, 1.5, size=(4, 4)))
    delta = rng.uniform(-1.0, 1.0, size=(4, 4))
    L = rng.uniform(-2.0, 2.0, size=(4, 4))
    cfg = PdeTrainConfig(gamma=0.0)
    return lambda p: hetero_nll(delta, p["raw_alpha"], p["s"], L, cfg), ps


def _case_heat_unroll(rng):
    from .heat import laplacian5

    ps = ParamSet()
    _param(ps, "raw_alpha", np.atleast_1d(rng.uniform(-2.5, -1.0)))
    u0 = rng.uniform(0.0, 1.0, size=(5, 5))
    gt = rng.uniform(0.0, 1.0, size=(5, 5))

    def f(p):
        alpha = ad.softplus(p["raw_alpha"])
        u = Tensor(u0)
        for _ in range(2):
            u = ad.add(u, ad.mul(alpha, laplacian5(u)))
        return ad.reduce("mean", ad.square(ad.sub(u, Tensor(gt))))

    return f, ps


def _case_inpaint_unguarded(rng):
    """Two unguarded refinement steps of a tiny smooth controller at 8x8.

    Weight scales keep every clamp strictly interior so the composite stays
    differentiable at the probed points; the clamps and the relu-equipped
    production controller are exercised by their dedicated cases. A weak
    weight-norm anchor keeps small coupling gradients above the FD noise
    floor of the relative-error metric.
    """
    from .inpaint import InpaintConfig, _propose, _sample_loss

    ps = ParamSet()
    c = 3
    _param(ps, "k0", rng.uniform(-0.05, 0.05, size=(c, 7, 3, 3)))
    _param(ps, "b0", rng.uniform(-0.02, 0.02, size=c))
    _param(ps, "k1", rng.uniform(-0.05, 0.05, size=(4, c, 3, 3)))
    _param(ps, "b1", rng.uniform(-0.02, 0.02, size=4))
    H = W = 8
    gt = rng.uniform(-0.6, 0.6, size=(1, 3, H, W))
    M = (rng.random((1, 1, H, W)) < 0.6).astype(np.float64)
    I_obs = M * gt
    I0 = np.where(M > 0, gt, rng.uniform(-0.6, 0.6, size=(1, 3, H, W)))
    cfg = InpaintConfig(epochs=1, channels=c, layers=2)

    def f(p):
        I = Tensor(I0)
        frames = [I]
        for t in range(2):
            h = ad.concat([I, Tensor(M), Tensor(M * I_obs)], axis=1)
            h = ad.tanh(ad.conv2d(h, p["k0"], p["b0"], "replicate"))
            h = ad.conv2d(h, p["k1"], p["b1"], "replicate")
            dI = ad.clamp_through(ad.tanh(ad.narrow(h, 1, 0, 3)), -cfg.clip_at(t), cfg.clip_at(t))
            gate = ad.sigmoid(ad.narrow(h, 1, 3, 1))
            I = _propose(I, dI, gate, cfg.beta_final, M, I_obs)
            frames.append(I)
        loss = _sample_loss(frames, gt, cfg)
        for name in ("k0", "b0", "k1", "b1"):
            loss = ad.add(loss, ad.mul(ad.reduce("sum", ad.square(p[name])), Tensor(0.05)))
        return loss

    return f, ps


def battery(trials: int = 100, seed: int = 0, eps: float = 1e-5, subset=None) -> dict:
    """Worst finite-difference relative error per op over seeded random instances."""
    cases = {
        **{f"pointwise_{k}": _case_pointwise(k) for k in ad.POINTWISE_KINDS if k != "relu"},
        "pointwise_relu": _case_pointwise("relu"),
        "arithmetic": _case_arithmetic,
        "affine": _case_affine,
        "conv2d_zero": _case_conv("zero"),
        "conv2d_replicate": _case_conv("replicate"),
        "conv2d_periodic": _case_conv("periodic"),
        "clamp_through": _case_clamp,
        "reduce_sum": _case_reduce("sum"),
        "reduce_mean": _case_reduce("mean"),
        "shape_ops": _case_shapes,
        "laplacian5": _case_laplacian,
        "tv_l1": _case_tv,
        "read_all_patches": _case_patches_1d,
        "read_patch_bilinear": _case_read_bilinear,
        "scatter_write": _case_scatter,
        "rollout2_direct": _case_rollout_direct,
        "rollout2_attention": _case_rollout_attention,
        "hetero_nll": _case_hetero_nll,
        "heat_unroll2": _case_heat_unroll,
        "inpaint_unguarded2": _case_inpaint_unguarded,
    }
    if subset is not None:
        cases = {k: v for k, v in cases.items() if k in subset}
    out = {}
    for name, build in cases.items():
        tag = zlib.crc32(name.encode()) % 65536
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng(seed * 100003 + tag + t)
            f, ps = build(rng)
            worst = max(worst, finite_diff_check(f, ps, eps))
        out[name] = worst
    return out
