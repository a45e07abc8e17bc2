"""Heat-equation instantiation: diffusion-coefficient identification.

An exact explicit-Euler forward solver generates ground truth; a model with a
global scalar or a coordinate-MLP spatial diffusion map is fit in two phases:
teacher forcing on one-step transitions under a heteroscedastic Gaussian
likelihood (phase A), then fine-tuning through its own multi-step rollout
(phase B). dt = dx = 1 throughout, so the coefficient is the sole rate
constant and explicit-Euler stability requires alpha <= 0.25.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .autodiff import (
    Tensor,
    _from_op,
    backward,
    exp,
    mul,
    reduce,
    softplus,
    square,
    sub,
    tanh,
    affine,
    reshape,
)
from .field import psnr as psnr_db
from .optim import ParamSet, adam_step

CFL_LIMIT = 0.25


def laplacian5(u: Tensor) -> Tensor:
    """5-point Laplacian with replicated edges; accepts (H,W) or batched (...,H,W)."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    y = kernels.laplacian5(u.data)

    def bw(g):
        return (kernels.laplacian5_adjoint(g),)

    return _from_op(y, (u,), bw)


def _check_cfl(alpha) -> None:
    amax = float(np.max(alpha))
    if amax > CFL_LIMIT + 1e-12:
        raise ValueError(f"CFL violation: alpha max {amax:.4g} exceeds {CFL_LIMIT}")


def heat_step_exact(u: np.ndarray, alpha) -> np.ndarray:
    """u' = u + alpha * laplacian(u); errors if the stability bound is violated."""
    _check_cfl(alpha)
    return u + np.asarray(alpha) * kernels.laplacian5(u)


def _avgpool3(a: np.ndarray) -> np.ndarray:
    ap = kernels.pad2d(a, 1, "replicate")
    out = np.zeros_like(a)
    for di in range(3):
        for dj in range(3):
            out += ap[di : di + a.shape[0], dj : dj + a.shape[1]]
    return out / 9.0


def make_variable_alpha(H: int, W: int) -> np.ndarray:
    """0.05 background with a 0.15 central square (side H//4), then 3x 3x3 mean pools."""
    if H < 16 or W < 16:
        raise ValueError(f"variable-alpha map needs H,W >= 16, got {H}x{W}")
    a = np.full((H, W), 0.05)
    side = H // 4
    r0 = (H - side) // 2
    c0 = (W - side) // 2
    a[r0 : r0 + side, c0 : c0 + side] = 0.15
    for _ in range(3):
        a = _avgpool3(a)
    return a


def _gaussian_bump_field(H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    f = np.zeros((H, W))
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sig = rng.uniform(H / 16, H / 5)
        amp = rng.uniform(0.4, 1.0)
        f += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    return f / max(f.max(), 1e-9)


def gen_heat_dataset(alpha, n_sequences: int, H: int, W: int, T: int, seed: int) -> np.ndarray:
    """Seeded smooth initial fields evolved T exact steps; returns (n, T+1, H, W)."""
    _check_cfl(alpha)
    rng = np.random.default_rng(seed)
    out = np.empty((n_sequences, T + 1, H, W))
    for i in range(n_sequences):
        u = _gaussian_bump_field(H, W, rng)
        out[i, 0] = u
        for t in range(1, T + 1):
            u = heat_step_exact(u, alpha)
            out[i, t] = u
    return out


@dataclass
class PdeTrainConfig:
    """Loss weights, priors, and the two-phase schedule."""

    beta: float = 1.0
    gamma: float = 0.0
    lam_alpha: float = 1e-6
    lam_s: float = 1e-4
    lam_tv_alpha: float = 1e-4
    phase_a_epochs: int = 1200
    phase_b_epochs: int = 60
    rollout_T: int = 10
    lr: float = 1e-2
    lr_b: Optional[float] = None  # default lr/10: fine-tuning an already-fit coefficient
    hidden: tuple = (64, 64)
    seed: int = 0
    fix_sigma: bool = False
    include_u: bool = False

    def __post_init__(self):
        if self.rollout_T < 1:
            raise ValueError("phase B rollout length must be >= 1")


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


class GlobalAlphaModel:
    """Scalar pre-activation diffusion coefficient and scalar log-variance."""

    spatial = False

    def __init__(self, cfg: PdeTrainConfig, alpha_init: float = 0.1):
        self.cfg = cfg
        self.params = ParamSet()
        self.params.add("raw_alpha", Tensor(_inv_softplus(alpha_init), requires_grad=True))
        if cfg.fix_sigma:
            self._s = Tensor(0.0)
        else:
            self.params.add("s", Tensor(0.0, requires_grad=True))

    def raw_alpha_and_s(self, u: Optional[np.ndarray] = None):
        s = self._s if self.cfg.fix_sigma else self.params["s"]
        return self.params["raw_alpha"], s

    def alpha_map(self) -> float:
        raw, _ = self.raw_alpha_and_s()
        return float(softplus(raw).data)


class SpatialAlphaModel:
    """MLP from normalized cell coordinates to (raw alpha, log sigma^2) maps.

    The coefficient head reads coordinates only by default, keeping the
    Laplacian operator fixed and the map interpretable; include_u adds the
    local field value as an extra input channel.
    """

    spatial = True

    def __init__(self, H: int, W: int, cfg: PdeTrainConfig, alpha_init: float = 0.1):
        self.cfg = cfg
        self.H, self.W = H, W
        ys = np.linspace(-1.0, 1.0, H)
        xs = np.linspace(-1.0, 1.0, W)
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        self.coords = np.stack([yy.ravel(), xx.ravel()], axis=1)
        rng = np.random.default_rng(cfg.seed)
        self.params = ParamSet()
        in_dim = 3 if cfg.include_u else 2
        dims = [in_dim, *cfg.hidden]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            sc = np.sqrt(2.0 / (a + b))
            self.params.add(f"w{i}", Tensor(rng.standard_normal((a, b)) * sc, requires_grad=True))
            self.params.add(f"b{i}", Tensor(np.zeros(b), requires_grad=True))
        last = dims[-1]
        sc = 1.0 / np.sqrt(last)
        self.params.add("wa", Tensor(rng.standard_normal((last, 1)) * 0.01 * sc, requires_grad=True))
        self.params.add("ba", Tensor(np.full(1, _inv_softplus(alpha_init)), requires_grad=True))
        if not cfg.fix_sigma:
            self.params.add("ws", Tensor(rng.standard_normal((last, 1)) * 0.01 * sc, requires_grad=True))
            self.params.add("bs", Tensor(np.zeros(1), requires_grad=True))
        self.n_hidden = len(cfg.hidden)

    def raw_alpha_and_s(self, u: Optional[np.ndarray] = None):
        out_shape = (self.H, self.W)
        if self.cfg.include_u:
            if u is None:
                raise ValueError("include_u model needs the current field for its inputs")
            u = np.asarray(u, dtype=np.float64)
            reps = 1 if u.ndim == 2 else u.shape[0]
            if reps > 1:
                out_shape = (reps, self.H, self.W)
            coords = np.tile(self.coords, (reps, 1))
            feats = np.concatenate([u.reshape(-1, 1), coords], axis=1)
        else:
            feats = self.coords
        h = Tensor(feats)
        for i in range(self.n_hidden):
            h = tanh(affine(h, self.params[f"w{i}"], self.params[f"b{i}"]))
        raw = reshape(affine(h, self.params["wa"], self.params["ba"]), out_shape)
        if self.cfg.fix_sigma:
            s = Tensor(np.zeros(out_shape))
        else:
            s = reshape(affine(h, self.params["ws"], self.params["bs"]), out_shape)
        return raw, s

    def alpha_map(self) -> np.ndarray:
        from .autodiff import no_grad

        with no_grad():
            raw, _ = self.raw_alpha_and_s(np.zeros((self.H, self.W)) if self.cfg.include_u else None)
            return softplus(raw).data.copy()


def hetero_nll(delta_gt: np.ndarray, raw_alpha: Tensor, s: Tensor, L: np.ndarray, cfg: PdeTrainConfig) -> Tensor:
    """Mean per-site weighted Gaussian NLL of delta ~ N(alpha*L, sigma^2) plus weak priors.

    alpha = softplus(raw_alpha), sigma^2 = exp(s); sites are weighted by
    |L|^gamma normalized to mean one (gamma=0 disables reweighting).
    """
    if cfg.gamma != 0.0:
        w = np.abs(L) ** cfg.gamma
        m = w.mean()
        w = w / m if m > 0 else np.ones_like(w)
    else:
        w = None
    alpha = softplus(raw_alpha)
    resid = sub(Tensor(delta_gt), mul(alpha, Tensor(L)))
    site = mul(square(resid), exp(mul(s, Tensor(-1.0)))) * 0.5 + s * (cfg.beta / 2.0)
    if w is not None:
        site = mul(site, Tensor(w))
    loss = reduce("mean", site)
    if cfg.lam_alpha:
        loss = loss + reduce("mean", square(raw_alpha)) * cfg.lam_alpha
    if cfg.lam_s and s.requires_grad:
        loss = loss + reduce("mean", square(s)) * cfg.lam_s
    return loss


class TrainingDivergence(RuntimeError):
    pass


def _transition_arrays(dataset: np.ndarray):
    u_t = dataset[:, :-1].reshape(-1, dataset.shape[2], dataset.shape[3])
    u_next = dataset[:, 1:].reshape(-1, dataset.shape[2], dataset.shape[3])
    delta = u_next - u_t
    L = kernels.laplacian5(u_t)
    return delta, L


def train_phase_a(dataset: np.ndarray, model, cfg: PdeTrainConfig) -> list:
    """Teacher forcing: fit the NLL on ground-truth one-step transitions."""
    delta, L = _transition_arrays(dataset)
    u_in = None
    if getattr(model, "spatial", False) and cfg.include_u:
        u_in = dataset[:, :-1].reshape(-1, dataset.shape[2], dataset.shape[3])
    history = []
    for epoch in range(1, cfg.phase_a_epochs + 1):
        try:
            raw, s = model.raw_alpha_and_s(u_in)
            loss = hetero_nll(delta, raw, s, L, cfg)
        except FloatingPointError as e:
            raise TrainingDivergence(f"phase A diverged at epoch {epoch}: {e}") from e
        if not np.isfinite(loss.data):
            raise TrainingDivergence(f"phase A loss is not finite at epoch {epoch}")
        backward(loss)
        adam_step(model.params, lr=cfg.lr)
        history.append(loss.item())
    return history


def _model_unroll(model, u0: Tensor, T: int):
    """Differentiable T-step rollout u <- u + alpha*lap(u); yields each frame."""
    if getattr(model.cfg, "include_u", False):
        raise ValueError("rollout training supports coordinate-only coefficient models")
    raw, _ = model.raw_alpha_and_s(None)
    alpha = softplus(raw)
    u = u0
    frames = []
    for _ in range(T):
        u = u + mul(alpha, laplacian5(u))
        frames.append(u)
    return frames


def train_phase_b(dataset: np.ndarray, model, cfg: PdeTrainConfig) -> list:
    """Rollout training: pointwise MSE through the model's own unroll.

    Adds a total-variation penalty on the exposed coefficient map for spatial
    models (the configured smoothness regularizer).
    """
    from .inpaint import tv_l1

    T = min(cfg.rollout_T, dataset.shape[1] - 1)
    u0 = Tensor(dataset[:, 0])
    targets = [Tensor(dataset[:, t]) for t in range(1, T + 1)]
    lr = cfg.lr_b if cfg.lr_b is not None else cfg.lr * 0.1
    # the rollout objective replaces the NLL: stale moments would steer the
    # first fine-tuning steps in the old gradient direction
    model.params.reset_optimizer()
    history = []
    for epoch in range(1, cfg.phase_b_epochs + 1):
        try:
            frames = _model_unroll(model, u0, T)
            loss = None
            for f, tgt in zip(frames, targets):
                term = reduce("mean", square(sub(f, tgt)))
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / T)
            if model.spatial and cfg.lam_tv_alpha:
                raw, _ = model.raw_alpha_and_s(None)
                loss = loss + tv_l1(softplus(raw)) * cfg.lam_tv_alpha
        except FloatingPointError as e:
            raise TrainingDivergence(f"phase B diverged at epoch {epoch}: {e}") from e
        if not np.isfinite(loss.data):
            raise TrainingDivergence(f"phase B loss is not finite at epoch {epoch}")
        backward(loss)
        adam_step(model.params, lr=lr)
        history.append(loss.item())
    return history


def eval_alpha(alpha_hat, alpha_true) -> dict:
    """Mean and max absolute coefficient error (scalar broadcasting allowed)."""
    a = np.asarray(alpha_hat, dtype=np.float64)
    b = np.asarray(alpha_true, dtype=np.float64)
    try:
        d = np.abs(a - b)
    except ValueError as e:
        raise ValueError(f"alpha shapes are not broadcastable: {a.shape} vs {b.shape}") from e
    return {"mae": float(d.mean()), "max_abs_err": float(d.max())}


def model_rollout(model, u0: np.ndarray, T: int) -> np.ndarray:
    """Inference rollout of the fitted model; returns (T+1, H, W)."""
    from .autodiff import no_grad

    include_u = getattr(model.cfg, "include_u", False)
    with no_grad():
        frames = [u0.copy()]
        u = u0.copy()
        alpha = None
        if not include_u:
            raw, _ = model.raw_alpha_and_s(None)
            alpha = softplus(raw).data
        for _ in range(T):
            if include_u:
                raw, _ = model.raw_alpha_and_s(u)
                alpha = softplus(raw).data
            u = u + alpha * kernels.laplacian5(u)
            frames.append(u.copy())
    return np.stack(frames)


def rollout_psnr(model, u0: np.ndarray, T: int, gt_trace: np.ndarray) -> list:
    """Per-step PSNR of the model rollout against ground truth (peak = gt range)."""
    if gt_trace.shape[0] < T + 1:
        raise ValueError(f"ground-truth trace has {gt_trace.shape[0]} frames, need {T + 1}")
    pred = model_rollout(model, u0, T)
    peak = float(gt_trace.max() - gt_trace.min())
    peak = peak if peak > 0 else 1.0
    return [psnr_db(pred[t], gt_trace[t], peak) for t in range(1, T + 1)]
