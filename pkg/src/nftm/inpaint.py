"""Guarded iterative image inpainting with a convolutional controller.

The controller sees (image, mask, masked observation) and proposes per-pixel
corrections plus a gate; updates are scaled by a step size, range-clamped,
and known pixels are restored after every step. With the guard on, a step
that would raise the explicit energy (masked data term + total variation) is
rejected and the step size halves, so the energy trace is non-increasing by
construction. Training samples a rollout depth from a curriculum and
backpropagates through the accepted trajectory only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    backward,
    clamp_through,
    concat,
    conv2d,
    mul,
    narrow,
    no_grad,
    reduce,
    sigmoid,
    square,
    sub,
    tanh,
    _from_op,
)
from .field import psnr as psnr_db
from .optim import ParamSet, adam_step

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# masks and corruption
# ---------------------------------------------------------------------------

@dataclass
class MaskSpec:
    """Target unknown-pixel fraction and the dropout/block mixture."""

    fraction: float = 0.35
    kind: str = "mix"  # mix | dropout | blocks
    seed: int = 0

    def __post_init__(self):
        if not 0.25 <= self.fraction <= 0.50:
            raise ValueError(f"removal fraction must lie in [0.25, 0.50], got {self.fraction}")
        if self.kind not in ("mix", "dropout", "blocks"):
            raise ValueError(f"unknown mask kind {self.kind!r}")


FRACTION_TOL = 0.05


def _dropout_mask(fraction: float, H: int, W: int, rng) -> np.ndarray:
    n = H * W
    k = int(round(fraction * n))
    mask = np.ones(n)
    mask[rng.choice(n, size=k, replace=False)] = 0.0
    return mask.reshape(H, W)


def _block_mask(fraction: float, H: int, W: int, rng) -> Optional[np.ndarray]:
    n = H * W
    nb = int(rng.integers(1, 4))
    inflate = 1.0
    for _ in range(60):
        mask = np.ones((H, W))
        for _b in range(nb):
            side = int(round(np.sqrt(fraction * n * inflate / nb)))
            side = max(1, min(side, min(H, W)))
            r = int(rng.integers(0, H - side + 1))
            c = int(rng.integers(0, W - side + 1))
            mask[r : r + side, c : c + side] = 0.0
        realized = 1.0 - mask.mean()
        if abs(realized - fraction) <= FRACTION_TOL:
            return mask
        inflate *= 1.15 if realized < fraction else 0.9
    return None


def make_mask(spec: MaskSpec, H: int, W: int, rng=None) -> np.ndarray:
    """Binary mask (1 = known); realized unknown fraction within +-5% of target."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    kind = spec.kind
    if kind == "mix":
        kind = "dropout" if rng.random() < 0.5 else "blocks"
    if kind == "dropout":
        return _dropout_mask(spec.fraction, H, W, rng)
    mask = _block_mask(spec.fraction, H, W, rng)
    if mask is None:
        raise ValueError(
            f"could not realize block-mask fraction {spec.fraction} within "
            f"{FRACTION_TOL} on a {H}x{W} grid"
        )
    return mask


NOISE_SCALE = 0.5


def corrupt(I_gt: np.ndarray, M: np.ndarray, rng) -> np.ndarray:
    """Initial image: ground truth on known pixels, clipped Gaussian noise elsewhere."""
    noise = np.clip(rng.normal(0.0, NOISE_SCALE, size=I_gt.shape), -1.0, 1.0)
    return M * I_gt + (1.0 - M) * noise


# ---------------------------------------------------------------------------
# total variation and energy
# ---------------------------------------------------------------------------

def _tv_np(a: np.ndarray) -> float:
    dx = a[..., :, 1:] - a[..., :, :-1]
    dy = a[..., 1:, :] - a[..., :-1, :]
    return float(np.abs(dx).sum() + np.abs(dy).sum())


def tv_l1(x: Tensor) -> Tensor:
    """Anisotropic TV: sum of |forward differences|, replicate edge (edge diff 0)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    a = x.data
    dx = a[..., :, 1:] - a[..., :, :-1]
    dy = a[..., 1:, :] - a[..., :-1, :]
    val = np.abs(dx).sum() + np.abs(dy).sum()

    def bw(g):
        gx = np.zeros_like(a)
        sx = np.sign(dx) * g
        sy = np.sign(dy) * g
        gx[..., :, 1:] += sx
        gx[..., :, :-1] -= sx
        gx[..., 1:, :] += sy
        gx[..., :-1, :] -= sy
        return (gx,)

    return _from_op(np.asarray(val), (x,), bw)


def energy(I: np.ndarray, I_obs: np.ndarray, M: np.ndarray, lam_tv: float) -> float:
    """0.5 ||M (I - I_obs)||^2 + lam_tv TV(I); the guard's descent criterion."""
    d = M * (I - I_obs)
    return 0.5 * float((d * d).sum()) + lam_tv * _tv_np(I)


def _energy_batch(I: np.ndarray, I_obs: np.ndarray, M: np.ndarray, lam_tv: float) -> np.ndarray:
    d = M * (I - I_obs)
    data = 0.5 * (d * d).reshape(I.shape[0], -1).sum(axis=1)
    dx = np.abs(I[..., :, 1:] - I[..., :, :-1]).reshape(I.shape[0], -1).sum(axis=1)
    dy = np.abs(I[..., 1:, :] - I[..., :-1, :]).reshape(I.shape[0], -1).sum(axis=1)
    return data + lam_tv * (dx + dy)


# ---------------------------------------------------------------------------
# configuration, state, controller
# ---------------------------------------------------------------------------

@dataclass
class InpaintConfig:
    """Controller shape, loss weights, schedules, and guard settings."""

    sigma: float = 1.0
    lam_tv: float = 0.02
    lam_tv_energy: float = 0.02
    lam_contract: float = 0.01
    k_train_max: int = 20
    k_eval: int = 30
    beta0: float = 0.5
    beta_final: float = 0.3
    clip0: float = 0.5
    clip_decay: float = 0.95
    backtrack_factor: float = 0.5
    max_backtracks: int = 3
    lr: float = 3e-4
    channels: int = 48
    layers: int = 4
    ksize: int = 3
    pad_mode: str = "replicate"
    epochs: int = 30
    batch_size: int = 8
    images_per_epoch: Optional[int] = None
    k_start: int = 4
    k_step: int = 2
    k_every: int = 5
    per_step_loss: bool = False
    clamp_mode: str = "hard"  # or "straight-through"
    seed: int = 0

    def clip_at(self, t: int) -> float:
        return self.clip0 * self.clip_decay**t

    def k_at(self, epoch: int) -> int:
        return min(self.k_start + self.k_step * ((epoch - 1) // self.k_every), self.k_train_max)

    def beta_at(self, epoch: int) -> float:
        if self.epochs <= 1:
            return self.beta_final
        frac = (epoch - 1) / (self.epochs - 1)
        return self.beta0 + (self.beta_final - self.beta0) * frac


@dataclass
class ImageState:
    """One image mid-refinement: current tensor, observation, mask, step size."""

    I: Tensor
    I_obs: np.ndarray
    M: np.ndarray
    beta: float
    t: int = 0

    def energy(self, lam_tv: float) -> float:
        return energy(self.I.data, self.I_obs, self.M, lam_tv)


class InpaintController:
    """Conv stack over concat(I, M, M*I_obs) emitting a correction and a gate."""

    def __init__(self, cfg: InpaintConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.params = ParamSet()
        chans = [7] + [cfg.channels] * (cfg.layers - 1) + [4]
        k = cfg.ksize
        for i, (ci, co) in enumerate(zip(chans[:-1], chans[1:])):
            sc = np.sqrt(2.0 / (ci * k * k))
            self.params.add(f"k{i}", Tensor(rng.standard_normal((co, ci, k, k)) * sc, requires_grad=True))
            self.params.add(f"b{i}", Tensor(np.zeros(co), requires_grad=True))
        self.n_layers = cfg.layers

    def __call__(self, I: Tensor, M_b: np.ndarray, MIobs_b: np.ndarray):
        """Returns (correction in (-1,1), gate in (0,1)); inputs are (B,3,H,W)."""
        from .autodiff import relu

        h = concat([I, Tensor(M_b), Tensor(MIobs_b)], axis=1)
        for i in range(self.n_layers):
            h = conv2d(h, self.params[f"k{i}"], self.params[f"b{i}"], self.cfg.pad_mode)
            if i < self.n_layers - 1:
                h = relu(h)
        d_raw = tanh(narrow(h, 1, 0, 3))
        gate = sigmoid(narrow(h, 1, 3, 1))
        return d_raw, gate


# ---------------------------------------------------------------------------
# guarded update (single image, the contract) and batched rollout internals
# ---------------------------------------------------------------------------

def _propose(I: Tensor, dI: Tensor, gate: Tensor, beta, M, I_obs, clamp_mode: str = "hard") -> Tensor:
    """clamp_range(I + beta * gate * dI) with known pixels restored."""
    cand = clamp_through(I + mul(Tensor(np.asarray(beta)), mul(gate, dI)), -1.0, 1.0, clamp_mode)
    return mul(cand, Tensor(1.0 - M)) + Tensor(M * I_obs)


def guarded_update(state: ImageState, dI: Tensor, gate: Tensor, cfg: InpaintConfig) -> ImageState:
    """Accept the proposal only if the energy does not increase.

    On rejection the step size halves and the same correction is retried, up
    to cfg.max_backtracks times; after that the step is skipped. Rejected
    proposals never join the gradient tape (they are simply unused).
    """
    e_cur = state.energy(cfg.lam_tv_energy)
    beta = state.beta
    for _ in range(cfg.max_backtracks + 1):
        cand = _propose(state.I, dI, gate, beta, state.M, state.I_obs, cfg.clamp_mode)
        e_new = energy(cand.data, state.I_obs, state.M, cfg.lam_tv_energy)
        if e_new <= e_cur:
            return replace(state, I=cand, beta=beta, t=state.t + 1)
        beta *= cfg.backtrack_factor
    return replace(state, beta=beta, t=state.t + 1)


def _clamp_known_np(I: np.ndarray, I_obs: np.ndarray, M: np.ndarray) -> np.ndarray:
    return M * I_obs + (1.0 - M) * I


def _rollout_batch(controller: InpaintController, I0: Tensor, M, I_obs, depth: int,
                   cfg: InpaintConfig, beta0: float, guard: bool):
    """Differentiable batched rollout; returns the frame list (length depth+1).

    M and I_obs are (B,1,H,W) and (B,3,H,W) arrays; per-sample step sizes
    halve independently on guard rejections, and rejected samples fall back
    to their previous frame (zero-step) after max_backtracks tries.
    """
    B = I0.data.shape[0]
    beta = np.full((B, 1, 1, 1), beta0)
    frames = [I0]
    I = I0
    for t in range(depth):
        dI_raw, gate = controller(I, M, M * I_obs)
        c = cfg.clip_at(t)
        dI = clamp_through(dI_raw, -c, c)
        if not guard:
            I = _propose(I, dI, gate, beta, M, I_obs, cfg.clamp_mode)
            frames.append(I)
            continue
        e_cur = _energy_batch(I.data, I_obs, M, cfg.lam_tv_energy)
        accept = np.zeros(B, dtype=bool)
        beta_try = beta.copy()
        cand = None
        for _ in range(cfg.max_backtracks + 1):
            cand_try = _propose(I, dI, gate, beta_try, M, I_obs, cfg.clamp_mode)
            e_new = _energy_batch(cand_try.data, I_obs, M, cfg.lam_tv_energy)
            newly = (~accept) & (e_new <= e_cur)
            if cand is None:
                cand = cand_try
                sel = newly
            else:
                pick = newly.astype(np.float64).reshape(B, 1, 1, 1)
                cand = mul(cand_try, Tensor(pick)) + mul(cand, Tensor(1.0 - pick))
                sel = accept | newly
            accept = sel
            if accept.all():
                break
            beta_try[~accept] *= cfg.backtrack_factor
        keep = accept.astype(np.float64).reshape(B, 1, 1, 1)
        I = mul(cand, Tensor(keep)) + mul(I, Tensor(1.0 - keep))
        beta = beta_try
        frames.append(I)
    return frames


class TrainingDivergence(RuntimeError):
    pass


def _sample_loss(frames, I_gt_b: np.ndarray, cfg: InpaintConfig) -> Tensor:
    """Homoscedastic Gaussian data term + TV + contractive penalty (per-sample sums, batch mean)."""
    B = I_gt_b.shape[0]
    gt = Tensor(I_gt_b)

    def step_terms(idx):
        I = frames[idx]
        prev = frames[idx - 1]
        data = reduce("sum", square(sub(I, gt))) * (0.5 / cfg.sigma**2)
        tv = tv_l1(I) * cfg.lam_tv
        contract = reduce("sum", square(sub(I, prev))) * cfg.lam_contract
        return data + tv + contract

    if cfg.per_step_loss:
        loss = None
        for idx in range(1, len(frames)):
            term = step_terms(idx)
            loss = term if loss is None else loss + term
        loss = loss * (1.0 / (len(frames) - 1))
    else:
        loss = step_terms(len(frames) - 1)
    return loss * (1.0 / B)


def train_inpaint(dataset, cfg: InpaintConfig):
    """Curriculum training over rollout depth with the guard on.

    dataset is a list of (I_gt (3,H,W) in [-1,1], mask (H,W)) pairs. Returns
    (controller, history) where history records per-epoch mean loss, K, and
    step size.
    """
    rng = np.random.default_rng(cfg.seed)
    controller = InpaintController(cfg)
    n = len(dataset)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        K = cfg.k_at(epoch)
        beta_e = cfg.beta_at(epoch)
        take = n if cfg.images_per_epoch is None else min(cfg.images_per_epoch, n)
        order = rng.permutation(n)[:take]
        losses = []
        for start in range(0, take, cfg.batch_size):
            idxs = order[start : start + cfg.batch_size]
            depth = int(rng.integers(1, K + 1))
            I_gt_b = np.stack([dataset[i][0] for i in idxs])
            M_b = np.stack([dataset[i][1] for i in idxs])[:, None]
            I_obs_b = M_b * I_gt_b
            I0 = np.stack(
                [corrupt(dataset[i][0], dataset[i][1][None], rng) for i in idxs]
            )
            try:
                frames = _rollout_batch(
                    controller, Tensor(I0), M_b, I_obs_b, depth, cfg, beta_e, guard=True
                )
                loss = _sample_loss(frames, I_gt_b, cfg)
            except FloatingPointError as e:
                raise TrainingDivergence(
                    f"inpaint training diverged at epoch {epoch}, batch {start // cfg.batch_size}: {e}"
                ) from e
            if not np.isfinite(loss.data):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            backward(loss)
            adam_step(controller.params, lr=cfg.lr)
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "K": K, "beta": beta_e})
        log.info("inpaint epoch %d: K=%d beta=%.3f loss=%.4f", epoch, K, beta_e, history[-1]["loss"])
    return controller, history


def eval_rollout(controller: InpaintController, test_set, k_eval: int, guard: str,
                 cfg: InpaintConfig, collect_energy: bool = False,
                 frame_images: int = 0):
    """Roll the trained controller k_eval steps over the test set.

    Returns a dict with per-step mean PSNR (on images remapped to [0,1],
    peak 1), optionally per-image per-step energies (guard diagnostics) and
    the first few refinement filmstrips. Known pixels are clamped back after
    every step; the step size is fixed at the final training value.
    """
    if guard not in ("on", "off"):
        raise ValueError("guard must be 'on' or 'off'")
    rng = np.random.default_rng(cfg.seed + 1)
    chunk = 32
    psnr_cols = []
    energy_cols = []
    filmstrips = []
    for lo in range(0, len(test_set), chunk):
        part = test_set[lo : lo + chunk]
        I_gt_b = np.stack([p[0] for p in part])
        M_b = np.stack([p[1] for p in part])[:, None]
        I_obs_b = M_b * I_gt_b
        I0 = np.stack([corrupt(p[0], p[1][None], rng) for p in part])
        with no_grad():
            frames = _rollout_batch(
                controller, Tensor(I0), M_b, I_obs_b, k_eval, cfg, cfg.beta_final,
                guard=(guard == "on"),
            )
        psnr_cols.append(
            np.array(
                [
                    [
                        psnr_db((f.data[i] + 1.0) / 2.0, (I_gt_b[i] + 1.0) / 2.0, 1.0)
                        for i in range(I_gt_b.shape[0])
                    ]
                    for f in frames
                ]
            )
        )
        if collect_energy:
            energy_cols.append(
                np.stack([_energy_batch(f.data, I_obs_b, M_b, cfg.lam_tv_energy) for f in frames])
            )
        while frame_images and len(filmstrips) < frame_images:
            i = len(filmstrips)
            if i >= I_gt_b.shape[0]:
                break
            filmstrips.append(
                {
                    "gt": I_gt_b[i],
                    "init": frames[0].data[i],
                    "steps": [f.data[i] for f in frames[1:]],
                }
            )
    per_step = np.concatenate(psnr_cols, axis=1)  # (k_eval+1, n_images)
    result = {
        "mean_psnr": per_step.mean(axis=1).tolist(),  # index 0 = initialization
        "per_image_psnr": per_step,
    }
    if collect_energy:
        result["energies"] = np.concatenate(energy_cols, axis=1)
    if frame_images:
        result["filmstrips"] = filmstrips
    return result
