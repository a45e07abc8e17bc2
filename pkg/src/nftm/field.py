"""Spatial fields, read/write heads, local updates, and the rollout engine.

A machine step is read -> controller -> write -> move: dense layouts read one
neighborhood per cell and write the whole field synchronously; explicit head
lists read interpolated patches at continuous positions and write back to
their nearest cells. All updates are synchronous: step t+1 depends only on
the snapshot at step t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import kernels
from .autodiff import Tensor, _coerce, _from_op, asum, mul, reshape


class FieldGrid:
    """A discretized field: 1D row (N,) or grid (C,H,W), with a boundary rule."""

    __slots__ = ("data", "boundary")

    def __init__(self, data, boundary: str = "periodic"):
        if boundary not in kernels.BOUNDARY_MODES:
            raise ValueError(f"unknown boundary {boundary!r}, expected one of {kernels.BOUNDARY_MODES}")
        t = data if isinstance(data, Tensor) else Tensor(np.asarray(data, dtype=np.float64))
        if t.data.ndim not in (1, 3):
            raise ValueError(f"field data must be (N,) or (C,H,W), got shape {t.shape}")
        if not np.all(np.isfinite(t.data)):
            raise ValueError("field data must be finite")
        self.data = t
        self.boundary = boundary

    @property
    def array(self) -> np.ndarray:
        return self.data.data

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape if self.data.data.ndim == 1 else self.data.shape[1:]

    @property
    def channels(self) -> int:
        return 1 if self.data.data.ndim == 1 else self.data.shape[0]

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.spatial_shape))

    def replace(self, tensor: Tensor) -> "FieldGrid":
        return FieldGrid(tensor, self.boundary)

    def copy(self) -> "FieldGrid":
        return FieldGrid(Tensor(self.array.copy()), self.boundary)


@dataclass
class Head:
    """A read/write locus: continuous position, support radius, support shape."""

    position: Union[float, Sequence[float]]
    radius: float = 0.0
    support_shape: str = "box"

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError(f"head radius must be >= 0, got {self.radius}")
        if self.support_shape not in ("ball", "box"):
            raise ValueError(f"support_shape must be ball or box, got {self.support_shape!r}")
        self.position = np.atleast_1d(np.asarray(self.position, dtype=np.float64))


@dataclass
class RolloutTrace:
    """Snapshots f_0..f_T plus per-step head positions (None for dense layouts)."""

    fields: list
    head_tracks: list

    def __len__(self) -> int:
        return len(self.fields)

    def arrays(self) -> list:
        return [f.array for f in self.fields]


@dataclass
class MachineSpec:
    """Controller + update rule + head layout for one machine.

    update_mode 'direct-write': controller maps dense patches (N,p) to values
    (N,) and g(values) becomes the next field. 'attention-kernel': controller
    returns per-cell kernel weights A (N,p) and the next field is
    g(sum_y A(x,y) f(y)). head_layout 'dense' pins one zero-motion head per
    cell; an explicit Head list reads patches and writes nearest-cell values.
    """

    controller: Callable
    update_mode: str = "direct-write"
    g: Optional[Callable[[Tensor], Tensor]] = None
    head_layout: Union[str, list] = "dense"
    radius: int = 1

    def __post_init__(self):
        if self.update_mode not in ("direct-write", "attention-kernel"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        if isinstance(self.head_layout, str) and self.head_layout != "dense":
            raise ValueError("head_layout must be 'dense' or a list of Heads")


def support_offsets(ndim: int, radius: float, shape: str) -> np.ndarray:
    """Integer cell offsets covered by a ball/box of the given radius."""
    R = int(math.floor(radius))
    axes = [np.arange(-R, R + 1)] * ndim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, ndim)
    if shape == "ball":
        keep = (grid * grid).sum(axis=1) <= radius * radius + 1e-12
        grid = grid[keep]
    return grid.astype(np.float64)


def _interp_weights(points: np.ndarray, sizes: tuple, boundary: str):
    """Multilinear corner indices and weights for continuous sample points.

    Returns flat corner indices (n, 2^d) with -1 marking out-of-domain corners
    under the zero boundary, and matching weights.
    """
    n, d = points.shape
    base = np.floor(points).astype(np.int64)
    frac = points - base
    corners = np.stack(
        np.meshgrid(*([np.array([0, 1])] * d), indexing="ij"), axis=-1
    ).reshape(-1, d)
    idx = base[:, None, :] + corners[None, :, :]  # (n, 2^d, d)
    w = np.ones((n, corners.shape[0]))
    for a in range(d):
        wa = np.where(corners[None, :, a] == 1, frac[:, a : a + 1], 1.0 - frac[:, a : a + 1])
        w = w * wa
    flat = np.zeros(idx.shape[:2], dtype=np.int64)
    valid = np.ones(idx.shape[:2], dtype=bool)
    stride = 1
    mapped = np.empty_like(idx)
    for a in range(d - 1, -1, -1):
        ia = idx[:, :, a]
        sa = sizes[a]
        if boundary == "periodic":
            ia = ia % sa
        elif boundary == "replicate":
            ia = np.clip(ia, 0, sa - 1)
        else:
            valid &= (ia >= 0) & (ia < sa)
            ia = np.clip(ia, 0, sa - 1)
        mapped[:, :, a] = ia
        flat += ia * stride
        stride *= sa
    flat = np.where(valid, flat, -1)
    return flat, w


def read_patch(f: FieldGrid, h: Head) -> Tensor:
    """Values of the support cells around the head position.

    Fractional positions sample each support cell by multilinear
    interpolation; the boundary rule supplies out-of-range cells. Gradients
    flow to the field. 1D fields return (n_offsets,); grids return
    (C, n_offsets).
    """
    sizes = f.spatial_shape
    d = len(sizes)
    pos = np.asarray(h.position, dtype=np.float64)
    if pos.shape != (d,):
        raise ValueError(f"head position has dim {pos.shape}, field is {d}-dimensional")
    offs = support_offsets(d, h.radius, h.support_shape)
    pts = pos[None, :] + offs
    flat, w = _interp_weights(pts, sizes, f.boundary)
    weights = np.where(flat >= 0, w, 0.0)
    safe = np.maximum(flat, 0)

    x = f.data
    flat2 = x.data.reshape(f.channels, -1)
    vals = np.einsum("cnk->cn", flat2[:, safe] * weights[None, :, :])

    def bw(g):
        g2 = g.reshape(f.channels, -1)
        gx = np.zeros_like(flat2)
        contrib = g2[:, :, None] * weights[None, :, :]
        for c in range(gx.shape[0]):
            np.add.at(gx[c], safe.ravel(), np.where(flat >= 0, contrib[c], 0.0).ravel())
        return (gx.reshape(x.data.shape),)

    out = _from_op(vals if x.data.ndim == 3 else vals[0], (x,), bw)
    return out


def read_all_patches(f: FieldGrid, r: int) -> Tensor:
    """Dense per-cell neighborhoods: (N, 2r+1) rows in 1D, (H*W, C*(2r+1)^2) on grids."""
    if int(r) != r or r < 0:
        raise ValueError(f"dense patch radius must be a non-negative integer, got {r}")
    r = int(r)
    x = f.data
    mode = f.boundary
    if x.data.ndim == 1:
        patches = kernels.gather_patches_1d(x.data, r, mode)

        def bw(g):
            return (kernels.scatter_patches_1d(g, r, mode),)

        return _from_op(patches, (x,), bw)

    C, H, W = x.data.shape
    patches = kernels.gather_patches_2d(x.data, r, mode)

    def bw(g):
        return (kernels.scatter_patches_2d(g, C, H, W, r, mode),)

    return _from_op(patches, (x,), bw)


def scatter_write(f: FieldGrid, heads, values: Tensor) -> FieldGrid:
    """Write one value per head to its nearest cell; colliding writes average.

    Returns a new field; the input field is untouched. ``heads='dense'``
    replaces the whole field with ``values`` in site order.
    """
    values = _coerce(values)
    x = f.data
    if isinstance(heads, str) and heads == "dense":
        if values.size != x.size:
            raise ValueError(f"dense write needs {x.size} values, got {values.size}")
        return f.replace(reshape(values, x.data.shape))

    sizes = f.spatial_shape
    d = len(sizes)
    if values.data.shape != (len(heads),):
        raise ValueError(f"need one value per head: {len(heads)} heads, values shape {values.shape}")
    if f.channels != 1:
        raise ValueError("per-head scatter_write supports single-channel fields")

    cells = []
    for h in heads:
        pos = np.asarray(h.position, dtype=np.float64)
        nearest = np.floor(pos + 0.5).astype(np.int64)
        nearest = np.clip(nearest, 0, np.asarray(sizes) - 1)
        cells.append(int(np.ravel_multi_index(tuple(nearest), sizes)))
    cells = np.asarray(cells, dtype=np.int64)
    counts = np.bincount(cells, minlength=int(np.prod(sizes))).astype(np.float64)
    touched = counts > 0

    def forward(vdata, xdata):
        sums = np.bincount(cells, weights=vdata, minlength=int(np.prod(sizes)))
        out = xdata.reshape(-1).copy()
        out[touched] = sums[touched] / counts[touched]
        return out.reshape(xdata.shape)

    out = forward(values.data, x.data)

    def bw(g):
        gflat = g.reshape(-1)
        gv = gflat[cells] / counts[cells]
        gx = np.where(touched.reshape(g.shape), 0.0, g)
        return (gx, gv)

    return f.replace(_from_op(out, (x, values), bw))


def attention_update(f: FieldGrid, A: Tensor, g: Optional[Callable], r: int) -> FieldGrid:
    """f'(x) = g(sum_y A(x,y) f(y)) over the radius-r support of each cell."""
    A = _coerce(A)
    width = 2 * r + 1
    expected = width if f.array.ndim == 1 else f.channels * width * width
    n = f.n_sites
    if A.data.shape != (n, expected):
        raise ValueError(
            f"kernel weights shape {A.shape} exceed or mismatch the radius-{r} support "
            f"({n} sites x {expected} weights)"
        )
    patches = read_all_patches(f, r)
    agg = asum(mul(patches, A), axis=1)
    new = reshape(agg, f.data.data.shape)
    if g is not None:
        new = g(new)
    return f.replace(new)


def move_heads(heads, deltas, extent, dense: bool = False):
    """h <- clamp(h + delta) into [0, extent) per axis; dense layouts reject motion."""
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    if dense and np.any(deltas != 0.0):
        raise ValueError("dense head layout requires zero head motion")
    if len(heads) != deltas.shape[0]:
        raise ValueError(f"need one delta per head: {len(heads)} heads, {deltas.shape[0]} deltas")
    hi = np.nextafter(np.asarray(extent, dtype=np.float64), -np.inf)
    out = []
    for h, dlt in zip(heads, deltas):
        pos = np.clip(np.asarray(h.position) + dlt, 0.0, hi)
        out.append(Head(pos, h.radius, h.support_shape))
    return out


class RolloutError(RuntimeError):
    pass


def rollout(m: MachineSpec, f0: FieldGrid, T: int, hook: Optional[Callable] = None) -> RolloutTrace:
    """Iterate read -> controller -> write -> move for T steps.

    The hook, called as hook(t, field), may return a replacement field (used
    e.g. to clamp known cells) or None. Any non-finite value in a snapshot
    aborts with the failing step index.
    """
    if T < 0:
        raise ValueError(f"rollout steps must be >= 0, got {T}")
    dense = isinstance(m.head_layout, str)
    heads = None if dense else list(m.head_layout)
    fields = [f0]
    tracks = [None if dense else np.stack([h.position for h in heads])]
    f = f0
    for t in range(1, T + 1):
        try:
            if dense:
                patches = read_all_patches(f, m.radius)
                out = m.controller(patches)
                if isinstance(out, tuple):
                    out, deltas = out
                    if deltas is not None and np.any(np.asarray(deltas) != 0.0):
                        raise ValueError("dense head layout requires zero head motion")
                if m.update_mode == "attention-kernel":
                    f = attention_update(f, out, m.g, m.radius)
                else:
                    new = out if m.g is None else m.g(out)
                    f = scatter_write(f, "dense", new)
            else:
                patches = [read_patch(f, h) for h in heads]
                values, deltas = m.controller(patches)
                new = values if m.g is None else m.g(values)
                f = scatter_write(f, heads, new)
                if deltas is not None:
                    heads = move_heads(heads, deltas, f.spatial_shape)
            if hook is not None:
                replaced = hook(t, f)
                if replaced is not None:
                    f = replaced
        except (FloatingPointError, ValueError) as e:
            if "finite" in str(e) or isinstance(e, FloatingPointError):
                raise RolloutError(f"non-finite field value at rollout step {t}: {e}") from e
            raise
        if not np.all(np.isfinite(f.array)):
            raise RolloutError(f"non-finite field value at rollout step {t}")
        fields.append(f)
        tracks.append(None if dense else np.stack([h.position for h in heads]))
    return RolloutTrace(fields, tracks)


def psnr(a, b, peak: float) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at 99 (exact match reports 99)."""
    ad = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if ad.shape != bd.shape:
        raise ValueError(f"psnr shape mismatch: {ad.shape} vs {bd.shape}")
    if not peak > 0:
        raise ValueError(f"psnr peak must be > 0, got {peak}")
    mse = float(np.mean((ad - bd) ** 2))
    if mse == 0.0:
        return 99.0
    return min(10.0 * math.log10(peak * peak / mse), 99.0)
