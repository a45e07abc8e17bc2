"""Hot numeric kernels with two interchangeable backends.

Every kernel here exists twice: a numba ``@njit`` version and a pure-numpy
version that computes the identical result (parity is enforced by tests).
The active backend is chosen by the ``NFTM_BACKEND`` environment variable:
``auto`` (default, numba when importable), ``numba``, or ``numpy``. It can
also be switched at runtime with :func:`set_backend` / :func:`use_backend`,
which is how the backend comparison benchmark works.

``NFTM_THREADS`` caps the numba thread pool (0 or unset = auto).

Boundary modes are shared across the package: ``zero``, ``replicate``,
``periodic``.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

BOUNDARY_MODES = ("zero", "replicate", "periodic")
_MODE_CODE = {"zero": 0, "replicate": 1, "periodic": 2}
_NP_PAD_MODE = {"zero": "constant", "replicate": "edge", "periodic": "wrap"}

_local = __import__("threading").local()


def scratch(tag: str, shape: tuple) -> np.ndarray:
    """Reusable per-thread scratch buffer for op-internal temporaries.

    Callers must not hold the buffer past the next scratch(tag, ...) call with
    the same tag; distinct tags never alias. Cuts large-allocation churn in
    the conv hot path.
    """
    bufs = getattr(_local, "bufs", None)
    if bufs is None:
        bufs = _local.bufs = {}
    key = (tag, shape)
    buf = bufs.get(key)
    if buf is None:
        buf = np.empty(shape, dtype=np.float64)
        bufs[key] = buf
    return buf

try:
    import warnings

    # the TBB layer probe warns lazily on old TBB installs; numba falls back
    # to omp/workqueue, so the message is pure noise here
    warnings.filterwarnings("ignore", message=".*TBB_INTERFACE_VERSION.*")
    import numba
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

_threads = int(os.environ.get("NFTM_THREADS", "0") or 0)
if _threads > 0:
    if NUMBA_AVAILABLE:
        numba.set_num_threads(max(1, min(_threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=_threads)
    except ImportError:  # pragma: no cover - BLAS cap is best effort
        pass


def _mode_code(mode: str) -> int:
    if mode not in _MODE_CODE:
        raise ValueError(f"unknown boundary mode {mode!r}, expected one of {BOUNDARY_MODES}")
    return _MODE_CODE[mode]


# ---------------------------------------------------------------------------
# padding helpers (numpy-only; cheap relative to the kernels that use them)
# ---------------------------------------------------------------------------

def pad2d(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    """Pad the last two axes by p cells on each side under the boundary rule."""
    _mode_code(mode)
    if p == 0:
        return x
    if p > x.shape[-2] or p > x.shape[-1]:
        raise ValueError(f"pad width {p} exceeds field extent {x.shape[-2:]}")
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width, mode=_NP_PAD_MODE[mode])


def pad2d_into(x: np.ndarray, p: int, mode: str, out: np.ndarray) -> np.ndarray:
    """pad2d writing into a caller-provided buffer (shape checked)."""
    _mode_code(mode)
    expect = x.shape[:-2] + (x.shape[-2] + 2 * p, x.shape[-1] + 2 * p)
    if out.shape != expect:
        raise ValueError(f"pad2d_into buffer shape {out.shape} != {expect}")
    if p == 0:
        out[...] = x
        return out
    out[..., p:-p, p:-p] = x
    if mode == "zero":
        out[..., :p, :] = 0.0
        out[..., -p:, :] = 0.0
        out[..., p:-p, :p] = 0.0
        out[..., p:-p, -p:] = 0.0
        return out
    if mode == "periodic":
        out[..., :p, p:-p] = x[..., -p:, :]
        out[..., -p:, p:-p] = x[..., :p, :]
        out[..., :, :p] = out[..., :, -2 * p : -p]
        out[..., :, -p:] = out[..., :, p : 2 * p]
        return out
    out[..., :p, p:-p] = x[..., :1, :]
    out[..., -p:, p:-p] = x[..., -1:, :]
    out[..., :, :p] = out[..., :, p : p + 1]
    out[..., :, -p:] = out[..., :, -p - 1 : -p]
    return out


def pad2d_adjoint(gp: np.ndarray, p: int, mode: str, in_place: bool = False) -> np.ndarray:
    """Adjoint of :func:`pad2d`: fold padded-cell gradients back onto the source.

    zero: crop. replicate: edge rows/cols accumulate into the nearest interior
    cell. periodic: wrap-add. With in_place the input buffer is clobbered.
    """
    _mode_code(mode)
    if p == 0:
        return gp
    g = gp if in_place else gp.copy()
    if mode == "zero":
        return np.ascontiguousarray(g[..., p:-p, p:-p])
    if mode == "periodic":
        g[..., p : 2 * p, :] += g[..., -p:, :]
        g[..., -2 * p : -p, :] += g[..., :p, :]
        g = g[..., p:-p, :]
        g[..., :, p : 2 * p] += g[..., :, -p:]
        g[..., :, -2 * p : -p] += g[..., :, :p]
        return np.ascontiguousarray(g[..., :, p:-p])
    # replicate: each padded row/col was a copy of the nearest edge cell
    for _ in range(p):
        g[..., 1, :] += g[..., 0, :]
        g[..., -2, :] += g[..., -1, :]
        g = g[..., 1:-1, :]
    for _ in range(p):
        g[..., :, 1] += g[..., :, 0]
        g[..., :, -2] += g[..., :, -1]
        g = g[..., :, 1:-1]
    return np.ascontiguousarray(g)


def pad1d(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, (p, p), mode=_NP_PAD_MODE[mode])


# ---------------------------------------------------------------------------
# 5-point Laplacian, replicate boundary
# ---------------------------------------------------------------------------

def _laplacian5_numpy(u: np.ndarray) -> np.ndarray:
    up = pad2d(u, 1, "replicate")
    return (
        up[..., :-2, 1:-1]
        + up[..., 2:, 1:-1]
        + up[..., 1:-1, :-2]
        + up[..., 1:-1, 2:]
        - 4.0 * u
    )


def _laplacian5_adjoint_numpy(g: np.ndarray) -> np.ndarray:
    gp = np.zeros(g.shape[:-2] + (g.shape[-2] + 2, g.shape[-1] + 2), dtype=g.dtype)
    gp[..., :-2, 1:-1] += g
    gp[..., 2:, 1:-1] += g
    gp[..., 1:-1, :-2] += g
    gp[..., 1:-1, 2:] += g
    return pad2d_adjoint(gp, 1, "replicate") - 4.0 * g


if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _lap5_2d_nb(u, out):
        H, W = u.shape
        for i in range(H):
            im = i - 1 if i > 0 else 0
            ip = i + 1 if i < H - 1 else H - 1
            for j in range(W):
                jm = j - 1 if j > 0 else 0
                jp = j + 1 if j < W - 1 else W - 1
                out[i, j] = u[im, j] + u[ip, j] + u[i, jm] + u[i, jp] - 4.0 * u[i, j]

    def _laplacian5_numba(u: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        if u.ndim == 2:
            _lap5_2d_nb(u, out)
        else:
            flat = u.reshape(-1, u.shape[-2], u.shape[-1])
            oflat = out.reshape(flat.shape)
            for b in range(flat.shape[0]):
                _lap5_2d_nb(flat[b], oflat[b])
        return out

else:  # pragma: no cover
    _laplacian5_numba = _laplacian5_numpy


# ---------------------------------------------------------------------------
# im2col / col2im for same-size odd-k convolution
# ---------------------------------------------------------------------------

def _im2col_numpy(xp: np.ndarray, k: int, out=None) -> np.ndarray:
    B, C, Hp, Wp = xp.shape
    H, W = Hp - (k - 1), Wp - (k - 1)
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    perm = v.transpose(0, 2, 3, 1, 4, 5)
    if out is None:
        return np.ascontiguousarray(perm).reshape(B * H * W, C * k * k)
    np.copyto(out.reshape(B, H, W, C, k, k), perm)
    return out


def _col2im_numpy(cols: np.ndarray, B: int, C: int, H: int, W: int, k: int, out=None) -> np.ndarray:
    gp = out if out is not None else np.empty((B, C, H + k - 1, W + k - 1), dtype=cols.dtype)
    gp[...] = 0.0
    v = cols.reshape(B, H, W, C, k, k)
    for di in range(k):
        for dj in range(k):
            gp[:, :, di : di + H, dj : dj + W] += v[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return gp


if NUMBA_AVAILABLE:

    # serial on purpose: these gathers are bandwidth-bound and interleave with
    # multithreaded BLAS; competing thread pools slow both down on small hosts
    @njit(cache=True)
    def _im2col_nb(xp, cols, k):
        B, C, Hp, Wp = xp.shape
        H = Hp - (k - 1)
        W = Wp - (k - 1)
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    row = (b * H + i) * W + j
                    col = 0
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                cols[row, col] = xp[b, c, i + di, j + dj]
                                col += 1

    @njit(cache=True)
    def _col2im_nb(cols, gp, k):
        B, C, Hp, Wp = gp.shape
        H = Hp - (k - 1)
        W = Wp - (k - 1)
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    row = (b * H + i) * W + j
                    col = 0
                    for c in range(C):
                        for di in range(k):
                            for dj in range(k):
                                gp[b, c, i + di, j + dj] += cols[row, col]
                                col += 1

    def _im2col_numba(xp: np.ndarray, k: int, out=None) -> np.ndarray:
        B, C, Hp, Wp = xp.shape
        H, W = Hp - (k - 1), Wp - (k - 1)
        cols = out if out is not None else np.empty((B * H * W, C * k * k), dtype=xp.dtype)
        _im2col_nb(np.ascontiguousarray(xp), cols, k)
        return cols

    def _col2im_numba(cols: np.ndarray, B: int, C: int, H: int, W: int, k: int, out=None) -> np.ndarray:
        gp = out if out is not None else np.empty((B, C, H + k - 1, W + k - 1), dtype=cols.dtype)
        gp[...] = 0.0
        _col2im_nb(np.ascontiguousarray(cols), gp, k)
        return gp

else:  # pragma: no cover
    _im2col_numba = _im2col_numpy
    _col2im_numba = _col2im_numpy


# ---------------------------------------------------------------------------
# dense neighborhood gather/scatter (1D rows and C×H×W grids)
# ---------------------------------------------------------------------------

def _gather1d_index(N: int, r: int, mode: str) -> np.ndarray:
    idx = np.arange(N)[:, None] + np.arange(-r, r + 1)[None, :]
    if mode == "periodic":
        return idx % N
    return np.clip(idx, 0, N - 1)


def _gather_patches_1d_numpy(f: np.ndarray, r: int, mode: str) -> np.ndarray:
    N = f.shape[0]
    if mode == "zero":
        fp = pad1d(f, r, "zero")
        return np.lib.stride_tricks.sliding_window_view(fp, 2 * r + 1).copy()
    return f[_gather1d_index(N, r, mode)]


def _scatter_patches_1d_numpy(g: np.ndarray, r: int, mode: str) -> np.ndarray:
    N = g.shape[0]
    out = np.zeros(N, dtype=g.dtype)
    if mode == "zero":
        gp = np.zeros(N + 2 * r, dtype=g.dtype)
        for o in range(2 * r + 1):
            gp[o : o + N] += g[:, o]
        return gp[r : r + N].copy()
    idx = _gather1d_index(N, r, mode)
    np.add.at(out, idx.ravel(), g.ravel())
    return out


def _gather_patches_2d_numpy(f: np.ndarray, r: int, mode: str) -> np.ndarray:
    C, H, W = f.shape
    k = 2 * r + 1
    fp = pad2d(f[None], r, mode)[0]
    v = np.lib.stride_tricks.sliding_window_view(fp, (k, k), axis=(1, 2))
    # rows: spatial site (i*W+j); cols: c*k*k + di*k + dj
    return np.ascontiguousarray(v.transpose(1, 2, 0, 3, 4)).reshape(H * W, C * k * k)


def _scatter_patches_2d_numpy(g: np.ndarray, C: int, H: int, W: int, r: int, mode: str) -> np.ndarray:
    k = 2 * r + 1
    v = g.reshape(H, W, C, k, k)
    gp = np.zeros((1, C, H + 2 * r, W + 2 * r), dtype=g.dtype)
    for di in range(k):
        for dj in range(k):
            gp[0, :, di : di + H, dj : dj + W] += v[:, :, :, di, dj].transpose(2, 0, 1)
    return pad2d_adjoint(gp, r, mode)[0]


if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _wrap_idx(i, n, code):
        # code: 0 zero (flagged by returning -1), 1 replicate, 2 periodic
        if 0 <= i < n:
            return i
        if code == 2:
            return i % n
        if code == 1:
            return 0 if i < 0 else n - 1
        return -1

    @njit(cache=True)
    def _gather1d_nb(f, out, r, code):
        N = f.shape[0]
        for i in range(N):
            for o in range(-r, r + 1):
                j = _wrap_idx(i + o, N, code)
                out[i, o + r] = 0.0 if j < 0 else f[j]

    @njit(cache=True)
    def _scatter1d_nb(g, out, r, code):
        N = out.shape[0]
        for i in range(N):
            for o in range(-r, r + 1):
                j = _wrap_idx(i + o, N, code)
                if j >= 0:
                    out[j] += g[i, o + r]

    @njit(cache=True)
    def _gather2d_nb(f, out, r, code):
        C, H, W = f.shape
        k = 2 * r + 1
        for i in range(H):
            for j in range(W):
                row = i * W + j
                col = 0
                for c in range(C):
                    for di in range(-r, r + 1):
                        ii = _wrap_idx(i + di, H, code)
                        for dj in range(-r, r + 1):
                            jj = _wrap_idx(j + dj, W, code)
                            if ii < 0 or jj < 0:
                                out[row, col] = 0.0
                            else:
                                out[row, col] = f[c, ii, jj]
                            col += 1

    @njit(cache=True)
    def _scatter2d_nb(g, out, r, code):
        C, H, W = out.shape
        k = 2 * r + 1
        for i in range(H):
            for j in range(W):
                row = i * W + j
                col = 0
                for c in range(C):
                    for di in range(-r, r + 1):
                        ii = _wrap_idx(i + di, H, code)
                        for dj in range(-r, r + 1):
                            jj = _wrap_idx(j + dj, W, code)
                            if ii >= 0 and jj >= 0:
                                out[c, ii, jj] += g[row, col]
                            col += 1

    def _gather_patches_1d_numba(f, r, mode):
        out = np.empty((f.shape[0], 2 * r + 1), dtype=f.dtype)
        _gather1d_nb(np.ascontiguousarray(f), out, r, _MODE_CODE[mode])
        return out

    def _scatter_patches_1d_numba(g, r, mode):
        out = np.zeros(g.shape[0], dtype=g.dtype)
        _scatter1d_nb(np.ascontiguousarray(g), out, r, _MODE_CODE[mode])
        return out

    def _gather_patches_2d_numba(f, r, mode):
        C, H, W = f.shape
        k = 2 * r + 1
        out = np.empty((H * W, C * k * k), dtype=f.dtype)
        _gather2d_nb(np.ascontiguousarray(f), out, r, _MODE_CODE[mode])
        return out

    def _scatter_patches_2d_numba(g, C, H, W, r, mode):
        out = np.zeros((C, H, W), dtype=g.dtype)
        _scatter2d_nb(np.ascontiguousarray(g), out, r, _MODE_CODE[mode])
        return out

else:  # pragma: no cover
    _gather_patches_1d_numba = _gather_patches_1d_numpy
    _scatter_patches_1d_numba = _scatter_patches_1d_numpy
    _gather_patches_2d_numba = _gather_patches_2d_numpy
    _scatter_patches_2d_numba = _scatter_patches_2d_numpy


# ---------------------------------------------------------------------------
# fused per-cell attention step (single-channel fields; the bench hot path)
# ---------------------------------------------------------------------------

def _attention_apply_2d_numpy(f: np.ndarray, A: np.ndarray, r: int, mode: str) -> np.ndarray:
    patches = _gather_patches_2d_numpy(f[None], r, mode)
    return np.einsum("np,np->n", patches, A)


def _attention_apply_1d_numpy(f: np.ndarray, A: np.ndarray, r: int, mode: str) -> np.ndarray:
    patches = _gather_patches_1d_numpy(f, r, mode)
    return np.einsum("np,np->n", patches, A)


if NUMBA_AVAILABLE:

    @njit(cache=True)
    def _attn2d_nb(f, A, out, r, code):
        H, W = f.shape
        k = 2 * r + 1
        for i in range(H):
            for j in range(W):
                row = i * W + j
                acc = 0.0
                col = 0
                for di in range(-r, r + 1):
                    ii = _wrap_idx(i + di, H, code)
                    for dj in range(-r, r + 1):
                        jj = _wrap_idx(j + dj, W, code)
                        if ii >= 0 and jj >= 0:
                            acc += A[row, col] * f[ii, jj]
                        col += 1
                out[row] = acc

    def _attention_apply_2d_numba(f, A, r, mode):
        out = np.empty(f.shape[0] * f.shape[1], dtype=f.dtype)
        _attn2d_nb(np.ascontiguousarray(f), np.ascontiguousarray(A), out, r, _MODE_CODE[mode])
        return out

    def _attention_apply_1d_numba(f, A, r, mode):
        patches = _gather_patches_1d_numba(f, r, mode)
        return np.einsum("np,np->n", patches, A)

else:  # pragma: no cover
    _attention_apply_2d_numba = _attention_apply_2d_numpy
    _attention_apply_1d_numba = _attention_apply_1d_numpy


# ---------------------------------------------------------------------------
# backend registry and dispatch
# ---------------------------------------------------------------------------

_IMPLS = {
    "numpy": {
        "laplacian5": _laplacian5_numpy,
        "im2col": _im2col_numpy,
        "col2im": _col2im_numpy,
        "gather_patches_1d": _gather_patches_1d_numpy,
        "scatter_patches_1d": _scatter_patches_1d_numpy,
        "gather_patches_2d": _gather_patches_2d_numpy,
        "scatter_patches_2d": _scatter_patches_2d_numpy,
        "attention_apply_1d": _attention_apply_1d_numpy,
        "attention_apply_2d": _attention_apply_2d_numpy,
    },
    "numba": {
        "laplacian5": _laplacian5_numba,
        "im2col": _im2col_numba,
        "col2im": _col2im_numba,
        "gather_patches_1d": _gather_patches_1d_numba,
        "scatter_patches_1d": _scatter_patches_1d_numba,
        "gather_patches_2d": _gather_patches_2d_numba,
        "scatter_patches_2d": _scatter_patches_2d_numba,
        "attention_apply_1d": _attention_apply_1d_numba,
        "attention_apply_2d": _attention_apply_2d_numba,
    },
}


def _resolve_default_backend() -> str:
    req = os.environ.get("NFTM_BACKEND", "auto").lower()
    if req not in ("auto", "numba", "numpy"):
        raise ValueError(f"NFTM_BACKEND={req!r} is not one of auto/numba/numpy")
    if req == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("NFTM_BACKEND=numba requested but numba is not importable")
    if req == "auto":
        return "numba" if NUMBA_AVAILABLE else "numpy"
    return req


_active_backend = _resolve_default_backend()


def get_backend() -> str:
    return _active_backend


def set_backend(name: str) -> None:
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba backend requested but numba is not importable")
    global _active_backend
    _active_backend = name


@contextlib.contextmanager
def use_backend(name: str):
    prev = get_backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def available_backends() -> tuple[str, ...]:
    return ("numpy", "numba") if NUMBA_AVAILABLE else ("numpy",)


def laplacian5(u: np.ndarray) -> np.ndarray:
    """L(i,j) = u(i±1,j) + u(i,j±1) - 4 u(i,j), edges replicated."""
    return _IMPLS[_active_backend]["laplacian5"](u)


def laplacian5_adjoint(g: np.ndarray) -> np.ndarray:
    return _laplacian5_adjoint_numpy(g)


def im2col(xp: np.ndarray, k: int, out=None) -> np.ndarray:
    return _IMPLS[_active_backend]["im2col"](xp, k, out)


def col2im(cols: np.ndarray, B: int, C: int, H: int, W: int, k: int, out=None) -> np.ndarray:
    return _IMPLS[_active_backend]["col2im"](cols, B, C, H, W, k, out)


def gather_patches_1d(f: np.ndarray, r: int, mode: str) -> np.ndarray:
    _mode_code(mode)
    return _IMPLS[_active_backend]["gather_patches_1d"](f, r, mode)


def scatter_patches_1d(g: np.ndarray, r: int, mode: str) -> np.ndarray:
    _mode_code(mode)
    return _IMPLS[_active_backend]["scatter_patches_1d"](g, r, mode)


def gather_patches_2d(f: np.ndarray, r: int, mode: str) -> np.ndarray:
    _mode_code(mode)
    return _IMPLS[_active_backend]["gather_patches_2d"](f, r, mode)


def scatter_patches_2d(g: np.ndarray, C: int, H: int, W: int, r: int, mode: str) -> np.ndarray:
    _mode_code(mode)
    return _IMPLS[_active_backend]["scatter_patches_2d"](g, C, H, W, r, mode)


def attention_apply_1d(f: np.ndarray, A: np.ndarray, r: int, mode: str) -> np.ndarray:
    _mode_code(mode)
    return _IMPLS[_active_backend]["attention_apply_1d"](f, A, r, mode)


def attention_apply_2d(f: np.ndarray, A: np.ndarray, r: int, mode: str) -> np.ndarray:
    _mode_code(mode)
    return _IMPLS[_active_backend]["attention_apply_2d"](f, A, r, mode)
