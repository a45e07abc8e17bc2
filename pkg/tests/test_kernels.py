"""Backend parity: the numba kernels must reproduce the numpy fallbacks exactly."""

import numpy as np
import pytest

from nftm import kernels

pytestmark = pytest.mark.skipif(not kernels.NUMBA_AVAILABLE, reason="numba not importable")

MODES = ["zero", "replicate", "periodic"]


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_backend_selection_roundtrip():
    start = kernels.get_backend()
    with kernels.use_backend("numpy"):
        assert kernels.get_backend() == "numpy"
    assert kernels.get_backend() == start
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")


def test_im2col_col2im_parity(rng):
    xp = rng.standard_normal((2, 3, 10, 9))
    for k in (1, 3, 5):
        a = kernels._im2col_numpy(xp, k)
        b = kernels._im2col_numba(xp, k)
        assert np.array_equal(a, b)
        cols = rng.standard_normal(a.shape)
        H, W = xp.shape[2] - (k - 1), xp.shape[3] - (k - 1)
        ga = kernels._col2im_numpy(cols, 2, 3, H, W, k)
        gb = kernels._col2im_numba(cols, 2, 3, H, W, k)
        assert np.allclose(ga, gb, atol=1e-14)


def test_col2im_is_adjoint_of_im2col(rng):
    # <im2col(x), c> == <x, col2im(c)> characterizes the scatter exactly
    xp = rng.standard_normal((1, 2, 6, 7))
    k = 3
    cols = kernels._im2col_numpy(xp, k)
    c = rng.standard_normal(cols.shape)
    lhs = float((cols * c).sum())
    back = kernels._col2im_numpy(c, 1, 2, 4, 5, k)
    rhs = float((xp * back).sum())
    assert abs(lhs - rhs) < 1e-9


def test_laplacian_parity_and_adjoint(rng):
    for shape in [(8, 9), (3, 6, 7)]:
        u = rng.standard_normal(shape)
        a = kernels._laplacian5_numpy(u)
        b = kernels._laplacian5_numba(u)
        assert np.allclose(a, b, atol=1e-14)
    u = rng.standard_normal((6, 5))
    g = rng.standard_normal((6, 5))
    lhs = float((kernels._laplacian5_numpy(u) * g).sum())
    rhs = float((u * kernels.laplacian5_adjoint(g)).sum())
    assert abs(lhs - rhs) < 1e-10


@pytest.mark.parametrize("mode", MODES)
def test_gather_scatter_1d_parity(mode, rng):
    f = rng.standard_normal(9)
    for r in (0, 1, 2):
        a = kernels._gather_patches_1d_numpy(f, r, mode)
        b = kernels._gather_patches_1d_numba(f, r, mode)
        assert np.array_equal(a, b)
        g = rng.standard_normal(a.shape)
        sa = kernels._scatter_patches_1d_numpy(g, r, mode)
        sb = kernels._scatter_patches_1d_numba(g, r, mode)
        assert np.allclose(sa, sb, atol=1e-14)
        # adjoint identity
        lhs = float((a * g).sum())
        rhs = float((f * sa).sum())
        assert abs(lhs - rhs) < 1e-10


@pytest.mark.parametrize("mode", MODES)
def test_gather_scatter_2d_parity(mode, rng):
    f = rng.standard_normal((2, 5, 6))
    for r in (1, 2):
        a = kernels._gather_patches_2d_numpy(f, r, mode)
        b = kernels._gather_patches_2d_numba(f, r, mode)
        assert np.array_equal(a, b)
        g = rng.standard_normal(a.shape)
        sa = kernels._scatter_patches_2d_numpy(g, 2, 5, 6, r, mode)
        sb = kernels._scatter_patches_2d_numba(g, 2, 5, 6, r, mode)
        assert np.allclose(sa, sb, atol=1e-14)
        lhs = float((a * g).sum())
        rhs = float((f * sa).sum())
        assert abs(lhs - rhs) < 1e-10


@pytest.mark.parametrize("mode", MODES)
def test_attention_apply_parity(mode, rng):
    f = rng.standard_normal((7, 8))
    A = rng.standard_normal((56, 9))
    a = kernels._attention_apply_2d_numpy(f, A, 1, mode)
    b = kernels._attention_apply_2d_numba(f, A, 1, mode)
    assert np.allclose(a, b, atol=1e-12)
    f1 = rng.standard_normal(11)
    A1 = rng.standard_normal((11, 3))
    a1 = kernels._attention_apply_1d_numpy(f1, A1, 1, mode)
    b1 = kernels._attention_apply_1d_numba(f1, A1, 1, mode)
    assert np.allclose(a1, b1, atol=1e-12)


def test_pad2d_adjoint_all_modes(rng):
    x = rng.standard_normal((2, 4, 5))
    for mode in MODES:
        for p in (1, 2):
            xp = kernels.pad2d(x, p, mode)
            y = rng.standard_normal(xp.shape)
            lhs = float((xp * y).sum())
            rhs = float((x * kernels.pad2d_adjoint(y, p, mode)).sum())
            assert abs(lhs - rhs) < 1e-10, (mode, p)


def test_pad2d_rejects_oversized_pad():
    with pytest.raises(ValueError):
        kernels.pad2d(np.zeros((3, 3)), 4, "periodic")


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        kernels.gather_patches_1d(np.zeros(4), 1, "mirror")
