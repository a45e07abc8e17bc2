"""Empirical per-step cost of the heat-step machine across field sizes.

Each benchmarked step applies a fixed per-cell diffusion kernel over the
radius-1 support (gather + weighted sum), i.e. the machine update with the
controller cost held constant. Fixed-radius neighborhoods make the step cost
linear in the number of sites; the benchmark measures that directly and can
compare the numba and numpy kernel backends.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import kernels


def diffusion_kernel_rows(n_sites: int, alpha: float) -> np.ndarray:
    """Per-cell radius-1 box weights for u + alpha*lap(u): center 1-4a, axis neighbors a."""
    A = np.zeros((n_sites, 9))
    A[:, 4] = 1.0 - 4.0 * alpha
    for col in (1, 3, 5, 7):
        A[:, col] = alpha
    return A


def bench_scaling(sizes, steps: int = 50, alpha: float = 0.1, seed: int = 0,
                  backends=None, repeats: int = 3) -> dict:
    """Mean wall time per machine step for each field size.

    sizes are site counts of square grids (e.g. 64**2). Returns records per
    (size, backend) plus, per backend, the least-squares time-vs-N slope and
    the step-time ratios between consecutive sizes. A single size yields raw
    timings only (no fit).
    """
    sizes = [int(n) for n in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sizes must be strictly increasing, got {sizes}")
    if backends is None:
        backends = [kernels.get_backend()]
    rng = np.random.default_rng(seed)
    fields = {}
    for n in sizes:
        side = int(math.isqrt(n))
        if side * side != n:
            raise ValueError(f"size {n} is not a square grid cell count")
        fields[n] = rng.random((side, side))

    records = []
    fits = {}
    for backend in backends:
        with kernels.use_backend(backend):
            times = []
            for n in sizes:
                side = int(math.isqrt(n))
                A = diffusion_kernel_rows(n, alpha)
                f = fields[n].copy()
                # warm the JIT and caches outside the timed region
                f = kernels.attention_apply_2d(f, A, 1, "replicate").reshape(side, side)
                best = np.inf
                for _ in range(repeats):
                    g = f.copy()
                    t0 = time.perf_counter()
                    for _s in range(steps):
                        g = kernels.attention_apply_2d(g, A, 1, "replicate").reshape(side, side)
                    dt = (time.perf_counter() - t0) / steps
                    best = min(best, dt)
                times.append(best)
                records.append(
                    {"backend": backend, "n": n, "side": side, "mean_step_s": best}
                )
            fit = {}
            if len(sizes) > 1:
                slope, intercept = np.polyfit(np.asarray(sizes, dtype=float), np.asarray(times), 1)
                fit["slope_s_per_cell"] = float(slope)
                fit["intercept_s"] = float(intercept)
                fit["ratios"] = {
                    f"{b}/{a}": times[j + 1] / times[j]
                    for j, (a, b) in enumerate(zip(sizes, sizes[1:]))
                }
            fits[backend] = fit
    return {"records": records, "fits": fits, "sizes": sizes, "steps": steps}


def bench_total_time(n: int, steps: int, alpha: float = 0.1, seed: int = 0) -> float:
    """Total wall time of a steps-long rollout at one size (for horizon scaling checks)."""
    side = int(math.isqrt(n))
    rng = np.random.default_rng(seed)
    f = rng.random((side, side))
    A = diffusion_kernel_rows(n, alpha)
    f = kernels.attention_apply_2d(f, A, 1, "replicate").reshape(side, side)
    t0 = time.perf_counter()
    g = f
    for _ in range(steps):
        g = kernels.attention_apply_2d(g, A, 1, "replicate").reshape(side, side)
    return time.perf_counter() - t0
