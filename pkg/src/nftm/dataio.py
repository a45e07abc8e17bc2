"""Portable artifact I/O: PGM/PPM images, JSON-lines metrics, CIFAR-10 binary.

PGM (P5) and PPM (P6) are written with maxval 255 and the quantization range
recorded in a header comment, so files round-trip to within 1/255 of the
range with no external dependencies. Metrics files are one sorted-key JSON
object per line and safe to append to.
"""

from __future__ import annotations

import json
import os
from typing import Iterable, Optional

import numpy as np


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------

def _quantize(arr: np.ndarray, vrange: Optional[tuple]) -> tuple:
    if vrange is None:
        lo, hi = float(arr.min()), float(arr.max())
        if hi <= lo:
            hi = lo + 1.0
    else:
        lo, hi = float(vrange[0]), float(vrange[1])
        if hi <= lo:
            raise ValueError(f"empty value range [{lo}, {hi}]")
    q = np.clip(np.rint((arr - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    return q, lo, hi


def write_pgm(arr: np.ndarray, path: str, vrange: Optional[tuple] = None) -> None:
    """Binary P5 grayscale; arr must be 2D."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm needs a 2D array, got shape {arr.shape}")
    q, lo, hi = _quantize(arr, vrange)
    with open(path, "wb") as f:
        f.write(f"P5\n# range {lo:.17g} {hi:.17g}\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(q.tobytes())


def write_ppm(arr: np.ndarray, path: str, vrange: Optional[tuple] = None) -> None:
    """Binary P6 color; arr must be (3,H,W)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"write_ppm needs a (3,H,W) array, got shape {arr.shape}")
    q, lo, hi = _quantize(arr, vrange)
    inter = np.ascontiguousarray(q.transpose(1, 2, 0))
    with open(path, "wb") as f:
        f.write(f"P6\n# range {lo:.17g} {hi:.17g}\n{arr.shape[2]} {arr.shape[1]}\n255\n".encode())
        f.write(inter.tobytes())


def _read_pnm_header(f) -> tuple:
    magic = f.readline().strip()
    rng = None
    line = f.readline()
    while line.startswith(b"#"):
        parts = line[1:].split()
        if len(parts) == 3 and parts[0] == b"range":
            rng = (float(parts[1]), float(parts[2]))
        line = f.readline()
    w, h = (int(v) for v in line.split())
    maxval = int(f.readline())
    return magic, w, h, maxval, rng


def read_pgm(path: str) -> tuple:
    """Returns (float array dequantized into the recorded range, (lo, hi))."""
    with open(path, "rb") as f:
        magic, w, h, maxval, rng = _read_pnm_header(f)
        if magic != b"P5":
            raise ValueError(f"{path} is not a binary PGM (magic {magic!r})")
        q = np.frombuffer(f.read(w * h), dtype=np.uint8).reshape(h, w)
    lo, hi = rng if rng else (0.0, float(maxval))
    return lo + q.astype(np.float64) / maxval * (hi - lo), (lo, hi)


def read_ppm(path: str) -> tuple:
    with open(path, "rb") as f:
        magic, w, h, maxval, rng = _read_pnm_header(f)
        if magic != b"P6":
            raise ValueError(f"{path} is not a binary PPM (magic {magic!r})")
        q = np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    lo, hi = rng if rng else (0.0, float(maxval))
    return lo + q.astype(np.float64) / maxval * (hi - lo), (lo, hi)


# ---------------------------------------------------------------------------
# JSON-lines metrics
# ---------------------------------------------------------------------------

def _plain(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (bool, int, float, str)) or v is None:
        return v
    raise ValueError(f"metrics values must be numbers or strings, got {type(v).__name__}")


def write_metrics(records: Iterable[dict], path: str, append: bool = False) -> None:
    """One JSON object per line, keys sorted; append-safe format."""
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as f:
        for rec in records:
            clean = {str(k): _plain(v) for k, v in rec.items()}
            f.write(json.dumps(clean, sort_keys=True) + "\n")


def read_metrics(path: str) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------

CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 channel-planar pixel bytes


def load_cifar10(path: str, limit: Optional[int] = None) -> list:
    """Parse a CIFAR-10 binary batch into (label, (3,32,32) float in [-1,1]) pairs."""
    size = os.path.getsize(path)
    if size % CIFAR_RECORD != 0:
        raise ValueError(
            f"{path}: size {size} is not a whole number of {CIFAR_RECORD}-byte records "
            f"(expected a multiple, remainder {size % CIFAR_RECORD})"
        )
    n = size // CIFAR_RECORD
    if limit is not None:
        n = min(n, limit)
    out = []
    with open(path, "rb") as f:
        for _ in range(n):
            rec = f.read(CIFAR_RECORD)
            label = rec[0]
            if label > 9:
                raise ValueError(f"{path}: label byte {label} out of range 0..9")
            img = np.frombuffer(rec, dtype=np.uint8, offset=1).reshape(3, 32, 32)
            out.append((int(label), img.astype(np.float64) / 127.5 - 1.0))
    return out


# ---------------------------------------------------------------------------
# synthetic image fallback (no downloads needed)
# ---------------------------------------------------------------------------

def gen_synthetic_images(n: int, H: int, W: int, seed: int) -> np.ndarray:
    """Seeded colored-blob images in [-1,1], shaped (n,3,H,W).

    Smooth gradients plus Gaussian blobs: enough local structure for
    inpainting to be non-trivial while staying friendly to a TV prior.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    imgs = np.empty((n, 3, H, W))
    for i in range(n):
        base = rng.uniform(-0.5, 0.5, size=3)
        gy = rng.uniform(-0.8, 0.8, size=3)
        gx = rng.uniform(-0.8, 0.8, size=3)
        img = base[:, None, None] + gy[:, None, None] * yy + gx[:, None, None] * xx
        for _ in range(int(rng.integers(2, 6))):
            cy, cx = rng.uniform(0, 1), rng.uniform(0, 1)
            sig = rng.uniform(0.08, 0.3)
            color = rng.uniform(-1.2, 1.2, size=3)
            bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig)))
            img += color[:, None, None] * bump
        imgs[i] = np.clip(img, -1.0, 1.0)
    return imgs


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ValueError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ValueError(f"config file {path} is not valid JSON: {e}") from e
