"""Named parameter collections and the Adam update."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class ParamSet:
    """Ordered name -> Tensor map with per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not t.requires_grad:
            raise ValueError(f"parameter {name!r} must have requires_grad=True")
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._t[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def reset_optimizer(self) -> None:
        """Drop moments and step counters (use when the objective changes)."""
        for k in self._params:
            self._m[k][...] = 0.0
            self._v[k][...] = 0.0
            self._t[k] = 0

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, d: dict) -> None:
        for k, arr in d.items():
            self._params[k].data[...] = arr


def adam_step(
    params: ParamSet,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update; zeroes every gradient afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        t = params._t[name] + 1
        params._t[name] = t
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    params.zero_grad()
