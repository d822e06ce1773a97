"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Update ``params`` (name -> DTensor or array) in place from ``grads``.

    Missing gradients count as zero. Returns ``params`` for chaining.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        arr = p if isinstance(p, np.ndarray) else p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        arr -= step.astype(arr.dtype, copy=False)
    return params


class Adam:
    """Adam over a fixed, ordered parameter dictionary."""

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, scale: float = 1.0, clip: float = 0.0) -> float:
        """Apply one update; returns the global gradient norm before clipping.

        With ``clip > 0`` the scaled gradients are rescaled so their global
        L2 norm is at most ``clip``.
        """
        grads = {}
        for name, p in self.params.items():
            if p.grad is not None:
                grads[name] = p.grad * scale if scale != 1.0 else p.grad
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        if clip > 0 and norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
        adam_step(self.params, grads, self.state, self.lr, *self.betas, eps=self.eps)
        return norm
