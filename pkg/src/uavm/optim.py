"""Adam with per-parameter step counters and a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_step(params, grads, states, lr, betas=(0.9, 0.999), eps=1e-8):
    """Apply one bias-corrected Adam update in place.

    ``params`` are numpy arrays (or tensors, whose ``.data`` is used), ``grads``
    matching arrays and ``states`` matching :class:`AdamState` objects. Each state
    keeps its own step counter, so a parameter that skips iterations still gets
    the right bias correction when it is next updated.
    """
    b1, b2 = betas
    if not (len(params) == len(grads) == len(states)):
        raise ShapeError(f"params/grads/states lengths differ: {len(params)}, {len(grads)}, {len(states)}")
    for p, g, s in zip(params, grads, states):
        arr = p if isinstance(p, np.ndarray) else p.data
        if arr.shape != g.shape or s.m.shape != arr.shape or s.v.shape != arr.shape:
            raise ShapeError(f"Adam shape mismatch: param {arr.shape}, grad {g.shape}, state {s.m.shape}")
        if s.step < 0:
            raise ConfigError(f"negative Adam step counter {s.step}")
        s.step += 1
        s.m *= b1
        s.m += (1 - b1) * g
        s.v *= b2
        s.v += (1 - b2) * g * g
        m_hat = s.m / (1 - b1**s.step)
        v_hat = s.v / (1 - b2**s.step)
        arr -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(arr.dtype, copy=False)


@dataclass
class Adam:
    """Adam over a dict of named tensors; only the names passed to ``step`` move."""

    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, named: dict, lr=None) -> None:
        names = [n for n, t in named.items() if t.grad is not None]
        for n in names:
            if n not in self.states:
                arr = named[n].data
                self.states[n] = AdamState(np.zeros_like(arr), np.zeros_like(arr))
        adam_step(
            [named[n] for n in names],
            [named[n].grad for n in names],
            [self.states[n] for n in names],
            self.lr if lr is None else lr,
            self.betas,
            self.eps,
        )


def step_decay(base_lr: float, decay: float, every: int, epoch: int) -> float:
    """Learning rate for ``epoch`` under ``base_lr * decay ** (epoch // every)``."""
    if base_lr <= 0 or decay <= 0 or every < 1:
        raise ConfigError(f"invalid lr schedule: lr={base_lr}, decay={decay}, every={every}")
    return base_lr * decay ** (epoch // every)
