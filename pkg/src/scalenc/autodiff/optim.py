from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decoupled: bool = True
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params, state: AdamState, names=None) -> None:
    """One bias-corrected Adam update applied in place to ``params``.

    Parameters without a gradient are skipped. With ``state.decoupled`` the
    weight decay shrinks parameters directly (AdamW); otherwise it is folded
    into the gradient.
    """
    if state.step < 0:
        raise ValueError("Adam step counter must be >= 0")
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param[{i}]" for i, p in enumerate(params)]
    for p, name in zip(params, names):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad.astype(p.dtype, copy=False)
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p.data
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= (state.lr * update).astype(p.dtype, copy=False)


class Adam:
    """Thin holder binding a parameter list to an :class:`AdamState`."""

    def __init__(self, named_params, lr=1e-3, weight_decay=0.0, decoupled=True):
        named = list(named_params)
        if named and isinstance(named[0], Tensor):
            named = [(p.name or f"param[{i}]", p) for i, p in enumerate(named)]
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = AdamState(lr=lr, weight_decay=weight_decay, decoupled=decoupled)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state, self.names)
