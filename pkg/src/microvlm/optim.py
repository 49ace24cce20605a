"""Adam with decoupled weight decay, operating on named parameter maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeMismatchError, Tensor


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; decay is applied after the adaptive step.

    Returns a fresh parameter map (inputs are never mutated) and the state,
    whose moment buffers are advanced in place. Missing moment buffers are
    created as zeros on first use.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t

    out: dict[str, Tensor] = {}
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"adam_step: missing gradient for parameter '{name}'")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"adam_step: gradient shape {g.shape} does not match parameter "
                f"'{name}' shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = v
        elif m.shape != p.shape:
            raise ShapeMismatchError(
                f"adam_step: state buffer shape {m.shape} does not match parameter "
                f"'{name}' shape {p.shape}")
        # moments advance in place; state owns these buffers
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v / corr2) + eps)
        new = p.data - lr * update
        if weight_decay != 0.0:
            new = new - lr * weight_decay * p.data
        out[name] = Tensor(new, requires_grad=p.requires_grad)
    return out, state
