"""Central finite-difference gradient oracle, independent of the tape.

The oracle perturbs raw numpy buffers and re-runs the forward function, so it
never touches the backward rules it is used to check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def numerical_gradient(
    forward: Callable[[], float],
    buffers: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    """Central differences of `forward()` w.r.t. each buffer, elementwise."""
    grads = []
    for buf in buffers:
        g = np.zeros_like(buf)
        flat = buf.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = forward()
            flat[i] = orig - h
            fm = forward()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized.

    The floor keeps near-zero components from turning finite-difference noise
    into spurious relative error.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
