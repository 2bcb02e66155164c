"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import NumericError
from .tensor import Array, Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Array | None] | None,
              state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place.

    ``grads`` maps parameter names to gradient arrays; pass None to read
    each parameter's ``.grad`` (a missing/None gradient counts as zero).
    Any non-finite gradient aborts the step before touching any parameter.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name in params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'; step aborted")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
