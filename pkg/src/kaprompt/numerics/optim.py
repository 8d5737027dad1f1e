"""Adam with bias correction, updating Tensor parameters in place."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kaprompt.errors import DimensionError


@dataclass
class AdamState:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One Adam update of ``params`` (Tensors) from ``grads`` (arrays).

    Moment buffers are created lazily on the first call and must keep the
    same parameter order afterwards.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise DimensionError(f"adam_step: parameter {p.shape} vs gradient {np.shape(g)}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif [m.shape for m in state.m] != [p.shape for p in params]:
        raise DimensionError("adam_step: parameter set changed shape since the first step")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
