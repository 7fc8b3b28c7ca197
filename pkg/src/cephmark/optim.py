"""MSE loss, Adam, and a thresholded pixel-agreement proxy metric."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, apply_op


class DivergenceError(FloatingPointError):
    pass


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element; ``target`` is constant."""
    t = _arr(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    return apply_op("mse", (pred,), np.array(np.mean(diff * diff)),
                    lambda g: (np.asarray(g).item() * (2.0 / n) * diff,))


def pixel_accuracy(pred, target, tau: float = 0.5) -> float:
    """Fraction of elements with ``|pred - target| <= tau``.

    This is a stand-in for an accuracy figure whose definition is unknown;
    ``tau`` is in mask units (peak amplitude 1.0).
    """
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise ShapeError(f"pixel_accuracy: pred {p.shape} vs target {t.shape}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(np.mean(np.abs(p - t) <= tau))


@dataclass
class AdamState:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update.

    Moments in ``state`` are updated in place and ``state.t`` is advanced
    before the correction terms are formed.  Returns fresh parameter tensors.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        out[name] = Tensor(p.data - state.alpha * m_hat / (np.sqrt(v_hat) + state.eps),
                           requires_grad=True)
    return out, state
