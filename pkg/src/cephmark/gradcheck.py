"""Finite-difference verification of model gradients.

Every parameter element is compared against a difference quotient with total
stencil width ``2h`` (``h = 1e-4`` by default).  The central quotient is used
whenever all three stencil points share one ReLU/max-pool activation pattern.
When the stencil straddles a kink the central quotient is not an oracle for
the derivative, so the exact-for-quadratics one-sided quotient
``(-3 f(0) + 4 f(h/2) - f(h)) / h`` is taken on whichever side is kink-free.
If neither side of the width-``2h`` stencil is kink-free the step is halved
until one is.  Within one piece the MSE loss is exactly quadratic in any
single parameter, so every quotient used carries only rounding error.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import Model, ModelConfig, build_model, forward
from .optim import mse_loss
from .tensor import Graph, Tensor, no_grad, record_patterns


@dataclass
class TensorCheck:
    name: str
    size: int
    max_rel_error: float
    n_failed: int
    n_one_sided: int
    n_reduced_step: int
    n_unresolved: int


@dataclass
class GradcheckReport:
    label: str
    checks: list[TensorCheck] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.n_failed == 0 and c.n_unresolved == 0 for c in self.checks)

    def summary(self) -> str:
        n = sum(c.size for c in self.checks)
        one = sum(c.n_one_sided for c in self.checks)
        red = sum(c.n_reduced_step for c in self.checks)
        bad = sum(c.n_failed + c.n_unresolved for c in self.checks)
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.label}: {n} elements, max rel error {self.max_rel_error:.3e}, "
                f"{one} one-sided and {red} reduced-step (kink near stencil), {bad} failing, "
                f"{self.seconds:.1f}s")


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _quotient(f_at, f0, p0, step):
    """Difference quotient on a kink-free stencil of half-width ``step``, or None."""
    fp, pp = f_at(step)
    fm, pm = f_at(-step)
    plus_ok, minus_ok = _same(pp, p0), _same(pm, p0)
    if plus_ok and minus_ok:
        return (fp - fm) / (2 * step), True
    for sign, ok, f_far in ((1.0, plus_ok, fp), (-1.0, minus_ok, fm)):
        if ok:
            f_mid, p_mid = f_at(sign * step / 2)
            if _same(p_mid, p0):
                return sign * (-3 * f0 + 4 * f_mid - f_far) / step, False
    return None


def check_gradients(loss_fn: Callable[[dict[str, Tensor]], Tensor],
                    params: dict[str, np.ndarray], h: float = 1e-4, rtol: float = 1e-4,
                    label: str = "", max_halvings: int = 12) -> GradcheckReport:
    """Compare analytic gradients of ``loss_fn`` against difference quotients.

    An element passes when ``|a - n| <= rtol * max(|a|, |n|)`` or when
    ``|a - n|`` is below the rounding noise of the quotient,
    ``16 * eps * |f| / step``.  If no kink-free stencil of half-width ``h``
    exists the step is halved, at most ``max_halvings`` times.
    """
    t0 = time.perf_counter()
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Graph() as g:
        loss = loss_fn(leaves)
    g.backward(loss)
    analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}

    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def ev(name, arr):
        with no_grad(), record_patterns() as pats:
            value = loss_fn({**{k: Tensor._wrap(v) for k, v in work.items()},
                             name: Tensor._wrap(arr)}).item()
        return value, pats

    report = GradcheckReport(label)
    for name, base in work.items():
        flat = base.reshape(-1).copy()
        f0, p0 = ev(name, base)
        a = analytic[name].reshape(-1)
        num = np.zeros(flat.size)
        steps = np.full(flat.size, h)
        one_sided = unresolved = reduced = 0

        def at(i, delta):
            arr = flat.copy()
            arr[i] += delta
            return ev(name, arr.reshape(base.shape))

        for i in range(flat.size):
            step = h
            for _ in range(max_halvings + 1):
                d = _quotient(lambda delta: at(i, delta), f0, p0, step)
                if d is not None:
                    break
                step /= 2
            if d is None:
                unresolved += 1
                num[i] = np.nan
            else:
                num[i], central = d
                steps[i] = step
                one_sided += not central
                reduced += step < h
        diff = np.abs(a - num)
        scale = np.maximum(np.abs(a), np.abs(num))
        atol = 16 * np.finfo(float).eps * abs(f0) / steps
        with np.errstate(invalid="ignore", divide="ignore"):
            rel = diff / scale
        finite = np.isfinite(num)
        failed = int(np.sum(finite & (diff > atol) & (rel > rtol)))
        # relative error is only meaningful above the rounding floor
        shown = finite & (scale * rtol >= atol)
        report.checks.append(TensorCheck(name, flat.size, float(np.max(rel[shown], initial=0.0)),
                                         failed, one_sided, reduced, unresolved))
    report.seconds = time.perf_counter() - t0
    return report


def model_loss_fn(model: Model, x: np.ndarray, target: np.ndarray):
    def loss_fn(params: dict[str, Tensor]) -> Tensor:
        saved = model.params
        model.params = params
        try:
            return mse_loss(forward(model, Tensor._wrap(x)), target)
        finally:
            model.params = saved
    return loss_fn


def check_model(config: ModelConfig, seed: int = 0, h: float = 1e-4,
                rtol: float = 1e-4) -> GradcheckReport:
    """Gradcheck a freshly built model on random input and target."""
    model = build_model(config)
    rng = np.random.default_rng(seed)
    # random biases keep the check away from the all-zero-bias special case
    state = {k: (v + 0.1 * rng.standard_normal(v.shape) if k.endswith(".bias") else v)
             for k, v in model.state_dict().items()}
    x = rng.random((1, config.in_channels, *config.input_hw))
    target = rng.random((1, config.out_channels, *config.input_hw))
    label = f"{config.arch} depth={config.depth} base={config.base_channels} " \
            f"{config.input_hw[0]}x{config.input_hw[1]}"
    return check_gradients(model_loss_fn(model, x, target), state, h=h, rtol=rtol, label=label)
