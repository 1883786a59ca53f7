"""Finite-difference verification of analytic gradients.

Central differences with step h at float64 are the independent oracle; the
engine must already be running in float64 (see ``tensor.precision``) or the
check refuses to run, since 32-bit differences are unreliable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic vs numerical gradients."""

    tolerance: float
    step: float
    max_rel_error: float = 0.0
    worst_param: str = ""
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
                f"(worst: {self.worst_param}, tol {self.tolerance:.1e})")


def numerical_gradient(closure: Callable[[], T.Tensor], param: T.Tensor,
                       step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of the closure's loss w.r.t. ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = closure().item()
            flat[i] = orig - step
            f_minus = closure().item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a-n| / (|a|+|n|+1e-6); tolerant of dead-zero entries."""
    denom = np.abs(analytic) + np.abs(numeric) + 1e-6
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(closure: Callable[[], T.Tensor],
                    params: Sequence[T.Parameter],
                    tolerance: float = DEFAULT_TOLERANCE,
                    step: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare backprop gradients against central differences per parameter.

    The closure maps the current parameter values to a scalar loss and must
    be deterministic; two forward evaluations are compared bit-for-bit and a
    mismatch raises.
    """
    if T.default_dtype() is not np.float64:
        raise RuntimeError("check_gradients requires the engine in float64 mode; "
                           "wrap the call in tensor.precision('float64')")
    first = closure()
    second = closure()
    if first.item() != second.item():
        raise RuntimeError("non-deterministic closure: two forward passes disagree "
                           f"({first.item()!r} vs {second.item()!r})")

    for p in params:
        p.zero_grad()
    loss = closure()
    T.backward(loss)

    report = GradCheckReport(tolerance=tolerance, step=step)
    for p in params:
        analytic = np.array(p.grad, copy=True)
        numeric = numerical_gradient(closure, p, step=step)
        err = relative_error(analytic, numeric)
        report.per_param[p.name] = err
        if err >= report.max_rel_error:
            if err > report.max_rel_error or not report.worst_param:
                report.worst_param = p.name
            report.max_rel_error = max(report.max_rel_error, err)
    return report


def dot_product_check(forward: Callable[[T.Tensor], T.Tensor],
                      in_shape: tuple, rng: np.random.Generator) -> float:
    """Adjoint test for a linear op: returns |<Ax, y> - <x, A'y>|.

    ``forward`` must be linear in its input for the identity to hold.
    """
    x = T.Tensor(rng.standard_normal(in_shape), requires_grad=True)
    out = forward(x)
    y = rng.standard_normal(out.shape)
    lhs = float(np.sum(out.data * y))
    # <x, A'y>: backprop y through the op.
    loss = (out * T.Tensor(y)).sum()
    T.backward(loss)
    rhs = float(np.sum(x.data * x.grad))
    return abs(lhs - rhs)
