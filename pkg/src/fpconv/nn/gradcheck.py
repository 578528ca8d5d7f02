"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from fpconv.errors import NonFiniteGradient
from fpconv.nn import functional as F
from fpconv.nn.tensor import Tensor

ABS_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    n_checked: int
    worst: str = ""
    max_abs_err: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|)``.

    Entries where both magnitudes are at or below ``ABS_FLOOR`` are treated as
    zero gradients and report 0: there the finite difference is pure rounding
    noise and a relative error carries no information.
    """
    diff = np.abs(analytic - numeric)
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.where(mag <= ABS_FLOOR, 0.0, diff / np.where(mag > ABS_FLOOR, mag, 1.0))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    params: Optional[Sequence[Tensor]] = None,
    rng: Optional[np.random.Generator] = None,
    names: Optional[Sequence[str]] = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    The output is contracted against a fixed random tensor so that every
    element of a non-scalar output contributes. ``params`` lists additional
    tensors (e.g. module weights) to check besides the inputs. All checked
    tensors must be float64.
    """
    rng = rng or np.random.default_rng(0)
    targets: List[Tensor] = list(inputs) + list(params or [])
    labels = list(names) if names else [f"arg{i}" for i in range(len(targets))]
    for t in targets:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
        t.requires_grad = True
        t.grad = None

    probe = fn(*inputs)
    weights = rng.standard_normal(probe.shape)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * weights))

    out = fn(*inputs)
    F.sum_all(F.mul(out, Tensor(weights))).backward()

    worst, worst_name, count, max_abs = 0.0, "", 0, 0.0
    for label, t in zip(labels, targets):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            num_flat[i] = (up - down) / (2 * h)
        if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
            raise NonFiniteGradient(f"non-finite gradient for {label}")
        err = rel_error(analytic, numeric)
        if err.size:
            max_abs = max(max_abs, float(np.abs(analytic - numeric).max()))
        count += err.size
        if err.size and err.max() > worst:
            worst, worst_name = float(err.max()), label
    return GradCheckReport(worst, tolerance, count, worst_name, max_abs)
