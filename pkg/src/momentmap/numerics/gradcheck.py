"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    checked: int

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


# central-difference stencils: (offset in steps, weight before dividing by eps)
STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def relative_error(ga, gn) -> np.ndarray:
    ga, gn = np.asarray(ga), np.asarray(gn)
    return np.abs(ga - gn) / np.maximum(1e-8, np.abs(ga) + np.abs(gn))


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    order: int = 2,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``fn()`` with central differences.

    ``max_entries`` caps the number of entries probed per parameter (chosen at
    random); ``None`` probes every entry. ``order=4`` uses the five-point
    stencil, whose O(eps^4) truncation error allows a larger step (and so less
    roundoff) on deep, weakly coupled parameters.
    """
    if order not in STENCILS:
        raise ValueError(f"order must be one of {sorted(STENCILS)}, got {order}")
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in params.values():
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs 64-bit parameters")
        t.grad = None
    out = fn()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite function value")
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}

    per_param: dict[str, float] = {}
    checked = 0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            num = 0.0
            for step, weight in STENCILS[order]:
                flat[i] = orig + step * eps
                v = fn().item()
                if not np.isfinite(v):
                    flat[i] = orig
                    raise NonFiniteError(f"non-finite value probing {name}[{i}]")
                num += weight * v
            flat[i] = orig
            num /= eps
            worst = max(worst, float(relative_error(analytic[name].reshape(-1)[i], num)))
            checked += 1
        per_param[name] = worst
    for t in params.values():
        t.grad = None
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, checked)
