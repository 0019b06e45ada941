"""
Finite-difference gradient checking
Central differences in float64 compared element-wise against tape gradients
"""

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from utils import functional as F
from utils.tensor import Tape, Tensor, precision

# central-difference weights per (offset in eps, weight), divided by eps afterwards
STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1.0 / 12), (1, 8.0 / 12), (-1, -8.0 / 12), (-2, 1.0 / 12)),
}


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst_index: Tuple[int, ...]
    passed: bool
    checked: int
    analytic_at_worst: float = 0.0
    numeric_at_worst: float = 0.0


def relative_error(a, b, floor: float = 1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def projected(fn: Callable[[Tensor], Tensor], seed: int = 0) -> Callable[[Tensor], Tensor]:
    """Turn a tensor-valued fn into a scalar one via a fixed random projection"""
    cache = {}

    def scalar_fn(x: Tensor) -> Tensor:
        out = fn(x)
        if "weights" not in cache:
            cache["weights"] = np.random.default_rng(seed).standard_normal(out.shape)
        return F.sum(F.mul(out, F.constant(cache["weights"])))

    return scalar_fn


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
                            tol: float = 1e-3, floor: float = 1e-8, floor_scale: float = 0.0,
                            stencil: int = 2) -> GradcheckReport:
    """
    Compare the tape gradient of scalar f at x against central differences.
    f must be pure. Differences are always evaluated in float64; the tape
    gradient uses whatever storage precision is active. floor_scale > 0 raises
    the denominator floor to floor_scale * max|analytic gradient|. stencil=4 uses
    the fourth-order central difference over x +- eps and x +- 2 eps.
    """
    if stencil not in STENCILS:
        raise ValueError(f"stencil must be one of {sorted(STENCILS)}, got {stencil}")
    leaf = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        loss = f(leaf)
    tape.backward(loss)
    analytic = tape.grad(leaf)
    if analytic is None:
        analytic = np.zeros(leaf.shape)
    analytic = analytic.astype(np.float64)
    floor = max(floor, floor_scale * float(np.max(np.abs(analytic), initial=0.0)))

    base = x.data.astype(np.float64)
    indices = list(np.ndindex(*base.shape))

    worst_err, worst_index = 0.0, indices[0] if indices else ()
    worst_a = worst_n = 0.0
    with precision(np.float64):
        for index in indices:
            numeric = 0.0
            for step, weight in STENCILS[stencil]:
                shifted = base.copy()
                shifted[index] += step * eps
                numeric += weight * f(Tensor(shifted)).item()
            numeric /= eps
            err = float(relative_error(analytic[index], numeric, floor))
            if err > worst_err:
                worst_err, worst_index = err, index
                worst_a, worst_n = float(analytic[index]), numeric

    return GradcheckReport(
        max_rel_err=worst_err,
        worst_index=tuple(int(i) for i in worst_index),
        passed=worst_err <= tol,
        checked=len(indices),
        analytic_at_worst=worst_a,
        numeric_at_worst=worst_n,
    )
