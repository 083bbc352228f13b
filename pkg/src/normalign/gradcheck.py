"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import GraphError, Tensor


@dataclass
class CheckReport:
    """Outcome of one analytic-vs-numerical gradient comparison."""

    name: str
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"{self.name}: max_rel_err={self.max_rel_err:.3e} tol={self.tol:.1e} [{status}]"


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    tol: float = 1e-4,
    name: str = "gradcheck",
) -> CheckReport:
    """Compare backward() gradients of a scalar-valued f against central differences.

    ``f`` must rebuild its graph on every call (it is invoked 2*size(x) + 1
    times). The reported error per coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, 1), i.e. relative with an
    absolute floor so exact-zero gradient entries compare at FD noise level.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")

    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise GraphError(f"finite_diff_check requires a scalar-valued f, got shape {out.shape}")
    out.backward()
    if x.grad is None:
        analytic = np.zeros_like(x.data)
    else:
        analytic = np.array(x.grad, copy=True)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        f_plus = f(Tensor(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - step
        f_minus = f(Tensor(bumped.reshape(x.shape))).item()
        numeric[i] = (f_plus - f_minus) / (2.0 * step)

    analytic_flat = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic_flat), np.abs(numeric)), 1.0)
    rel = np.abs(analytic_flat - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return CheckReport(name=name, max_rel_err=max_rel, tol=tol, passed=max_rel <= tol, n_checked=flat.size)
