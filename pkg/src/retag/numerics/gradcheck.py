"""Gradient verification against central finite differences.

The finite-difference oracle always evaluates in float64, independent of the
dtype the autodiff pass ran in, so the reported error reflects the accuracy
of the backward rules rather than cancellation noise in the probe. Relative
error is measured per parameter tensor: max |ad - fd| scaled by the largest
gradient magnitude seen for that tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import NumericError
from .tensor import Tape, Tensor, backward

_ZERO_ATOL = 1e-9


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [
            f"{'PASS' if e.passed else 'FAIL'}  {e.name}: rel={e.max_rel_err:.3e} abs={e.max_abs_err:.3e}"
            for e in self.entries
        ]
        lines.append(f"{'PASS' if self.passed else 'FAIL'}  overall (h={self.h:g}, tol={self.tol:g})")
        return "\n".join(lines)


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of a scalar function against central differences.

    ``f`` must build a fresh graph from the given parameter dict on every
    call and be smooth at the evaluation point. Cost is two forward passes
    per scalar parameter entry, so keep parameters small.
    """
    with Tape():
        loss = f(params)
        if not np.isfinite(loss.data):
            raise NumericError("grad_check: function value is not finite")
        grad_map = backward(loss, params.values())
    autodiff = {name: np.asarray(grad_map[p], dtype=np.float64) for name, p in params.items()}

    base = {name: p.data.astype(np.float64) for name, p in params.items()}

    def evaluate(arrays: dict[str, np.ndarray]) -> float:
        probe = {name: Tensor(a, requires_grad=False, dtype=np.float64) for name, a in arrays.items()}
        value = f(probe)
        if not np.isfinite(value.data):
            raise NumericError("grad_check: perturbed function value is not finite")
        return float(value.data)

    entries = []
    for name in params:
        fd = np.zeros_like(base[name])
        flat = fd.reshape(-1)
        for i in range(flat.size):
            bumped = {k: (v.copy() if k == name else v) for k, v in base.items()}
            bumped[name].reshape(-1)[i] = base[name].reshape(-1)[i] + h
            up = evaluate(bumped)
            bumped[name].reshape(-1)[i] = base[name].reshape(-1)[i] - h
            down = evaluate(bumped)
            flat[i] = (up - down) / (2.0 * h)
        diff = np.abs(autodiff[name] - fd)
        abs_err = float(diff.max(initial=0.0))
        scale = float(max(np.abs(autodiff[name]).max(initial=0.0), np.abs(fd).max(initial=0.0)))
        rel_err = 0.0 if scale < _ZERO_ATOL else abs_err / scale
        entries.append(GradCheckEntry(name=name, max_rel_err=rel_err, max_abs_err=abs_err, passed=rel_err <= tol))
    return GradCheckReport(entries=entries, h=h, tol=tol)
