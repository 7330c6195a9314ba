"""Central finite-difference verification of taped gradients.

The function under test must be a deterministic scalar function of the
parameters: any sampling inside it has to use frozen noise. Determinism is
verified by evaluating twice and comparing bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from upl import autodiff as ad
from upl.nn import ParamStore

# relative-error denominator floor; below this scale the comparison is
# effectively absolute, which keeps difference-quotient round-off from
# failing near-zero gradients
SCALE_FLOOR = 1e-3


@dataclass
class FiniteDifferenceReport:
    h: float
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self):
        lines = [f"finite-difference check (h={self.h:g}, tol={self.tol:g})"]
        for name, err in sorted(self.per_param.items()):
            flag = "ok" if err <= self.tol else "FAIL"
            lines.append(f"  {name:<40s} {err:.3e}  {flag}")
        return "\n".join(lines)


def _named_params(params):
    if isinstance(params, ParamStore):
        return list(params.items())
    return list(params.items())


def finite_difference_check(fn, params, h: float = 1e-4, tol: float = 1e-4) -> FiniteDifferenceReport:
    """Compare taped gradients of fn() against central finite differences.

    Returns the max relative error per parameter; relative error uses
    max(|analytic|, |numeric|, SCALE_FLOOR) as denominator.
    """
    named = _named_params(params)

    with ad.no_grad():
        first = fn().data.copy()
        second = fn().data.copy()
    if not np.array_equal(first, second):
        raise ValueError("non-deterministic function: two evaluations differ")

    for _, p in named:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in named}

    report = FiniteDifferenceReport(h=h, tol=tol)
    with ad.no_grad():
        for name, p in named:
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.ravel()
            an = analytic[name].ravel()
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = float(fn().data)
                flat[i] = orig - h
                f_minus = float(fn().data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * h)
                err = abs(fd - an[i]) / max(abs(fd), abs(an[i]), SCALE_FLOOR)
                if err > worst:
                    worst = err
            report.per_param[name] = worst
    return report
