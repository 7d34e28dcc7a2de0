from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import DeterminismError
from .optim import _named
from .tensor import DTYPE, Tape, Tensor, backward


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if not v < self.tol}

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(model_loss: Callable[[], Tensor], params, h: float = 1e-3,
               tol: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``model_loss`` is a closure that reads the current parameter values and
    returns a scalar tensor. The error per element is
    ``|analytic - numeric| / max(1, |numeric|)``; the report keeps the max per
    parameter.
    """
    named: Mapping[str, Tensor] = _named(params)

    def evaluate() -> float:
        return float(model_loss().values.astype(np.float64).sum())

    if evaluate() != evaluate():
        raise DeterminismError("loss differs between two evaluations at fixed parameters")

    for p in named.values():
        p.grad = None
    with Tape() as tape:
        loss = model_loss()
    backward(tape, loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros(p.dims, DTYPE)).astype(np.float64)
                for name, p in named.items()}

    report = GradCheckReport(tol=tol)
    for name, p in named.items():
        flat = p.values.reshape(-1)
        errs = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            up = DTYPE(orig + h)
            down = DTYPE(orig - h)
            flat[i] = up
            f_up = evaluate()
            flat[i] = down
            f_down = evaluate()
            flat[i] = orig
            numeric = (f_up - f_down) / (float(up) - float(down))
            errs[i] = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        report.max_rel_error[name] = float(errs.max()) if errs.size else 0.0
        p.grad = None
    return report
