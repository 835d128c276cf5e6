"""Central finite-difference verification of hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

STEP = 1e-5
ABS_FLOOR = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of max|a|, max|n|.

    The scale is floored at ABS_FLOOR, so gradients that are exactly zero
    (e.g. a conv bias feeding batch norm) are compared in absolute terms
    instead of dividing finite-difference noise by zero.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), ABS_FLOOR)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Gradient of scalar ``f()`` with respect to ``x``, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class GradReport:
    name: str
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> List[str]:
        return [k for k, v in self.errors.items() if not v < self.tolerance]

    def merge(self, other: "GradReport") -> None:
        for k, v in other.errors.items():
            self.errors[k] = max(self.errors.get(k, 0.0), v)


def check_layer(layer, x: np.ndarray, rng=None, tolerance: float = 1e-4, h: float = STEP,
                name: str = "", check_params: bool = True) -> GradReport:
    """Compare a layer's backward pass against central differences.

    The scalar probed is ``sum(forward(x) * R)`` for a fixed random ``R``, so
    the analytic input gradient is ``backward(R)``. Float64 inputs and
    parameters are expected.
    """
    rng = np.random.default_rng(rng)
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x)
    upstream = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(layer.forward(x) * upstream))

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(upstream)
    report = GradReport(name or type(layer).__name__, tolerance=tolerance)
    report.errors["input"] = rel_error(dx, numeric_grad(f, x, h))
    if check_params:
        for pname, p in layer.named_parameters():
            analytic = p.grad.copy()
            report.errors[pname] = rel_error(analytic, numeric_grad(f, p.value, h))
    return report


def check_function(fwd: Callable, bwd: Callable, inputs: List[np.ndarray], rng=None,
                   tolerance: float = 1e-4, h: float = STEP, name: str = "op") -> GradReport:
    """Gradient check for a functional op.

    ``fwd(*inputs)`` returns an array; ``bwd(upstream, *inputs)`` returns one
    gradient per input.
    """
    rng = np.random.default_rng(rng)
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    upstream = rng.standard_normal(np.shape(fwd(*inputs)))

    def f():
        return float(np.sum(fwd(*inputs) * upstream))

    grads = bwd(upstream, *inputs)
    report = GradReport(name, tolerance=tolerance)
    for i, (a, g) in enumerate(zip(inputs, grads)):
        report.errors[f"arg{i}"] = rel_error(g, numeric_grad(f, a, h))
    return report
