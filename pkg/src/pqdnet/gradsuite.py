"""The standard finite-difference battery over every layer type the classifier uses."""
from __future__ import annotations

import time
from typing import Callable, List, Tuple

import numpy as np

from .model import Bottleneck, SEBlock
from .nn import functional as F
from .nn.gradcheck import GradReport, check_function, check_layer
from .nn.layers import (BatchNorm2d, Conv2d, GlobalAvgPool, HSwish, Linear, ReLU, Sigmoid,
                        Swish)

INSTANCES = 20
TOLERANCE = 1e-4
KINK_MARGIN = 2e-3
KINKS = {HSwish: (-3.0, 3.0), ReLU: (0.0,)}


def _off_kinks(x, kinks=(-3.0, 3.0), margin=1e-3):
    # finite differences straddling a kink of a piecewise function are meaningless
    for k in kinks:
        near = np.abs(x - k) < margin
        x[near] += 4 * margin
    return x


def kink_distance(layer) -> float:
    """Smallest distance from a cached activation input to that activation's kink."""
    best = np.inf
    stack = [layer]
    while stack:
        node = stack.pop()
        kinks = KINKS.get(type(node))
        if kinks and node._cache is not None:
            for k in kinks:
                best = min(best, float(np.min(np.abs(node._cache - k))))
        stack.extend(node.children())
    return best


def _conv(stride, groups, k):
    def case(rng):
        layer = Conv2d(4, 8, k, stride=stride, groups=groups, rng=rng, dtype=np.float64)
        layer.bias.value = rng.standard_normal(8)
        return layer, rng.standard_normal((2, 4, 4, 4))
    return case


def _bn(training):
    def case(rng):
        bn = BatchNorm2d(3, dtype=np.float64)
        bn.gamma.value = rng.uniform(0.5, 2, 3)
        bn.beta.value = rng.standard_normal(3)
        bn.running_mean = rng.standard_normal(3)
        bn.running_var = rng.uniform(0.5, 2, 3)
        return bn.train(training), rng.standard_normal((3, 3, 4, 4)) * 2 + 0.5
    return case


def _act(cls):
    return lambda rng: (cls(), _off_kinks(rng.uniform(-6, 6, (2, 3, 4, 4))))


def _linear(rng):
    layer = Linear(6, 5, rng=rng, dtype=np.float64)
    layer.bias.value = rng.standard_normal(5)
    return layer, rng.standard_normal((3, 6))


def _smooth_draw(build, rng):
    # redraw until no hidden activation input sits within a step of a kink
    while True:
        layer, x = build(rng)
        layer.forward(x)
        if kink_distance(layer) > KINK_MARGIN:
            return layer, x


def _se(rng):
    return _smooth_draw(lambda r: (SEBlock(8, 4, rng=r, dtype=np.float64),
                                   r.standard_normal((2, 8, 3, 3))), rng)


def _bottleneck(stride, c_in):
    def case(rng):
        return _smooth_draw(lambda r: (Bottleneck(c_in, 8, stride, 2, 2, rng=r, dtype=np.float64),
                                       r.standard_normal((2, c_in, 4, 4))), rng)
    return case


LAYER_CASES: List[Tuple[str, Callable]] = [
    ("grouped conv 3x3 g=2", _conv(1, 2, 3)),
    ("grouped conv 3x3 g=2 stride 2", _conv(2, 2, 3)),
    ("conv 1x1 stride 2", _conv(2, 1, 1)),
    ("batch norm (training)", _bn(True)),
    ("batch norm (inference)", _bn(False)),
    ("h-swish", _act(HSwish)),
    ("swish", _act(Swish)),
    ("sigmoid", _act(Sigmoid)),
    ("fully connected", _linear),
    ("global average pool", lambda rng: (GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)))),
    ("squeeze-excitation", _se),
    ("bottleneck (identity shortcut)", _bottleneck(1, 8)),
    ("bottleneck (projection shortcut)", _bottleneck(2, 4)),
]


def _cross_entropy_case(rng, tolerance):
    logits = rng.standard_normal((4, 6)) * 3
    labels = rng.integers(0, 6, 4)

    def fwd(z):
        # scalar loss broadcast so the probe sum(out * R) reduces to R * loss
        return np.array([F.softmax_cross_entropy(z, labels)[0]])

    def bwd(up, z):
        return [up[0] * F.softmax_cross_entropy(z, labels)[1]]

    return check_function(fwd, bwd, [logits], rng=rng, tolerance=tolerance, name="cross-entropy")


def run_battery(seed: int = 0, tolerance: float = TOLERANCE, instances: int = INSTANCES,
                h: float = 1e-4) -> List[GradReport]:
    """One merged report per layer type, each over ``instances`` random draws."""
    reports = []
    for i, (name, make) in enumerate(LAYER_CASES + [("cross-entropy", None)]):
        merged = GradReport(name, {}, tolerance)
        for k in range(instances):
            rng = np.random.default_rng([seed, i, k])
            if make is None:
                rep = _cross_entropy_case(rng, tolerance)
            else:
                layer, x = make(rng)
                rep = check_layer(layer, x, rng=rng, tolerance=tolerance, h=h, name=name)
            merged.merge(rep)
        reports.append(merged)
    return reports


def format_report(reports: List[GradReport], elapsed: float = None) -> str:
    lines = [f"{'layer':36s} {'max rel err':>12s}  result"]
    for r in reports:
        lines.append(f"{r.name:36s} {r.max_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in reports)
    tail = f"{len(reports) - n_fail}/{len(reports)} layer types passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f} s"
    return "\n".join(lines + [tail])


def timed_battery(**kwargs):
    t0 = time.perf_counter()
    reports = run_battery(**kwargs)
    return reports, time.perf_counter() - t0
