"""Central finite-difference gradient checks.

Relative error per element is ``|a - n| / max(|a|, |n|, floor)`` where the
floor is ``1e-6 * max(1, max|a|)``; it keeps exactly-zero analytic entries
(unselected max-pool cells) from dividing roundoff by zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, flat_idx: np.ndarray,
                 step: float = STEP) -> np.ndarray:
    out = np.empty(len(flat_idx))
    view = t.data.reshape(-1)
    for k, i in enumerate(flat_idx):
        orig = view[i]
        view[i] = orig + step
        plus = fn().item()
        view[i] = orig - step
        minus = fn().item()
        view[i] = orig
        out[k] = (plus - minus) / (2 * step)
    return out


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    floor = 1e-6 * max(1.0, float(np.max(np.abs(a))))
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check(name: str, fn: Callable[[], Tensor], inputs: Sequence[Tensor],
          rng: np.random.Generator, max_probes: int | None = 40,
          step: float = STEP) -> GradcheckResult:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    At most ``max_probes`` coordinates per input are probed (all when None).
    """
    for t in inputs:
        # perturbation writes into the buffer; never touch caller-shared arrays
        t.data = np.array(t.data, dtype=np.float64, copy=True)
    grads = analytic_grads(fn, inputs)
    worst, total = 0.0, 0
    for t, g in zip(inputs, grads):
        n = t.data.size
        idx = np.arange(n) if max_probes is None or n <= max_probes else \
            np.sort(rng.choice(n, size=max_probes, replace=False))
        num = numeric_grad(fn, t, idx, step)
        worst = max(worst, relative_error(g.reshape(-1)[idx], num))
        total += len(idx)
    return GradcheckResult(name, worst, total)


# -- per-layer cases ----------------------------------------------------------------

def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    small = np.abs(x) < margin
    x[small] = np.sign(x[small] + 1e-12) * (margin + rng.uniform(size=small.sum()))
    return x


def _distinct(rng, shape, gap=1e-2):
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _projected(op_out: Callable[[], Tensor], weights: np.ndarray) -> Callable[[], Tensor]:
    return lambda: ops.weighted_sum(op_out(), weights)


def layer_cases(rng: np.random.Generator, overrides: dict | None = None):
    """Yield ``(name, fn, inputs)`` for every differentiable layer.

    ``overrides`` maps an op name to a replacement callable with the same
    signature; the gradcheck sabotage test uses it.
    """
    op = dict(conv1d=ops.conv1d, maxpool1d=ops.maxpool1d, dense=ops.dense, lrelu=ops.lrelu,
              conv2d=ops.conv2d, maxpool2d=ops.maxpool2d, roi_pool=ops.roi_pool,
              logistic_cross_entropy=ops.logistic_cross_entropy, matmul=ops.matmul,
              sum_squares=ops.sum_squares)
    op.update(overrides or {})

    x = Tensor(rng.normal(size=(2, 3, 10)))
    k = Tensor(rng.normal(size=(4, 3, 3)))
    b = Tensor(rng.normal(size=4))
    r = rng.normal(size=(2, 4, 10))
    yield "conv1d", _projected(lambda: op["conv1d"](x, k, b), r), [x, k, b]

    xp = Tensor(_distinct(rng, (3, 8)))
    yield "maxpool1d", _projected(lambda: op["maxpool1d"](xp, 2), rng.normal(size=(3, 4))), [xp]

    xd = Tensor(rng.normal(size=(3, 5)))
    w = Tensor(rng.normal(size=(4, 5)))
    bd = Tensor(rng.normal(size=4))
    yield "dense", _projected(lambda: op["dense"](xd, w, bd), rng.normal(size=(3, 4))), [xd, w, bd]

    xl = Tensor(_away_from_zero(rng, (4, 6)))
    yield "lrelu", _projected(lambda: op["lrelu"](xl, 0.1), rng.normal(size=(4, 6))), [xl]

    x2 = Tensor(rng.normal(size=(2, 6, 6)))
    k2 = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b2 = Tensor(rng.normal(size=3))
    yield "conv2d", _projected(lambda: op["conv2d"](x2, k2, b2), rng.normal(size=(3, 6, 6))), [x2, k2, b2]

    xm = Tensor(_distinct(rng, (2, 6, 8)))
    yield "maxpool2d", _projected(lambda: op["maxpool2d"](xm, 2), rng.normal(size=(2, 3, 4))), [xm]

    fm = Tensor(_distinct(rng, (2, 6, 6)))
    boxes = np.array([[0.0, 0.0, 24.0, 24.0], [4.0, 6.0, 17.0, 21.0]])
    yield "roi_pool", _projected(lambda: op["roi_pool"](fm, boxes, 4, 2),
                                 rng.normal(size=(2, 2, 2, 2))), [fm]

    f = Tensor(rng.normal(scale=3.0, size=8))
    lab = rng.integers(0, 2, size=8)
    yield "logistic_cross_entropy", lambda: ops.sum(op["logistic_cross_entropy"](f, lab)), [f]

    a = Tensor(rng.normal(size=(3, 4)))
    m = Tensor(rng.normal(size=(4, 2)))
    yield "matmul", _projected(lambda: op["matmul"](a, m), rng.normal(size=(3, 2))), [a, m]

    s = Tensor(rng.normal(size=(5,)))
    yield "sum_squares", lambda: op["sum_squares"](s), [s]


def check_layers(seed: int, overrides: dict | None = None) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    return [check(name, fn, inputs, rng, max_probes=None)
            for name, fn, inputs in layer_cases(rng, overrides)]
