"""Central finite-difference verification of reverse-mode gradients."""

import numpy as np

from ..errors import ContractError
from .tensor import Tensor, backward, no_grad


def relative_error(analytic, numeric):
    """Elementwise ``|a - n| / (|a| + |n| + 1e-12)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)


def grad_check(f, x0, h=1e-5, max_coords=None, seed=0, directions=None, extra=(), stats=None):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` builds a scalar from the tensor(s) in ``x0`` (a Tensor or a list of
    them, passed positionally) and must be deterministic; results for a
    non-deterministic ``f`` are meaningless.  All inputs must be float64.
    With ``max_coords`` set, that many coordinates per input are sampled with
    a generator seeded by ``seed`` instead of checking every entry.

    With ``directions`` set, the check is instead made on that many random
    Gaussian directions spanning ``x0`` and ``extra`` (tensors ``f`` reads
    without taking them as arguments, e.g. layer weights) jointly:
    ``<grad, v>`` against ``(f(x + hv) - f(x - hv)) / 2h``.  A direction
    whose estimates at ``h`` and ``h/2`` disagree has a kink (ReLU, clamp,
    max) inside the stencil, where a difference quotient says nothing about
    the gradient; it is redrawn, up to ``directions`` extra times in total.
    ``stats`` (a dict), when given, receives the number of redrawn directions.
    """
    if directions is not None:
        return _directional_check(f, x0, h, directions, seed, extra, stats)
    xs = list(x0) if isinstance(x0, (list, tuple)) else [x0]
    for x in xs:
        if not isinstance(x, Tensor) or x.dtype != np.float64:
            raise ContractError("grad_check needs float64 tensors")
    saved_flags = [x.requires_grad for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    try:
        loss = f(*xs)
        backward(loss)
        analytic = [x.grad.copy() for x in xs]
        rng = np.random.default_rng(seed)
        worst = 0.0
        for x, ga in zip(xs, analytic):
            flat = x.data.reshape(-1)
            if max_coords is None or max_coords >= flat.size:
                coords = range(flat.size)
            else:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            gflat = ga.reshape(-1)
            for i in coords:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + h
                    fp = f(*xs).item()
                    flat[i] = orig - h
                    fm = f(*xs).item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                worst = max(worst, float(relative_error(gflat[i], numeric)))
        return worst
    finally:
        for x, flag in zip(xs, saved_flags):
            x.requires_grad = flag
            x.grad = None


KINK_TOL = 1e-6


def _directional_check(f, x0, h, directions, seed, extra, stats):
    args = list(x0) if isinstance(x0, (list, tuple)) else [x0]
    xs = args + [e for e in extra if all(e is not a for a in args)]
    for x in xs:
        if not isinstance(x, Tensor) or x.dtype != np.float64:
            raise ContractError("grad_check needs float64 tensors")
    saved = [(x.requires_grad, x.grad) for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    try:
        backward(f(*args))
        analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
        base = [x.data.copy() for x in xs]
        rng = np.random.default_rng(seed)
        def at(vs, step):
            for x, b, v in zip(xs, base, vs):
                x.data[...] = b + step * v
            with no_grad():
                return f(*args).item()

        worst, accepted, redrawn = 0.0, 0, 0
        while accepted < directions:
            vs = [rng.standard_normal(x.shape) for x in xs]
            dot = sum(float((g * v).sum()) for g, v in zip(analytic, vs))
            d1 = (at(vs, h) - at(vs, -h)) / (2 * h)
            d2 = (at(vs, h / 2) - at(vs, -h / 2)) / h
            for x, b in zip(xs, base):
                x.data[...] = b
            if relative_error(d1, d2) > KINK_TOL and redrawn < directions:
                redrawn += 1
                continue
            worst = max(worst, float(relative_error(dot, d1)))
            accepted += 1
        if stats is not None:
            stats["redrawn"] = stats.get("redrawn", 0) + redrawn
        return worst
    finally:
        for x, (flag, g) in zip(xs, saved):
            x.requires_grad = flag
            x.grad = None
