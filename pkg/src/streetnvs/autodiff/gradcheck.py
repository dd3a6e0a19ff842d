"""Central-finite-difference gradient verification.

Runs the graph builder twice per probed coordinate and compares against the
analytic gradient from one backward pass.  Meant to be used inside
``test_mode()`` so everything is float64 with domain checks on.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    """|a-n| scaled by the larger magnitude; both-tiny compares as equal."""
    m = max(abs(a), abs(n))
    if m < floor:
        return 0.0
    return abs(a - n) / m


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3,
                 indices=None) -> dict[tuple, float]:
    """Central differences of scalar f with respect to entries of x."""
    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[np.unravel_index(i, x.data.shape)] = (fp - fm) / (2 * h)
    return out


def check_gradients(build: Callable[[], Tensor],
                    params: Sequence[tuple[str, Tensor]],
                    h: float = 1e-3,
                    samples_per_param: int | None = 5,
                    rng: np.random.Generator | None = None):
    """Compare analytic and numeric gradients for the given parameters.

    build() must construct the full forward graph and return the scalar loss;
    it is re-run for every probe, so it has to be deterministic.  Returns
    (max relative error, worst [name, index, analytic, numeric] record).
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = build()
        tape.backward(loss, [p for _, p in params])

    worst = (0.0, None)
    for name, p in params:
        n = p.data.size
        if samples_per_param is None or n <= samples_per_param:
            idx = list(range(n))
        else:
            idx = sorted(rng.choice(n, size=samples_per_param, replace=False))
        numeric = numeric_grad(build, p, h=h, indices=idx)
        analytic = p.grad.reshape(-1)
        for i in idx:
            pos = np.unravel_index(i, p.data.shape)
            err = relative_error(float(analytic[i]), numeric[pos])
            if err > worst[0]:
                worst = (err, (name, pos, float(analytic[i]), numeric[pos]))
    return worst
