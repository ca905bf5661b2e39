"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from wisernet.autodiff.tensor import Tensor


def numerical_grad(
    fn: Callable[[], Tensor],
    leaf: Tensor,
    h: float = 1e-6,
    weights: Optional[np.ndarray] = None,
    indices=None,
) -> np.ndarray:
    """Estimate d <weights, fn()> / d leaf by central differences.

    ``fn`` must rebuild the graph from ``leaf.data`` on every call. When
    ``indices`` (flat positions) is given only those entries are estimated.
    """

    def objective() -> float:
        out = fn().data
        return float(np.sum(out if weights is None else out * weights))

    flat = leaf.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    est = np.zeros(len(positions), dtype=np.float64)
    for k, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = objective()
        flat[i] = orig - h
        f_minus = objective()
        flat[i] = orig
        est[k] = (f_plus - f_minus) / (2.0 * h)
    return est if indices is not None else est.reshape(leaf.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entrywise ``|a - n| / max(|a| + |n|, floor)``.

    The floor is 1e-3 of the largest numeric magnitude so that entries whose
    true gradient is zero compare on an absolute scale instead of amplifying
    finite-difference round-off.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if not a.size:
        return 0.0
    floor = max(1e-3 * float(np.max(np.abs(n))), 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def check_gradients(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare backprop against finite differences for every leaf.

    The objective is a fixed random projection of ``fn()``'s output, so
    outputs whose plain sum is constant (normalizations) are still probed.
    The default step 1e-5 sits near the float64 optimum for central
    differences (machine epsilon to the power 1/3).
    Returns the largest relative error over all checked entries, pooled
    across leaves so that the magnitude floor is shared.
    """
    # own stream, so the projection never coincides with data drawn from ``seed``
    rng = np.random.default_rng([seed, 1])
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    weights = rng.standard_normal(out.shape)
    out.backward(weights.astype(out.dtype))
    analytic_all, numeric_all = [], []
    for leaf in leaves:
        analytic = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
        idx = None
        if max_entries is not None and leaf.size > max_entries:
            idx = np.sort(rng.choice(leaf.size, size=max_entries, replace=False))
        numeric = numerical_grad(fn, leaf, h, weights=weights, indices=idx)
        picked = analytic.reshape(-1)[idx] if idx is not None else analytic
        analytic_all.append(np.ravel(picked))
        numeric_all.append(np.ravel(numeric))
    return relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all))
