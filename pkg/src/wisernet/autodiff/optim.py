"""Adam with bias correction."""

from __future__ import annotations

from typing import Iterable, Sequence, Tuple

import numpy as np

from wisernet.autodiff.nn import Parameter
from wisernet.exceptions import UpdateError


def adam_step(
    params: Iterable[Parameter],
    lr: float = 1e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Apply one Adam update in place using each parameter's ``grad``.

    Raises:
        UpdateError: if any parameter has no gradient.
    """
    params = list(params)
    for p in params:
        if p.grad is None:
            raise UpdateError(f"parameter {p.name or '<unnamed>'} {p.shape} has no gradient")
    b1, b2 = betas
    for p in params:
        st = p.state
        g = p.grad
        if st.m is None:
            st.m = np.zeros_like(p.data)
            st.v = np.zeros_like(p.data)
        st.step += 1
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * (g * g)
        m_hat = st.m / (1.0 - b1 ** st.step)
        v_hat = st.v / (1.0 - b2 ** st.step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper so training code reads ``opt.step()``."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas, self.eps)
