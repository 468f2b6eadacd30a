"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from mae.tensor import Tape, Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; 0 when both sides vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences; ``fn`` must return a scalar."""
    flat = param.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * eps)
    return out.reshape(param.shape)


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check_gradients(
    fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5
) -> dict[str, float]:
    """Relative error per parameter between the tape and finite differences.

    ``fn`` is called repeatedly and must be deterministic (no fresh dropout
    draws, no running-statistic side effects that feed back into the output).
    """
    grads = analytic_grads(fn, params)
    errors = {}
    for i, (p, g) in enumerate(zip(params, grads)):
        errors[p.name or f"param{i}"] = relative_error(g, numeric_grad(fn, p, eps))
    return errors
