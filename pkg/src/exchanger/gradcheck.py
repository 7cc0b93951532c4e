"""Central finite-difference checks for the autodiff engine.

Both helpers switch to 64-bit tensors internally; the callable receives
freshly built float64 leaves and must return a scalar ``Tensor``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, precision


@dataclass
class GradCheckResult:
    name: str
    analytic: float
    numeric: float
    ok: bool


def _close(a: float | np.ndarray, n: float | np.ndarray, rtol: float, atol: float) -> bool:
    return bool(np.all(np.abs(a - n) <= atol + rtol * np.abs(n)))


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, eps: float = 1e-6) -> np.ndarray:
    """Elementwise central differences of ``fn`` w.r.t. ``arrays[index]``."""
    with precision(np.float64):
        base = [np.array(a, dtype=np.float64) for a in arrays]
        out = np.zeros_like(base[index])
        flat = base[index].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig - eps
            down = fn(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    with precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(*leaves)
        backward(loss)
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def check_elementwise(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    rtol: float = 1e-4,
    atol: float = 1e-6,
    eps: float = 1e-6,
) -> bool:
    """Full Jacobian check, one perturbation per input element. For small inputs."""
    grads = analytic_grads(fn, arrays)
    return all(
        _close(g, numeric_grad(fn, arrays, i, eps), rtol, atol) for i, g in enumerate(grads)
    )


def check_directional(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    rng: np.random.Generator,
    names: Sequence[str] | None = None,
    rtol: float = 1e-4,
    atol: float = 1e-6,
    eps: float = 1e-6,
) -> list[GradCheckResult]:
    """Compare <grad, u> against a central difference along a random ``u``.

    One direction per input array, so every input is audited separately at
    a cost of two forward passes each.
    """
    names = list(names) if names is not None else [f"arg{i}" for i in range(len(arrays))]
    grads = analytic_grads(fn, arrays)
    base = [np.array(a, dtype=np.float64) for a in arrays]
    results = []
    with precision(np.float64):
        for i, g in enumerate(grads):
            u = rng.standard_normal(base[i].shape)
            u /= max(np.linalg.norm(u), 1e-12)
            plus = [a if j != i else a + eps * u for j, a in enumerate(base)]
            minus = [a if j != i else a - eps * u for j, a in enumerate(base)]
            numeric = (fn(*[Tensor(a) for a in plus]).item() - fn(*[Tensor(a) for a in minus]).item()) / (2 * eps)
            analytic = float(np.sum(g * u))
            results.append(GradCheckResult(names[i], analytic, numeric, _close(analytic, numeric, rtol, atol)))
    return results
