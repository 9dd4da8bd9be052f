"""Central finite-difference gradient checking.

The finite-difference side never touches the tape: it re-runs the forward
function on perturbed copies of the raw arrays, so it is an independent
oracle for the reverse-mode gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def finite_difference_grad(
    fn: Callable[[], Tensor],
    wrt: Tensor,
    indices: Iterable[tuple],
    h: float = 1e-5,
) -> dict:
    """Central-difference d(fn)/d(wrt) at the given flat-array indices.

    `fn` must be a closure over `wrt` (and anything else), returning a scalar
    Tensor; it is evaluated with `wrt.data` perturbed in place and restored.
    """
    out = {}
    flat = wrt.data.reshape(-1)
    for idx in indices:
        lin = int(np.ravel_multi_index(idx, wrt.shape)) if wrt.shape else 0
        orig = flat[lin]
        flat[lin] = orig + h
        f_plus = fn().item()
        flat[lin] = orig - h
        f_minus = fn().item()
        flat[lin] = orig
        out[idx] = (f_plus - f_minus) / (2.0 * h)
    return out


def sample_indices(shape: tuple, max_per_tensor: int, rng: np.random.Generator):
    """All indices for small tensors, a seeded sample for big ones."""
    total = int(np.prod(shape)) if shape else 1
    if total <= max_per_tensor:
        lins = np.arange(total)
    else:
        lins = rng.choice(total, size=max_per_tensor, replace=False)
        lins.sort()
    if not shape:
        return [()]
    return [tuple(int(v) for v in np.unravel_index(k, shape)) for k in lins]


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    rtol: float = 1e-5,
    h: float = 1e-5,
    max_per_tensor: int = 8,
    seed: int = 0,
) -> float:
    """Compare tape gradients of fn() against central differences.

    Error metric per coordinate: |analytic - fd| / max(1, |analytic|, |fd|).
    Raises AssertionError when any sampled coordinate exceeds `rtol`;
    returns the worst observed error.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = []
    for t in tensors:
        if t.grad is None:
            raise AssertionError(f"no gradient reached tensor of shape {t.shape}")
        analytic.append(t.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        idxs = sample_indices(t.shape, max_per_tensor, rng)
        fd = finite_difference_grad(fn, t, idxs, h=h)
        for idx, fd_val in fd.items():
            a_val = a[idx] if t.shape else float(a)
            err = abs(a_val - fd_val) / max(1.0, abs(a_val), abs(fd_val))
            worst = max(worst, err)
            if err > rtol:
                raise AssertionError(
                    f"gradient mismatch at {idx} of shape {t.shape}: "
                    f"analytic={a_val:.10g} fd={fd_val:.10g} err={err:.3g}"
                )
    return worst
