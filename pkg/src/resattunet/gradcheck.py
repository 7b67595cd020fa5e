"""Central finite-difference verification of the analytic backward passes."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import weighted_sum
from .tensor import Tape, Tensor


class GradientCheckError(AssertionError):
    pass


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    step: float = 1e-5,
    max_coords: int | None = None,
) -> float:
    """Maximum relative error between analytic and finite-difference gradients.

    ``fn`` maps the ``inputs`` to a tensor; the checked scalar is that tensor
    contracted against a seeded standard-normal projection. Inputs must be
    float64. With ``max_coords`` set, only that many seeded coordinates per
    input are perturbed instead of all of them.

    The relative error per scalar is ``|a - n| / max(1, |a|, |n|)``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise GradientCheckError(f"gradient_check needs float64 inputs, got {t.dtype} for {t!r}")
    rng = np.random.default_rng(seed)
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()

    out = fn(*inputs)
    proj = np.asarray(1.0) if out.size == 1 else rng.standard_normal(out.shape)

    def scalar() -> float:
        return float((fn(*inputs).data * proj).sum())

    try:
        with Tape() as tape:
            loss = weighted_sum(fn(*inputs), proj)
        tape.backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        worst = 0.0
        for k, (t, a) in enumerate(zip(inputs, analytic)):
            if not np.all(np.isfinite(a)):
                loc = tuple(np.argwhere(~np.isfinite(a))[0])
                raise GradientCheckError(f"non-finite analytic gradient for input {k} at {loc}")
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            a_flat = a.reshape(-1)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                up = scalar()
                flat[i] = orig - step
                down = scalar()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]), abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
