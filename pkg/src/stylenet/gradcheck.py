"""Finite-difference verification of backward rules.

The analytic gradient of a random linear projection of an op's output is
compared element-wise against central differences (f(x+h) - f(x-h)) / (2h).
Relative error uses a max(|analytic|, |numeric|, 1e-8) denominator. Checks
run in float64; callers should sample points away from relu/max kinks.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .seeding import rng_for


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    tolerance: float
    worst_input: int
    worst_index: tuple

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"{verdict}: max rel error {self.max_rel_error:.3e} "
                f"(tol {self.tolerance:.1e}) at input {self.worst_input} "
                f"index {self.worst_index}")


def grad_check(op, inputs, step: float = 1e-3, tolerance: float = 1e-3,
               seed: int = 0, check_inputs=None) -> GradCheckResult:
    """Compare op's analytic input gradients against central differences.

    op: callable taking len(inputs) Tensors and returning one Tensor.
    inputs: array-likes, converted to float64 Tensors.
    check_inputs: indices of inputs to differentiate (default: all).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy()) for a in arrays]
    with Tape() as tape:
        out = op(*tensors)
    projection = rng_for(seed, "grad-check-projection").standard_normal(out.shape)
    tape.backward_from(out, projection)

    def scalar():
        result = op(*[Tensor(a) for a in arrays])
        return float((result.data * projection).sum())

    if check_inputs is None:
        check_inputs = range(len(arrays))
    worst = (0.0, 0, ())
    for idx in check_inputs:
        analytic = tensors[idx].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[idx])
        arr = arrays[idx]
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            mi = it.multi_index
            keep = arr[mi]
            arr[mi] = keep + step
            plus = scalar()
            arr[mi] = keep - step
            minus = scalar()
            arr[mi] = keep
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[mi])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst[0]:
                worst = (rel, idx, mi)
            it.iternext()
    max_rel, worst_input, worst_index = worst
    return GradCheckResult(max_rel <= tolerance, max_rel, tolerance,
                           worst_input, worst_index)


def scalar_fn_grad_check(loss_fn, params, step: float = 1e-3,
                         tolerance: float = 1e-3, max_coords: int = 0,
                         seed: int = 0) -> GradCheckResult:
    """Finite-difference check of a scalar function of named parameters.

    loss_fn() must rebuild the forward pass from the current param data and
    return a scalar Tensor. params maps names to float64 Tensors whose data
    is perturbed in place. max_coords > 0 subsamples that many coordinates
    per parameter (seeded) so whole-model checks stay fast.
    """
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    worst = (0.0, 0, ())
    for pos, (name, p) in enumerate(sorted(params.items())):
        arr = p.data
        coords = list(np.ndindex(arr.shape))
        if max_coords and len(coords) > max_coords:
            pick = rng_for(seed, "grad-check-coords", name).choice(
                len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for mi in coords:
            keep = arr[mi]
            arr[mi] = keep + step
            plus = loss_fn().item()
            arr[mi] = keep - step
            minus = loss_fn().item()
            arr[mi] = keep
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[name][mi])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst[0]:
                worst = (rel, pos, (name,) + tuple(mi))
    max_rel, worst_input, worst_index = worst
    return GradCheckResult(max_rel <= tolerance, max_rel, tolerance,
                           worst_input, worst_index)
