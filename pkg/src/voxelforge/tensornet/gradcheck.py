"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str | None
    worst_index: tuple | None
    checked: int
    per_param: dict[str, float] = field(default_factory=dict)

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(
    f,
    params: dict[str, Tensor],
    h: float = 1e-3,
    denom_floor: float = 1e-8,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of the scalar f() against central differences.

    f must be deterministic and close over params; each call rebuilds the
    graph. Relative error is |a - n| / max(|a| + |n|, denom_floor). When
    max_per_param is set, that many elements per parameter are sampled
    with rng instead of sweeping all of them.
    """
    for p in params.values():
        p.grad = None
        if not p.requires_grad:
            raise ValueError("grad_check params must require grad")
    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    def scalar() -> float:
        return float(f().data.reshape(()))

    worst = 0.0
    worst_param = None
    worst_index = None
    checked = 0
    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n_elem = flat.size
        if max_per_param is not None and n_elem > max_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            positions = rng.choice(n_elem, size=max_per_param, replace=False)
        else:
            positions = range(n_elem)
        p_worst = 0.0
        for pos in positions:
            orig = flat[pos]
            flat[pos] = orig + h
            fp = scalar()
            flat[pos] = orig - h
            fm = scalar()
            flat[pos] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[pos])
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), denom_floor)
            checked += 1
            if rel > p_worst:
                p_worst = rel
            if rel > worst:
                worst = rel
                worst_param = name
                worst_index = np.unravel_index(int(pos), p.data.shape)
        per_param[name] = p_worst
    return GradCheckReport(worst, worst_param, worst_index, checked, per_param)
