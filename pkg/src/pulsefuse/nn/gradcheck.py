"""Central finite-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0
    tol: float = 1e-6
    n_shrunk: int = 0  # probes repeated with a smaller step after crossing a max-pool switch
    n_kinks: int = 0  # sampled coordinates replaced because the probe crossed a max-pool switch
    n_kink_kept: int = 0  # coordinates kept although every candidate in the tensor crossed one

    @property
    def max_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_err < self.tol


def _as_named(params) -> list[tuple[str, Tensor]]:
    if hasattr(params, "items"):
        return list(params.items())
    return [(f"p{i}", t) for i, t in enumerate(params)]


def _probe(f, flat, i, eps, track):
    """Central difference at coordinate i; also whether the max-pool selections differ at +-eps."""
    old = flat[i]
    tensor.selection_log = [] if track else None
    try:
        flat[i] = old + eps
        fp = f().item()
        plus, tensor.selection_log = tensor.selection_log, [] if track else None
        flat[i] = old - eps
        fm = f().item()
        crossed = track and plus != tensor.selection_log
    finally:
        flat[i] = old
        tensor.selection_log = None
    return (fp - fm) / (2 * eps), crossed


def grad_check(f, params, eps: float = 1e-5, tol: float = 1e-6, coords_per_param: int | None = None,
               seed: int = 0, skip_kinks: bool = False, max_tries: int = 8) -> GradCheckReport:
    """Compare backward() against central differences of ``f()``.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``
    (a ParamStore, dict or list of leaf tensors).  The error of one coordinate
    is |analytic - numeric| / max(1, |analytic|).  With ``coords_per_param``
    set, that many coordinates are sampled per parameter; otherwise all.

    A central difference whose two evaluations pick different max-pool winners
    spans a kink and does not estimate the derivative.  With ``skip_kinks``
    the probe is retried with eps/10 and eps/100, and if it still crosses, a
    sampled coordinate is replaced by another one from the same tensor (up to
    ``max_tries`` candidates).  Replacements are counted in the report.
    """
    named = _as_named(params)
    for _, t in named:
        t.grad = np.zeros_like(t.data)
    backward(f())
    analytic = {name: t.grad.copy() for name, t in named}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, t in named:
        flat = t.data.reshape(-1)
        sampled = coords_per_param is not None and coords_per_param < flat.size
        order = rng.permutation(flat.size) if sampled else np.arange(flat.size)
        want = coords_per_param if sampled else flat.size
        pool = list(order[want:]) if skip_kinks and sampled else []
        worst = 0.0
        for i in order[:want]:
            num, crossed = _probe(f, flat, i, eps, skip_kinks)
            tries = 1
            while True:
                for shrink in (10.0, 100.0):
                    if not crossed:
                        break
                    report.n_shrunk += 1
                    num, crossed = _probe(f, flat, i, eps / shrink, True)
                if not (crossed and pool and tries < max_tries):
                    break
                report.n_kinks += 1
                i = pool.pop()
                num, crossed = _probe(f, flat, i, eps, True)
                tries += 1
            if crossed:
                report.n_kink_kept += 1
            a = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
        report.per_param[name] = worst
        report.n_coords += want
    return report
