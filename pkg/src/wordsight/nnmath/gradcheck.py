"""Finite-difference verification of tape gradients.

Central differences on a sampled subset of parameter coordinates, compared
against the analytic gradients with a relative error that is floored so that
near-zero coordinates do not blow up the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, Tensor


@dataclass
class CoordError:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_coords: int
    worst: list[CoordError] = field(default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol

    def summary(self, tol: float = 1e-4) -> str:
        lines = [
            f"gradcheck: {self.n_coords} coordinates, max rel err "
            f"{self.max_rel_err:.3e} ({'PASS' if self.passed(tol) else 'FAIL'} at {tol:g})"
        ]
        for c in self.worst[:5]:
            lines.append(
                f"  {c.param}{list(c.index)}: analytic {c.analytic:.6e} "
                f"numeric {c.numeric:.6e} rel {c.rel_err:.3e}"
            )
        return "\n".join(lines)


def _relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 0.01)


def check_gradients(
    build_loss,
    params: list[Parameter],
    h: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of `build_loss()` against central differences.

    `build_loss` must rebuild the forward pass from the current parameter
    data each call and return a scalar Tensor. Parameters must be float64;
    float32 finite differences are too coarse at h=1e-5 to say anything.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(
                f"check_gradients: parameter '{p.name}' has dtype {p.data.dtype}; "
                "finite differences require float64"
            )

    for p in params:
        p.zero_grad()
    loss = build_loss()
    if not isinstance(loss, Tensor) or loss.data.ndim != 0:
        raise ValueError("check_gradients: build_loss must return a scalar Tensor")
    loss.backward()
    analytic = [p.grad.copy() for p in params]

    sizes = [p.data.size for p in params]
    total = int(sum(sizes))
    rng = np.random.default_rng(seed)
    if total <= max_coords:
        flat_ids = np.arange(total)
    else:
        flat_ids = rng.choice(total, size=max_coords, replace=False)

    offsets = np.cumsum([0] + sizes)
    errors: list[CoordError] = []
    for fid in flat_ids:
        pi = int(np.searchsorted(offsets, fid, side="right") - 1)
        local = int(fid - offsets[pi])
        p = params[pi]
        flat = p.data.reshape(-1)
        orig = flat[local]

        flat[local] = orig + h
        f_plus = float(build_loss().data)
        flat[local] = orig - h
        f_minus = float(build_loss().data)
        flat[local] = orig

        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[pi].reshape(-1)[local])
        errors.append(
            CoordError(
                param=p.name,
                index=np.unravel_index(local, p.data.shape),
                analytic=a,
                numeric=numeric,
                rel_err=_relative_error(a, numeric),
            )
        )

    errors.sort(key=lambda c: c.rel_err, reverse=True)
    max_err = errors[0].rel_err if errors else 0.0
    return GradCheckReport(max_rel_err=max_err, n_coords=len(errors), worst=errors[:10])
