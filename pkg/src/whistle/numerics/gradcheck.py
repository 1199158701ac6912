"""Central-difference verification of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .ops import NonFiniteError
from .rng import Stream

PRECISION_DTYPES = {"high": torch.float64, "single": torch.float32}
DEFAULT_DELTA = {"high": 1e-4, "single": 3e-2}
# float32 forward values carry ~1e-7 relative rounding, so single mode uses the
# fourth-order stencil, whose smaller truncation error permits a wider step
DEFAULT_STENCIL = {"high": 2, "single": 4}
# denominator floor of the relative error; float32 differences carry ~1e-6
# absolute noise, so below ~1e-3 a relative error only measures that noise
DEFAULT_FLOOR = {"high": 1e-8, "single": 1e-3}


@dataclass
class GradCheckReport:
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    precision: str
    delta: float
    coords: list = field(default_factory=list)
    stencil: int = 2

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def mean_rel_err(self) -> float:
        return float(self.rel_errors.mean()) if self.rel_errors.size else 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(floor, np.abs(g_ad) + np.abs(g_fd))


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    precision: str = "high",
    delta: float | None = None,
    max_coords: int | None = None,
    stream: Stream | None = None,
    stencil: int | None = None,
) -> GradCheckReport:
    """Compare autograd against central differences for a scalar ``fn(*inputs)``.

    Floating inputs are cast to the precision's dtype and perturbed one
    coordinate at a time; integer inputs pass through untouched. With
    ``max_coords`` set, that many coordinates per floating input are
    sampled from ``stream`` instead of checking all of them.

    ``stencil`` is 2 for ``(f(x+d) - f(x-d)) / 2d`` or 4 for the fourth-order
    central formula over x +/- d and x +/- 2d.
    """
    if precision not in PRECISION_DTYPES:
        raise ValueError(f"unknown precision {precision!r}; expected 'high' or 'single'")
    dtype = PRECISION_DTYPES[precision]
    delta = DEFAULT_DELTA[precision] if delta is None else delta
    stencil = DEFAULT_STENCIL[precision] if stencil is None else stencil
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    offsets = (-delta, delta) if stencil == 2 else (-2 * delta, -delta, delta, 2 * delta)
    coeffs = (-0.5, 0.5) if stencil == 2 else (1 / 12, -8 / 12, 8 / 12, -1 / 12)

    args = [
        t.detach().to(dtype).clone().requires_grad_(True) if t.is_floating_point() else t
        for t in inputs
    ]
    out = fn(*args)
    if out.numel() != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise NonFiniteError("grad_check")
    diff_args = [a for a in args if a.is_floating_point()]
    analytic = torch.autograd.grad(out, diff_args, allow_unused=True)

    g_ad, g_fd, coords = [], [], []
    with torch.no_grad():
        for which, (arg, grad) in enumerate(zip(diff_args, analytic)):
            grad = torch.zeros_like(arg) if grad is None else grad
            flat = arg.view(-1)
            idx = np.arange(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                picker = stream if stream is not None else Stream(0)
                idx = np.sort(picker.child("coords", which).permutation(flat.numel())[:max_coords])
            for i in idx:
                orig = flat[i].item()
                total = 0.0
                for off, c in zip(offsets, coeffs):
                    flat[i] = orig + off
                    val = fn(*args)
                    if not torch.isfinite(val):
                        flat[i] = orig
                        raise NonFiniteError("grad_check")
                    total += c * val.item()
                flat[i] = orig
                g_fd.append(total / delta)
                g_ad.append(grad.reshape(-1)[i].item())
                coords.append((which, int(i)))
    g_ad_arr = np.asarray(g_ad, dtype=np.float64)
    g_fd_arr = np.asarray(g_fd, dtype=np.float64)
    return GradCheckReport(
        rel_errors=relative_error(g_ad_arr, g_fd_arr, DEFAULT_FLOOR[precision]),
        analytic=g_ad_arr,
        numeric=g_fd_arr,
        precision=precision,
        delta=delta,
        coords=coords,
        stencil=stencil,
    )
