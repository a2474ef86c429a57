"""Independent reference implementations used to check the real code.

Everything here is deliberately slow and simple: central finite
differences for gradients and pixel-counting rasterization for box
overlap. Nothing imports from the modules under test except the Tensor
type itself.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from xgrain import autograd as ag
from xgrain.geometry import NormBox

FD_STEP = 1e-5
FD_TOL = 1e-4


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Worst elementwise |a - n| / max(|a| + |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(n), floor)
    return float((np.abs(a - n) / denom).max())


def fd_grad(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of scalar f() w.r.t. array x.

    Perturbs x in place and restores it; f must read the live array.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def check_grads(build: Callable[[], ag.Tensor], params: Sequence[ag.Tensor] | dict,
                step: float = FD_STEP) -> float:
    """Max relative error between backward() grads and finite differences.

    build() must rerun the full forward pass from the live param arrays
    and return the scalar loss.
    """
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        if p.data.dtype != np.float64:
            raise AssertionError("gradient checks need float64 parameters")
    loss = build()
    ag.zero_grads(params)
    ag.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    def scalar() -> float:
        return float(build().data)

    worst = 0.0
    for p, a in zip(params, analytic):
        numeric = fd_grad(scalar, p.data, step=step)
        worst = max(worst, max_rel_err(a, numeric))
    return worst


def raster_giou(a: NormBox, b: NormBox, res: int = 1000) -> float:
    """Generalized IoU by counting pixel centers on a res x res grid."""
    centers = (np.arange(res) + 0.5) / res
    xs = centers[None, :]
    ys = centers[:, None]

    def box_mask(box: NormBox) -> np.ndarray:
        x0, y0, x1, y1 = box.corners()
        return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)

    ma = box_mask(a)
    mb = box_mask(b)
    inter = np.count_nonzero(ma & mb)
    union = np.count_nonzero(ma | mb)
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    hull = NormBox.from_corners(min(ax0, bx0), min(ay0, by0),
                                max(ax1, bx1), max(ay1, by1))
    hull_n = np.count_nonzero(box_mask(hull))
    if union == 0 or hull_n == 0:
        raise AssertionError("raster_giou: boxes too small for the raster")
    return inter / union - (hull_n - union) / hull_n


def random_box(rng: np.random.Generator, min_side: float = 0.05) -> NormBox:
    """A uniform random valid box with both sides at least min_side."""
    w = float(rng.uniform(min_side, 1.0))
    h = float(rng.uniform(min_side, 1.0))
    cx = float(rng.uniform(w / 2.0, 1.0 - w / 2.0)) if w < 1.0 else 0.5
    cy = float(rng.uniform(h / 2.0, 1.0 - h / 2.0)) if h < 1.0 else 0.5
    return NormBox(cx, cy, w, h)
