"""Sub-pixel sampling with analytic derivatives, and the image warp.

The warp builds the predicted deformed image by pulling reference intensities
from ``x - u(x)``:

    I_pd(x) = I_ref(x - u(x))

Both kernels reproduce stored pixels exactly at integer coordinates.  The cubic
kernel is the Keys cubic convolution with parameter ``a`` (-0.5 by default).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .grid import RoiMask, ScalarField, VectorField2, check_same_shape

BorderPolicy = Literal["clamp", "error"]


class OutOfBoundsError(ValueError):
    def __init__(self, message: str, index: int, point: tuple[float, float]):
        super().__init__(message)
        self.index = index
        self.point = point


@dataclass(frozen=True)
class SampleScheme:
    kind: Literal["bilinear", "bicubic"] = "bicubic"
    a: float = -0.5

    def __post_init__(self):
        if self.kind not in ("bilinear", "bicubic"):
            raise ValueError(f"unknown interpolation kind {self.kind!r}")


BICUBIC = SampleScheme("bicubic")
BILINEAR = SampleScheme("bilinear")


def _cubic_weights(t: np.ndarray, a: float, deriv: bool):
    """Weights (and d/dt) for taps at offsets -1, 0, 1, 2 given fractional part t."""
    t2 = t * t
    u = 1.0 - t
    u2 = u * u
    # outer taps sit at distance s = 1 + t and 1 + u; a(s^3 - 5s^2 + 8s - 4) = a(t^3 - 2t^2 + t)
    w = [a * (t2 * t - 2 * t2 + t),
         (a + 2) * t2 * t - (a + 3) * t2 + 1,
         (a + 2) * u2 * u - (a + 3) * u2 + 1,
         a * (u2 * u - 2 * u2 + u)]
    if not deriv:
        return w, None
    dw = [a * (3 * t2 - 4 * t + 1),
          3 * (a + 2) * t2 - 2 * (a + 3) * t,
          -(3 * (a + 2) * u2 - 2 * (a + 3) * u),
          -a * (3 * u2 - 4 * u + 1)]
    return w, dw


def _axis(coord: np.ndarray, n: int, scheme: SampleScheme, deriv: bool):
    """Tap indices, weights and weight derivatives along one axis of length n, as lists."""
    if scheme.kind == "bilinear":
        if n == 1:
            z = np.zeros(coord.shape, dtype=np.intp)
            one = np.ones(coord.shape)
            return [z], [one], [np.zeros(coord.shape)] if deriv else None
        base = np.clip(np.floor(coord), 0, n - 2).astype(np.intp)
        t = coord - base
        dw = [np.full(coord.shape, -1.0), np.ones(coord.shape)] if deriv else None
        return [base, base + 1], [1.0 - t, t], dw
    fl = np.floor(coord)
    t = coord - fl
    base = fl.astype(np.intp)
    w, dw = _cubic_weights(t, scheme.a, deriv)
    idx = [np.clip(base + k, 0, n - 1) for k in (-1, 0, 1, 2)]
    return idx, w, dw


def sample_points(values: np.ndarray, x, y, scheme: SampleScheme = BICUBIC,
                  border: BorderPolicy = "clamp", grad: bool = False):
    """Sample a 2-D array at many points.

    Returns the interpolated values, or ``(values, d/dx, d/dy)`` when ``grad``.
    Under ``border="clamp"`` coordinates are clamped into the image and the
    derivative along a clamped component is zero.
    """
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    outx = (x < 0) | (x > w - 1)
    outy = (y < 0) | (y > h - 1)
    if border == "error":
        bad = outx | outy | ~np.isfinite(x) | ~np.isfinite(y)
        if bad.any():
            i = int(np.flatnonzero(bad.ravel())[0])
            px, py = float(x.ravel()[i]), float(y.ravel()[i])
            raise OutOfBoundsError(
                f"sample point ({px:.6g}, {py:.6g}) lies outside [0, {w - 1}]x[0, {h - 1}]",
                i, (px, py))
    elif border != "clamp":
        raise ValueError(f"unknown border policy {border!r}")
    xc = np.clip(x, 0.0, w - 1)
    yc = np.clip(y, 0.0, h - 1)

    ix, wx, dwx = _axis(xc, w, scheme, grad)
    iy, wy, dwy = _axis(yc, h, scheme, grad)
    flat = values.ravel()
    val = np.zeros(x.shape)
    gx = np.zeros(x.shape) if grad else None
    gy = np.zeros(x.shape) if grad else None
    for k in range(len(iy)):
        rowbase = iy[k] * w
        row = np.zeros(x.shape)
        drow = np.zeros(x.shape) if grad else None
        for j in range(len(ix)):
            tap = flat[rowbase + ix[j]]
            row += tap * wx[j]
            if grad:
                drow += tap * dwx[j]
        val += row * wy[k]
        if grad:
            gx += drow * wy[k]
            gy += row * dwy[k]
    if not grad:
        return val
    if border == "clamp":
        gx = np.where(outx, 0.0, gx)
        gy = np.where(outy, 0.0, gy)
    return val, gx, gy


def sample(field: ScalarField, xi, scheme: SampleScheme = BICUBIC,
           border: BorderPolicy = "clamp") -> float:
    return float(sample_points(field.values, xi[0], xi[1], scheme, border))


def sample_grad(field: ScalarField, xi, scheme: SampleScheme = BICUBIC,
                border: BorderPolicy = "clamp") -> tuple[float, np.ndarray]:
    v, gx, gy = sample_points(field.values, xi[0], xi[1], scheme, border, grad=True)
    return float(v), np.array([float(gx), float(gy)])


def warp(ref: ScalarField, disp: VectorField2, roi: RoiMask | None = None,
         scheme: SampleScheme = BICUBIC, border: BorderPolicy = "clamp") -> ScalarField:
    """Predicted deformed image: ``out(x) = ref(x - u(x))`` on the ROI, 0 elsewhere."""
    check_same_shape(ref, disp, roi)
    h, w = ref.shape
    if roi is None:
        roi = RoiMask.full(w, h)
    xs, ys = roi.coords()
    iy, ix = ys.astype(np.intp), xs.astype(np.intp)
    vals = sample_points(ref.values, xs - disp.u[iy, ix], ys - disp.v[iy, ix], scheme, border)
    out = np.zeros((h, w))
    out[iy, ix] = vals
    return ScalarField(out)
