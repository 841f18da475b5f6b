"""Photometric losses and their parameter gradients.

For every ROI pixel ``x`` the residual is ``r = I_def(x) - I_ref(x - u(x))``
with ``u`` produced by the network.  Two per-pixel penalties are supported:

* ``mse``:           r**2
* ``log_residual``:  log10(1 + r**2)   (compresses the range of large residuals)

Both are averaged over the ROI pixel count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import network
from .grid import RoiMask, ScalarField, check_same_shape
from .interp import BICUBIC, BorderPolicy, SampleScheme, sample_points
from .network import MlpParams, NumericalError

LossKind = Literal["mse", "log_residual"]
_LN10 = math.log(10.0)


@dataclass
class ObjectiveEval:
    loss: float
    mean_abs_gray_error: float
    param_grad: np.ndarray | None = None
    residual_field: ScalarField | None = None


def penalty(r: np.ndarray, kind: LossKind) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel penalty and its derivative with respect to the residual."""
    r2 = r * r
    if kind == "mse":
        return r2, 2.0 * r
    if kind == "log_residual":
        return np.log10(1.0 + r2), 2.0 * r / ((1.0 + r2) * _LN10)
    raise ValueError(f"unknown loss kind {kind!r}")


class Photometric:
    """Loss over a fixed image pair and ROI; caches coordinates and targets."""

    def __init__(self, ref: ScalarField, deformed: ScalarField, roi: RoiMask | None = None,
                 scheme: SampleScheme = BICUBIC, border: BorderPolicy = "clamp"):
        check_same_shape(ref, deformed, roi)
        self.height, self.width = ref.shape
        self.roi = roi if roi is not None else RoiMask.full(self.width, self.height)
        self.ref = ref
        self.deformed = deformed
        self.scheme = scheme
        self.border = border
        self.xs, self.ys = self.roi.coords()
        self.iy = self.ys.astype(np.intp)
        self.ix = self.xs.astype(np.intp)
        self.coords = network.normalize_coords(self.xs, self.ys, self.width, self.height)
        self.target = deformed.values[self.iy, self.ix]
        self._coords32 = None

    @property
    def npoints(self) -> int:
        return self.xs.size

    def _coords_for(self, params: MlpParams) -> np.ndarray:
        if params.config.precision == "float32":
            if self._coords32 is None:
                self._coords32 = self.coords.astype(np.float32)
            return self._coords32
        return self.coords

    def displacement(self, params: MlpParams) -> np.ndarray:
        return network.forward(params, self._coords_for(params))

    def residual(self, params: MlpParams) -> np.ndarray:
        uv = self.displacement(params)
        pred = sample_points(self.ref.values, self.xs - uv[:, 0], self.ys - uv[:, 1],
                             self.scheme, self.border)
        return self.target - pred

    def __call__(self, params: MlpParams, kind: LossKind = "mse", want_grad: bool = True,
                 want_residual: bool = False) -> ObjectiveEval:
        coords = self._coords_for(params)
        if want_grad:
            uv, tape = network.forward(params, coords, keep=True)
            pred, gx, gy = sample_points(self.ref.values, self.xs - uv[:, 0],
                                         self.ys - uv[:, 1], self.scheme, self.border, grad=True)
        else:
            uv = network.forward(params, coords)
            pred = sample_points(self.ref.values, self.xs - uv[:, 0], self.ys - uv[:, 1],
                                 self.scheme, self.border)
        r = self.target - pred
        per, dper = penalty(r, kind)
        n = r.size
        loss = float(per.sum()) / n
        if not math.isfinite(loss):
            i = int(np.flatnonzero(~np.isfinite(per))[0])
            raise NumericalError(
                f"non-finite loss at pixel ({int(self.xs[i])}, {int(self.ys[i])})")
        ev = ObjectiveEval(loss, float(np.abs(r).sum()) / n)
        if want_grad:
            # dr/du = +grad(I_ref) at x - u: the two minus signs cancel
            scale = dper / n
            cot = np.stack([scale * gx, scale * gy], axis=1)
            ev.param_grad = network.backward(params, coords, cot, tape)
        if want_residual:
            ev.residual_field = self._scatter(r * r)
        return ev

    def _scatter(self, vals: np.ndarray) -> ScalarField:
        out = np.zeros((self.height, self.width))
        out[self.iy, self.ix] = vals
        return ScalarField(out)


def evaluate(params: MlpParams, ref: ScalarField, deformed: ScalarField, roi: RoiMask | None = None,
             scheme: SampleScheme = BICUBIC, kind: LossKind = "mse", want_grad: bool = True,
             border: BorderPolicy = "clamp") -> ObjectiveEval:
    return Photometric(ref, deformed, roi, scheme, border)(params, kind, want_grad)


def residual_field(ref: ScalarField, deformed: ScalarField, params: MlpParams,
                   roi: RoiMask | None = None, scheme: SampleScheme = BICUBIC,
                   border: BorderPolicy = "clamp") -> ScalarField:
    """Squared residual ``(I_def - I_pred)**2`` on the ROI, zero outside."""
    obj = Photometric(ref, deformed, roi, scheme, border)
    r = obj.residual(params)
    return obj._scatter(r * r)
