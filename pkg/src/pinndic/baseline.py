"""Classical subset DIC: integer ZNCC search, then inverse-compositional
Gauss-Newton on the zero-normalized SSD with a zero- or first-order shape function.

Displacements follow the package-wide convention ``I_def(x) = I_ref(x - u(x))``:
each subset is cut from the deformed image around ``x`` and located in the
reference, so ``u`` is defined on the deformed-image grid exactly like the
network solver's output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .grid import RoiMask, ScalarField, VectorField2, check_same_shape
from .interp import BICUBIC, SampleScheme, sample_points


@dataclass(frozen=True)
class SubsetConfig:
    subset_size: int = 31
    step: int = 1
    shape_order: Literal["zero", "first"] = "first"
    scheme: SampleScheme = BICUBIC
    max_gn_iters: int = 50
    conv_tol: float = 1e-4
    search_radius: int = 10

    def __post_init__(self):
        if self.subset_size < 5 or self.subset_size % 2 == 0:
            raise ValueError("subset_size must be odd and >= 5")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if self.shape_order not in ("zero", "first"):
            raise ValueError(f"unknown shape order {self.shape_order!r}")


def edge_band(config: SubsetConfig) -> int:
    """Width of the border where no full subset fits."""
    return config.subset_size // 2


@dataclass
class SubsetStats:
    candidates: int
    converged: int
    not_converged: int
    diverged: int
    flat: int


def _box_sums(a: np.ndarray, half: int) -> np.ndarray:
    """Sum over the (2*half+1)^2 window centred at each pixel; NaN where it leaves the image."""
    h, w = a.shape
    s = 2 * half + 1
    c = np.zeros((h + 1, w + 1))
    c[1:, 1:] = a.cumsum(0).cumsum(1)
    out = np.full((h, w), np.nan)
    if h >= s and w >= s:
        out[half:h - half, half:w - half] = c[s:, s:] - c[:-s, s:] - c[s:, :-s] + c[:-s, :-s]
    return out


def integer_search(template: np.ndarray, target: np.ndarray, points_y: np.ndarray,
                   points_x: np.ndarray, half: int, radius: int,
                   min_overlap: float = 0.75) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integer shift (dx, dy) maximizing ZNCC between the template window at each
    point and the target window at point + shift; returns (dx, dy, zncc).

    Target windows may hang over the image edge: the correlation then uses the
    overlapping pixels only, provided they cover ``min_overlap`` of the window.
    """
    n = (2 * half + 1) ** 2
    h, w = template.shape
    best = np.full(points_x.shape, -np.inf)
    bx = np.zeros(points_x.shape, dtype=np.intp)
    by = np.zeros(points_x.shape, dtype=np.intp)
    # padded so every window of every candidate shift stays in the array
    pad = half + radius
    tp = np.pad(template, pad)
    gp = np.pad(target, pad)
    mp = np.pad(np.ones((h, w)), pad)
    cy, cx = points_y + pad, points_x + pad

    def box_at(a, yy, xx):
        c = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
        c[1:, 1:] = a.cumsum(0).cumsum(1)
        s = 2 * half + 1
        y0, x0 = yy - half, xx - half
        return c[y0 + s, x0 + s] - c[y0, x0 + s] - c[y0 + s, x0] + c[y0, x0]

    H, W = tp.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            # shifted[y, x] = target-side value at (y + dy, x + dx)
            gs = np.zeros_like(gp)
            ms = np.zeros_like(mp)
            ys0, ys1 = max(0, -dy), min(H, H - dy)
            xs0, xs1 = max(0, -dx), min(W, W - dx)
            gs[ys0:ys1, xs0:xs1] = gp[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
            ms[ys0:ys1, xs0:xs1] = mp[ys0 + dy:ys1 + dy, xs0 + dx:xs1 + dx]
            cnt = box_at(ms, cy, cx)
            tm = tp * ms
            st, stt = box_at(tm, cy, cx), box_at(tm * tp, cy, cx)
            sg, sgg = box_at(gs, cy, cx), box_at(gs * gs, cy, cx)
            stg = box_at(tp * gs, cy, cx)
            ok = cnt >= min_overlap * n
            cnt = np.where(ok, cnt, 1.0)
            with np.errstate(invalid="ignore", divide="ignore"):
                zncc = (stg - st * sg / cnt) / np.sqrt((stt - st**2 / cnt) * (sgg - sg**2 / cnt))
            zncc = np.where(ok & np.isfinite(zncc), zncc, -np.inf)
            better = zncc > best
            best = np.where(better, zncc, best)
            bx = np.where(better, dx, bx)
            by = np.where(better, dy, by)
    return bx, by, best


def _compose_inverse(p: np.ndarray, dp: np.ndarray, first: bool) -> np.ndarray:
    """Warp update W(p) <- W(p) o W(dp)^-1 for a batch of parameter vectors."""
    if not first:
        return p - dp

    def mat(q):
        m = np.zeros(q.shape[:-1] + (3, 3))
        m[..., 0, 0] = 1 + q[..., 1]
        m[..., 0, 1] = q[..., 2]
        m[..., 0, 2] = q[..., 0]
        m[..., 1, 0] = q[..., 4]
        m[..., 1, 1] = 1 + q[..., 5]
        m[..., 1, 2] = q[..., 3]
        m[..., 2, 2] = 1.0
        return m

    m = mat(p) @ np.linalg.inv(mat(dp))
    return np.stack([m[..., 0, 2], m[..., 0, 0] - 1, m[..., 0, 1],
                     m[..., 1, 2], m[..., 1, 0], m[..., 1, 1] - 1], axis=-1)


def _icgn_chunk(template: np.ndarray, tgx: np.ndarray, tgy: np.ndarray, target: np.ndarray,
                py: np.ndarray, px: np.ndarray, p0: np.ndarray, config: SubsetConfig,
                min_overlap: float = 0.75):
    half = config.subset_size // 2
    th, tw = target.shape
    off = np.arange(-half, half + 1, dtype=np.float64)
    ddy, ddx = (a.ravel() for a in np.meshgrid(off, off, indexing="ij"))
    yy = py[:, None] + ddy.astype(np.intp)
    xx = px[:, None] + ddx.astype(np.intp)
    f = template[yy, xx]
    fx, fy = tgx[yy, xx], tgy[yy, xx]
    first = config.shape_order == "first"
    if first:
        sd = np.stack([fx, fx * ddx, fx * ddy, fy, fy * ddx, fy * ddy], axis=-1)
    else:
        sd = np.stack([fx, fy], axis=-1)
    npar = sd.shape[-1]
    n = len(px)
    hess_full = np.matmul(sd.transpose(0, 2, 1), sd)

    p = p0.copy()
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    diverged = np.zeros(n, dtype=bool)
    flat = np.zeros(n, dtype=bool)
    # update-norm weights: gradient terms are scaled by the subset half-width
    wts = np.array([1.0, half, half, 1.0, half, half]) if first else np.ones(2)
    for _ in range(config.max_gn_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        q = p[idx]
        if first:
            wx = px[idx, None] + ddx + q[:, 0:1] + q[:, 1:2] * ddx + q[:, 2:3] * ddy
            wy = py[idx, None] + ddy + q[:, 3:4] + q[:, 4:5] * ddx + q[:, 5:6] * ddy
        else:
            wx = px[idx, None] + ddx + q[:, 0:1]
            wy = py[idx, None] + ddy + q[:, 1:2]
        # reference pixels the warped subset does not reach are left out of the sums
        m = ((wx >= 0) & (wx <= tw - 1) & (wy >= 0) & (wy <= th - 1)).astype(np.float64)
        cnt = m.sum(axis=1)
        short = cnt < min_overlap * m.shape[1]
        cnt = np.maximum(cnt, 1.0)
        g = sample_points(target, wx, wy, config.scheme, "clamp")
        fi = f[idx]
        fc = (fi - (fi * m).sum(1, keepdims=True) / cnt[:, None]) * m
        gc = (g - (g * m).sum(1, keepdims=True) / cnt[:, None]) * m
        df = np.sqrt((fc * fc).sum(axis=1))
        dg = np.sqrt((gc * gc).sum(axis=1))
        sdi = sd[idx]
        hess = hess_full[idx]
        part = np.flatnonzero(cnt < m.shape[1])
        if part.size:
            sdp = sdi[part] * m[part, :, None]
            hess[part] = np.matmul(sdp.transpose(0, 2, 1), sdp)
        bad = (df < 1e-8) | (dg < 1e-8) | (np.abs(np.linalg.det(hess)) < 1e-300)
        flat[idx[bad & (df < 1e-8)]] = True
        hess[bad] = np.eye(npar)
        ratio = np.where(bad, 0.0, df / np.where(bad, 1.0, dg))
        e = fc - ratio[:, None] * gc
        # e is already zero where m is, so masking sd again is unnecessary
        b = np.matmul(e[:, None, :], sdi)[:, 0]
        dp = -np.linalg.solve(hess, b[..., None])[..., 0]
        p[idx] = _compose_inverse(q, dp, first)
        step = np.sqrt(((dp * wts) ** 2).sum(axis=1))
        moved = np.hypot(p[idx, 0] - p0[idx, 0], p[idx, 3 if first else 1] - p0[idx, 3 if first else 1])
        div = bad | short | ~np.isfinite(step) | (moved > config.search_radius + 1)
        diverged[idx[div]] = True
        done = (step < config.conv_tol) & ~div
        converged[idx[done]] = True
        active[idx[div | done]] = False
    return p, converged, diverged, flat


def subset_solve(ref: ScalarField, deformed: ScalarField, roi: RoiMask | None = None,
                 config: SubsetConfig = SubsetConfig(), return_stats: bool = False):
    """Per-point subset matching.

    Returns ``(displacement, valid)``; invalid points hold NaN.  A point is
    evaluated when its whole subset lies in the image and in the ROI; it is
    invalid if its subset is textureless or Gauss-Newton diverges.
    """
    check_same_shape(ref, deformed, roi)
    h, w = ref.shape
    half = edge_band(config)
    inside = roi.inside if roi is not None else np.ones((h, w), dtype=bool)
    full = _box_sums(inside.astype(np.float64), half) == config.subset_size**2
    grid = np.zeros((h, w), dtype=bool)
    grid[::config.step, ::config.step] = True
    cand = full & grid & inside
    py, px = np.nonzero(cand)

    tmpl = np.asarray(deformed.values, dtype=np.float64)
    tgt = np.asarray(ref.values, dtype=np.float64)
    tgy, tgx = np.gradient(tmpl)
    dx0, dy0, _ = integer_search(tmpl, tgt, py, px, half, config.search_radius)
    first = config.shape_order == "first"
    npar = 6 if first else 2
    p0 = np.zeros((len(px), npar))
    p0[:, 0] = dx0
    p0[:, 3 if first else 1] = dy0

    p = np.empty_like(p0)
    conv = np.zeros(len(px), dtype=bool)
    div = np.zeros(len(px), dtype=bool)
    flat = np.zeros(len(px), dtype=bool)
    chunk = max(64, 1_500_000 // config.subset_size**2)
    for s in range(0, len(px), chunk):
        sl = slice(s, s + chunk)
        p[sl], conv[sl], div[sl], flat[sl] = _icgn_chunk(
            tmpl, tgx, tgy, tgt, py[sl], px[sl], p0[sl], config)

    ok = ~(div | flat)
    u = np.full((h, w), np.nan)
    v = np.full((h, w), np.nan)
    # the matched reference point sits at x + p, so u(x) = -p
    u[py[ok], px[ok]] = -p[ok, 0]
    v[py[ok], px[ok]] = -p[ok, 3 if first else 1]
    valid = np.zeros((h, w), dtype=bool)
    valid[py[ok], px[ok]] = True
    result = (VectorField2(u, v), valid)
    if return_stats:
        stats = SubsetStats(len(px), int(conv.sum()), int((~conv & ok).sum()),
                            int(div.sum()), int(flat.sum()))
        return result + (stats,)
    return result
