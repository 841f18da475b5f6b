"""Synthetic speckle benchmarks with known displacement.

Deformed images use the same pull convention as the solver warp,
``I_def(x) = I_ref(x - u(x))``, so simulate -> solve is a consistent round trip.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Union

import numpy as np

from .grid import ScalarField, VectorField2
from .interp import BICUBIC, OutOfBoundsError, SampleScheme, sample_points

# independent RNG streams derived from one user seed
_STREAM_SPECKLE = 1
_STREAM_NOISE_REF = 2
_STREAM_NOISE_DEF = 3


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class SpeckleConfig:
    width: int = 256
    height: int = 256
    num_speckles: int = 4000
    radius: float = 2.0
    peak: float = 60.0
    background: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("speckle image dimensions must be >= 1")
        if not self.radius > 0:
            raise ValueError("speckle radius must be > 0")
        if not 0 <= self.background <= self.peak <= 255:
            raise ValueError("need 0 <= background <= peak <= 255")
        if self.num_speckles < 0:
            raise ValueError("num_speckles must be >= 0")


# (speckles per 256x256 image, Gaussian spot std in pixels); six patterns of
# differing size and density standing in for the six unpublished ones.  Presets
# use a high spot peak so sparse patterns keep their contrast.
PRESETS: dict[str, tuple[int, float]] = {
    "fine_dense": (4500, 1.2),
    "fine_sparse": (2500, 1.2),
    "medium_dense": (2600, 1.6),
    "medium_sparse": (1500, 1.6),
    "coarse_dense": (1500, 2.2),
    "coarse_sparse": (900, 2.2),
}

PRESET_PEAK = 200.0


def speckle_preset(name: str, width: int = 256, height: int = 256, seed: int = 0) -> SpeckleConfig:
    """A named preset with the speckle count scaled to the image area."""
    count, radius = PRESETS[name]
    n = int(round(count * width * height / 65536))
    return SpeckleConfig(width, height, n, radius, peak=PRESET_PEAK, seed=seed)


def _rng(seed, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), stream]))


def gen_speckle(config: SpeckleConfig) -> ScalarField:
    """Sum of Gaussian spots on a flat background, clipped to [0, 255]."""
    w, h = config.width, config.height
    rng = _rng(config.seed, _STREAM_SPECKLE)
    cx = rng.uniform(0, w, config.num_speckles)
    cy = rng.uniform(0, h, config.num_speckles)
    img = np.zeros(h * w)
    # spots are truncated at 6 std, where exp(-18) is below 1e-7 gray
    half = int(math.ceil(6 * config.radius))
    off = np.arange(-half, half + 1)
    two_r2 = 2.0 * config.radius**2
    chunk = 2048
    for s in range(0, config.num_speckles, chunk):
        px = np.floor(cx[s:s + chunk])[:, None] + off
        py = np.floor(cy[s:s + chunk])[:, None] + off
        ex = np.exp(-((px - cx[s:s + chunk, None]) ** 2) / two_r2)
        ey = np.exp(-((py - cy[s:s + chunk, None]) ** 2) / two_r2)
        okx = (px >= 0) & (px < w)
        oky = (py >= 0) & (py < h)
        wts = (ey * oky)[:, :, None] * (ex * okx)[:, None, :]
        idx = np.clip(py, 0, h - 1).astype(np.intp)[:, :, None] * w + \
            np.clip(px, 0, w - 1).astype(np.intp)[:, None, :]
        img += np.bincount(idx.ravel(), weights=wts.ravel(), minlength=h * w)
    img = config.background + config.peak * img.reshape(h, w)
    return ScalarField(np.clip(img, 0.0, 255.0))


# -- displacement fields -------------------------------------------------------

@dataclass(frozen=True)
class Rigid:
    u0: float = 0.0
    v0: float = 0.2


@dataclass(frozen=True)
class Linear:
    """u ramps along x from u_lo (left column) to u_hi (right column); v along y."""
    u_lo: float = -1.0
    u_hi: float = 1.0
    v_lo: float = -1.0
    v_hi: float = 1.0


@dataclass(frozen=True)
class Star:
    """u = 0, v = cos(2 pi (y - H/2) / A(x)) with A(x) = p_min + x (p_max - p_min) / W."""
    p_min: float = 10.0
    p_max: float = 120.0

    def __post_init__(self):
        if not 0 < self.p_min < self.p_max:
            raise ValueError("star field needs 0 < p_min < p_max")

    def period(self, x, width: int):
        return self.p_min + np.asarray(x, dtype=np.float64) * (self.p_max - self.p_min) / width


FieldSpec = Union[Rigid, Linear, Star]


def eval_field(spec: FieldSpec, width: int, height: int) -> VectorField2:
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    if isinstance(spec, Rigid):
        return VectorField2(np.full((height, width), spec.u0), np.full((height, width), spec.v0))
    if isinstance(spec, Linear):
        fx = x / (width - 1) if width > 1 else np.zeros_like(x)
        fy = y / (height - 1) if height > 1 else np.zeros_like(y)
        return VectorField2(spec.u_lo + (spec.u_hi - spec.u_lo) * fx,
                            spec.v_lo + (spec.v_hi - spec.v_lo) * fy)
    if isinstance(spec, Star):
        a = spec.period(x, width)
        return VectorField2(np.zeros_like(x), np.cos(2 * np.pi * (y - height / 2) / a))
    raise TypeError(f"unknown field spec {spec!r}")


def star_dv_dy(spec: Star, width: int, height: int) -> np.ndarray:
    """Analytic d v / d y of the star field."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    a = spec.period(x, width)
    return -(2 * np.pi / a) * np.sin(2 * np.pi * (y - height / 2) / a)


def field_manifest(spec: FieldSpec) -> dict:
    return {"field": type(spec).__name__.lower(), **asdict(spec)}


# -- image synthesis -------------------------------------------------------------

def synthesize_deformed(ref: ScalarField, truth: VectorField2, scheme: SampleScheme = BICUBIC,
                        margin: int = 0) -> ScalarField:
    """``I_def(x) = ref(x + margin - u(x))``.

    ``ref`` may be a canvas padded by ``margin`` pixels on every side of the
    output frame; samples must stay inside it.
    """
    h, w = truth.shape
    if ref.shape != (h + 2 * margin, w + 2 * margin):
        raise GenerationError(
            f"reference canvas {ref.width}x{ref.height} does not match a "
            f"{w}x{h} field padded by {margin}")
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    try:
        vals = sample_points(ref.values, x + margin - truth.u, y + margin - truth.v,
                             scheme, border="error")
    except OutOfBoundsError as exc:
        raise GenerationError(
            f"{exc}; the displacement leaves the reference canvas, enlarge the margin") from None
    return ScalarField(vals)


def add_noise(img: ScalarField, sigma: float, seed) -> ScalarField:
    """Add i.i.d. N(0, sigma^2) noise; values are not clamped."""
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if sigma == 0:
        return img
    rng = np.random.default_rng(seed)
    return ScalarField(img.values + rng.normal(0.0, sigma, img.shape))


@dataclass
class Benchmark:
    ref: ScalarField
    deformed: ScalarField
    truth: VectorField2
    manifest: dict


def make_pair(speckle: SpeckleConfig, spec: FieldSpec, noise_sigma: float = 0.0,
              scheme: SampleScheme = BICUBIC) -> Benchmark:
    """Reference/deformed pair with known truth.

    The speckle canvas is padded so every pull ``x - u(x)`` stays on real
    speckle; the reference is the central crop.  Noise draws for the two images
    are independent streams of ``speckle.seed``.
    """
    w, h = speckle.width, speckle.height
    truth = eval_field(spec, w, h)
    reach = float(max(np.abs(truth.u).max(), np.abs(truth.v).max()))
    margin = int(math.ceil(reach)) + 3
    pad_cfg = replace(speckle, width=w + 2 * margin, height=h + 2 * margin,
                      num_speckles=int(round(speckle.num_speckles * (w + 2 * margin) * (h + 2 * margin) / (w * h))))
    canvas = gen_speckle(pad_cfg)
    ref = ScalarField(canvas.values[margin:margin + h, margin:margin + w])
    deformed = synthesize_deformed(canvas, truth, scheme, margin)
    ref = add_noise(ref, noise_sigma, np.random.SeedSequence([speckle.seed, _STREAM_NOISE_REF]))
    deformed = add_noise(deformed, noise_sigma, np.random.SeedSequence([speckle.seed, _STREAM_NOISE_DEF]))
    manifest = {
        **{f"speckle.{k}": v for k, v in asdict(speckle).items()},
        **{f"field.{k}": v for k, v in field_manifest(spec).items()},
        "noise_sigma": noise_sigma,
        "noise_draws": "independent (ref stream 2, deformed stream 3 of the seed)",
        "scheme": scheme.kind,
        "bicubic_a": scheme.a,
        "canvas_margin": margin,
    }
    return Benchmark(ref, deformed, truth, manifest)
