"""Coordinate-input fully connected network with adaptive tanh activations.

Hidden layer ``l`` computes ``tanh(a_l * (h @ W_l + b_l))`` with one trainable
slope ``a_l`` per layer; the output layer is affine and scaled by
``output_scale`` so outputs are displacements in pixels.

Flat parameter layout (``MlpParams.theta``), for layers ``0..hidden_layers``
(the last one is the output layer)::

    W_0 (fan_in x fan_out, row-major), b_0, W_1, b_1, ..., W_h, b_h, a_0..a_{h-1}

``W_l[i, j]`` is the weight from input neuron ``i`` to output neuron ``j``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    hidden_layers: int = 4
    hidden_width: int = 50
    activation: Literal["adaptive_tanh", "tanh"] = "adaptive_tanh"
    output_scale: float = 10.0
    coord_normalization: Literal["unit_square"] = "unit_square"
    seed: int = 0
    # float32 trades the last digits of the gradient for ~3x throughput on CPU
    precision: Literal["float64", "float32"] = "float64"
    n_in: int = 2
    n_out: int = 2

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ValueError("hidden_layers and hidden_width must be >= 1")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be > 0")
        if self.activation not in ("adaptive_tanh", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"unknown precision {self.precision!r}")

    def layer_sizes(self) -> list[int]:
        return [self.n_in] + [self.hidden_width] * self.hidden_layers + [self.n_out]


def weight_bias_count(hidden_layers: int, width: int, n_in: int = 2, n_out: int = 2) -> int:
    return ((n_in * width + width)
            + (hidden_layers - 1) * (width * width + width)
            + (width * n_out + n_out))


def param_count(hidden_layers: int, width: int, n_in: int = 2, n_out: int = 2) -> int:
    """Weights + biases + one adaptive slope per hidden layer."""
    return weight_bias_count(hidden_layers, width, n_in, n_out) + hidden_layers


@dataclass(frozen=True, eq=False)
class MlpParams:
    config: MlpConfig
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        n = param_count(self.config.hidden_layers, self.config.hidden_width,
                        self.config.n_in, self.config.n_out)
        if theta.shape != (n,):
            raise ValueError(f"expected {n} parameters, got shape {theta.shape}")
        object.__setattr__(self, "theta", theta)

    def layers(self, theta: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into ``theta`` for every layer, output layer last."""
        theta = self.theta if theta is None else theta
        sizes = self.config.layer_sizes()
        out, pos = [], 0
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            W = theta[pos:pos + fi * fo].reshape(fi, fo)
            pos += fi * fo
            b = theta[pos:pos + fo]
            pos += fo
            out.append((W, b))
        return out

    def slopes(self, theta: np.ndarray | None = None) -> np.ndarray:
        theta = self.theta if theta is None else theta
        return theta[theta.shape[0] - self.config.hidden_layers:]

    def with_theta(self, theta: np.ndarray) -> "MlpParams":
        return MlpParams(self.config, np.array(theta, dtype=np.float64))


def flatten(layers: list[tuple[np.ndarray, np.ndarray]], slopes) -> np.ndarray:
    parts = []
    for W, b in layers:
        parts += [np.ravel(W), np.ravel(b)]
    parts.append(np.ravel(slopes))
    return np.concatenate(parts).astype(np.float64)


def init(config: MlpConfig) -> MlpParams:
    """Glorot-uniform weights, zero biases, unit slopes; a pure function of ``config.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    sizes = config.layer_sizes()
    layers = []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fi + fo))
        layers.append((rng.uniform(-lim, lim, size=(fi, fo)), np.zeros(fo)))
    return MlpParams(config, flatten(layers, np.ones(config.hidden_layers)))


def _check_finite(params: MlpParams) -> None:
    if np.all(np.isfinite(params.theta)):
        return
    for l, (W, b) in enumerate(params.layers()):
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NumericalError(f"non-finite weights or biases in layer {l}")
    raise NumericalError("non-finite adaptive slope")


def _slope_values(params: MlpParams) -> np.ndarray:
    if params.config.activation == "tanh":
        return np.ones(params.config.hidden_layers)
    return params.slopes()


def _dtype(params: MlpParams):
    return np.float32 if params.config.precision == "float32" else np.float64


@dataclass
class Tape:
    """Activations kept from a forward pass for the backward pass."""
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    act: list[np.ndarray]


def forward(params: MlpParams, coords: np.ndarray, keep: bool = False):
    """Evaluate the network on an (N, 2) batch of normalized coordinates.

    Returns (N, 2) displacements in pixels, plus a ``Tape`` when ``keep``.
    """
    _check_finite(params)
    dt = _dtype(params)
    h = np.asarray(coords, dtype=dt)
    layers = params.layers()
    slopes = _slope_values(params)
    tape = Tape([], [], []) if keep else None
    for l, (W, b) in enumerate(layers[:-1]):
        z = h @ W.astype(dt)
        z += b.astype(dt)
        t = np.tanh(z * dt(slopes[l]))
        if keep:
            tape.inputs.append(h)
            tape.pre.append(z)
            tape.act.append(t)
        h = t
    Wo, bo = layers[-1]
    out = (h @ Wo.astype(dt) + bo.astype(dt)) * dt(params.config.output_scale)
    if keep:
        tape.inputs.append(h)
    out = out.astype(np.float64)
    return (out, tape) if keep else out


def backward(params: MlpParams, coords: np.ndarray, cotangent: np.ndarray,
             tape: Tape | None = None) -> np.ndarray:
    """Gradient of ``sum(cotangent * forward(params, coords))`` w.r.t. ``theta``."""
    if tape is None:
        _, tape = forward(params, coords, keep=True)
    dt = _dtype(params)
    cfg = params.config
    layers = params.layers()
    slopes = _slope_values(params)
    grads = [None] * len(layers)
    dslope = np.zeros(cfg.hidden_layers)

    g = np.asarray(cotangent, dtype=dt) * dt(cfg.output_scale)
    Wo, _ = layers[-1]
    grads[-1] = (tape.inputs[-1].T @ g, g.sum(axis=0))
    gh = g @ Wo.T.astype(dt)
    for l in range(cfg.hidden_layers - 1, -1, -1):
        t = tape.act[l]
        ds = gh * (1.0 - t * t)
        if cfg.activation == "adaptive_tanh":
            dslope[l] = float(np.einsum("ij,ij->", ds, tape.pre[l], dtype=np.float64))
        gz = ds * dt(slopes[l])
        grads[l] = (tape.inputs[l].T @ gz, gz.sum(axis=0))
        if l > 0:
            gh = gz @ layers[l][0].T.astype(dt)
    return flatten(grads, dslope)


def input_jacobian(params: MlpParams, coords: np.ndarray) -> np.ndarray:
    """d(u, v)/d(x_norm, y_norm) by forward-mode chain rule.

    ``coords`` may be a single 2-vector (returns 2x2) or an (N, 2) batch
    (returns (N, 2, 2)); ``J[..., i, j] = d out_i / d coord_j``.
    """
    _check_finite(params)
    coords = np.asarray(coords, dtype=np.float64)
    single = coords.ndim == 1
    h = np.atleast_2d(coords)
    n = h.shape[0]
    # dh[n, j, k] = d h_k / d coord_j
    dh = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    slopes = _slope_values(params)
    layers = params.layers()
    for l, (W, b) in enumerate(layers[:-1]):
        z = h @ W + b
        t = np.tanh(slopes[l] * z)
        dz = dh @ W
        dh = dz * (slopes[l] * (1.0 - t * t))[:, None, :]
        h = t
    Wo, _ = layers[-1]
    J = np.swapaxes(dh @ Wo, 1, 2) * params.config.output_scale
    return J[0] if single else J


# -- normalization -----------------------------------------------------------

def normalize_coords(xs, ys, width: int, height: int) -> np.ndarray:
    """Map pixel coordinates affinely onto [-1, 1]^2 over the full image rectangle."""
    sx = 2.0 / (width - 1) if width > 1 else 0.0
    sy = 2.0 / (height - 1) if height > 1 else 0.0
    return np.stack([np.asarray(xs, dtype=np.float64) * sx - (1.0 if width > 1 else 0.0),
                     np.asarray(ys, dtype=np.float64) * sy - (1.0 if height > 1 else 0.0)], axis=-1)


def normalization_scale(width: int, height: int) -> tuple[float, float]:
    """d x_norm / d x_pixel and d y_norm / d y_pixel."""
    return (2.0 / (width - 1) if width > 1 else 0.0,
            2.0 / (height - 1) if height > 1 else 0.0)


# -- checkpoint ----------------------------------------------------------------

_DICP_HEADER = struct.Struct("<4sHIIBBdQIIQ")
_ACTIVATIONS = ["adaptive_tanh", "tanh"]


def save_params(params: MlpParams, path, chart: tuple[int, int] = (0, 0)) -> None:
    """Write a DICP checkpoint.  ``chart`` is the (width, height) of the normalizing image."""
    cfg = params.config
    head = _DICP_HEADER.pack(b"DICP", 1, cfg.hidden_layers, cfg.hidden_width,
                             _ACTIVATIONS.index(cfg.activation), 0, cfg.output_scale,
                             cfg.seed & (2**64 - 1), chart[0], chart[1], params.theta.size)
    Path(path).write_bytes(head + params.theta.astype("<f8").tobytes())


def load_params(path) -> tuple[MlpParams, tuple[int, int]]:
    from .grid import FormatError

    data = Path(path).read_bytes()
    if len(data) < _DICP_HEADER.size:
        raise FormatError("truncated DICP header", len(data))
    magic, ver, hl, hw, act, norm, scale, seed, cw, ch, n = _DICP_HEADER.unpack_from(data)
    if magic != b"DICP":
        raise FormatError("bad DICP magic", 0)
    if ver != 1:
        raise FormatError(f"unsupported DICP version {ver}", 4)
    if len(data) < _DICP_HEADER.size + 8 * n:
        raise FormatError("truncated DICP parameter vector", len(data))
    theta = np.frombuffer(data, dtype="<f8", count=n, offset=_DICP_HEADER.size).astype(np.float64)
    cfg = MlpConfig(hidden_layers=hl, hidden_width=hw, activation=_ACTIVATIONS[act],
                    output_scale=scale, seed=seed)
    return MlpParams(cfg, theta), (cw, ch)


def with_precision(params: MlpParams, precision: str) -> MlpParams:
    return MlpParams(replace(params.config, precision=precision), params.theta)
