"""Sequence array types and differentiable layer primitives.

Everything here operates on dense (T, channels) float arrays where T is the
frame index. The primitives (dilated 1-D convolution, 1x1 convolution, ReLU,
row softmax) are pure functions with hand-written backward passes; they are
the building blocks the multi-stage temporal model is assembled from.

All primitives preserve sequence length: dilated convolutions use symmetric
zero padding of (k-1)/2 * dilation frames per side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy a layer contract."""


def as_matrix(x, name: str = "input") -> np.ndarray:
    """Coerce to a 2-D float array, accepting the dataclass wrappers below."""
    data = getattr(x, "data", x)
    arr = np.asarray(data)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (T, channels), got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FeatureSequence:
    """Per-frame embedding matrix of shape (T, d)."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_matrix(self.data, "features")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ShapeError(f"features need T >= 1 and d >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("features contain non-finite entries")
        object.__setattr__(self, "data", arr)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ProbSequence:
    """Row-stochastic (T, C) matrix of per-frame class probabilities."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_matrix(self.data, "probabilities")
        validate_probs(arr)
        object.__setattr__(self, "data", arr)

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def num_classes(self) -> int:
        return self.data.shape[1]


def validate_probs(p: np.ndarray, tol: float = 1e-6) -> None:
    """Raise if rows are not probability vectors (entries in [0,1], sum 1)."""
    if np.any(p < -tol) or np.any(p > 1 + tol):
        raise ValueError("probabilities outside [0, 1]")
    row_sums = p.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > tol):
        worst = float(np.max(np.abs(row_sums - 1.0)))
        raise ValueError(f"probability rows must sum to 1 (worst deviation {worst:.3g})")


@dataclass
class LayerGrad:
    """Gradients produced by a primitive's backward pass.

    Shapes mirror the forward operands exactly; entries are None for
    primitives without the corresponding parameter.
    """

    d_input: np.ndarray
    d_weights: np.ndarray | None = None
    d_bias: np.ndarray | None = None


# ---------------------------------------------------------------------------
# dilated 1-D convolution
# ---------------------------------------------------------------------------

def _check_dconv_args(x, weights, bias, dilation):
    if weights.ndim != 3:
        raise ShapeError(f"kernel must be (Cout, Cin, k), got shape {weights.shape}")
    cout, cin, k = weights.shape
    if k % 2 != 1:
        raise ShapeError(f"kernel size must be odd, got k={k}")
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    return cout, cin, k


def dilated_conv1d(x, weights, bias, dilation: int) -> np.ndarray:
    """Same-length dilated 1-D convolution over the time axis.

    out[t, co] = bias[co] + sum_{ci,j} weights[co, ci, j] * x[t + (j - (k-1)/2) * dilation, ci]
    with zero padding outside [0, T).
    """
    x = as_matrix(x)
    weights = np.asarray(weights, dtype=x.dtype)
    bias = np.asarray(bias, dtype=x.dtype)
    cout, _, k = _check_dconv_args(x, weights, bias, int(dilation))
    dilation = int(dilation)
    t_len = x.shape[0]
    pad = (k - 1) // 2 * dilation
    xp = np.zeros((t_len + 2 * pad, x.shape[1]), dtype=x.dtype)
    xp[pad:pad + t_len] = x
    out = np.tile(bias, (t_len, 1))
    for j in range(k):
        out += xp[j * dilation:j * dilation + t_len] @ weights[:, :, j].T
    return out


def dilated_conv1d_backward(x, weights, dilation: int, grad_out) -> LayerGrad:
    """Analytic gradients of dilated_conv1d w.r.t. input, kernel and bias."""
    x = as_matrix(x)
    weights = np.asarray(weights, dtype=x.dtype)
    grad_out = np.asarray(grad_out, dtype=x.dtype)
    cout, cin, k = weights.shape
    dilation = int(dilation)
    t_len = x.shape[0]
    if grad_out.shape != (t_len, cout):
        raise ShapeError(f"upstream gradient must be ({t_len}, {cout}), got {grad_out.shape}")
    pad = (k - 1) // 2 * dilation
    xp = np.zeros((t_len + 2 * pad, cin), dtype=x.dtype)
    xp[pad:pad + t_len] = x
    d_w = np.empty_like(weights)
    d_xp = np.zeros_like(xp)
    for j in range(k):
        window = slice(j * dilation, j * dilation + t_len)
        d_w[:, :, j] = grad_out.T @ xp[window]
        d_xp[window] += grad_out @ weights[:, :, j]
    d_x = d_xp[pad:pad + t_len] if pad else d_xp
    return LayerGrad(d_input=d_x, d_weights=d_w, d_bias=grad_out.sum(axis=0))


# ---------------------------------------------------------------------------
# 1x1 convolution (per-frame affine map)
# ---------------------------------------------------------------------------

def conv1x1(x, weights, bias) -> np.ndarray:
    """Per-frame affine map: out[t] = weights @ x[t] + bias."""
    x = as_matrix(x)
    weights = np.asarray(weights, dtype=x.dtype)
    bias = np.asarray(bias, dtype=x.dtype)
    if weights.ndim != 2:
        raise ShapeError(f"1x1 weights must be (Cout, Cin), got shape {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias must have shape ({weights.shape[0]},), got {bias.shape}")
    return x @ weights.T + bias


def conv1x1_backward(x, weights, grad_out) -> LayerGrad:
    """Analytic gradients of conv1x1 w.r.t. input, weights and bias."""
    x = as_matrix(x)
    weights = np.asarray(weights, dtype=x.dtype)
    grad_out = np.asarray(grad_out, dtype=x.dtype)
    if grad_out.shape != (x.shape[0], weights.shape[0]):
        raise ShapeError(f"upstream gradient shape {grad_out.shape} does not match output")
    return LayerGrad(
        d_input=grad_out @ weights,
        d_weights=grad_out.T @ x,
        d_bias=grad_out.sum(axis=0),
    )


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(x, grad_out) -> LayerGrad:
    x = np.asarray(x)
    return LayerGrad(d_input=np.asarray(grad_out) * (x > 0))


# ---------------------------------------------------------------------------
# row softmax
# ---------------------------------------------------------------------------

def softmax_rows(logits) -> np.ndarray:
    """Numerically stable per-row softmax; rows of the result sum to 1."""
    z = as_matrix(logits, "logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite entries")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(probs, grad_out) -> LayerGrad:
    """Gradient w.r.t. logits given the softmax output and upstream dL/dprobs."""
    p = as_matrix(probs, "probabilities")
    g = np.asarray(grad_out, dtype=p.dtype)
    if g.shape != p.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match probs {p.shape}")
    inner = (g * p).sum(axis=1, keepdims=True)
    return LayerGrad(d_input=p * (g - inner))
