"""Network building blocks on top of the autodiff tensor.

Shapes follow the numpy row-major convention: images are ``(B, C, H, W)``
(a leading batch axis is optional everywhere), token sequences are
``(B, n, d)`` with one token per row, and linear weights are
``(in_features, out_features)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError
from .tensor import Array, Tensor, _accumulate


def _with_batch(x: Tensor, want_ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == want_ndim:
        return x, False
    if x.ndim == want_ndim - 1:
        return x.reshape((1,) + x.shape), True
    raise ShapeError(f"expected {want_ndim - 1}-D or {want_ndim}-D input, got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with zero padding of 1.

    ``x`` is ``(C_in, H, W)`` or ``(B, C_in, H, W)``; ``kernels`` is
    ``(C_out, C_in, 3, 3)``.  Stride 1 preserves ``H x W``; stride 2
    yields ``ceil(H/2) x ceil(W/2)``.
    """
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernels must be (C_out, C_in, 3, 3), got {kernels.shape}")
    xb, squeeze = _with_batch(x, 4)
    b, c_in, h, w = xb.shape
    c_out, c_k = kernels.shape[:2]
    if c_k != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, kernels expect {c_k}")
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d spatial dims must be >= 1, got {h}x{w}")

    xp = np.pad(xb.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("bchwij,ocij->bohw", win, kernels.data, optimize=True)
    h_out, w_out = out_data.shape[2:]

    def grad_fn(g: Array) -> None:
        if kernels.requires_grad:
            gk = np.einsum("bohw,bchwij->ocij", g, win, optimize=True)
            _accumulate(kernels, gk)
        if xb.requires_grad:
            gxp = np.zeros_like(xp)
            for di in range(3):
                for dj in range(3):
                    gxp[:, :, di:di + stride * h_out:stride,
                        dj:dj + stride * w_out:stride] += np.einsum(
                        "bohw,oc->bchw", g, kernels.data[:, :, di, dj], optimize=True)
            _accumulate(xb, gxp[:, :, 1:-1, 1:-1])

    out = Tensor._from_op(out_data, (xb, kernels), grad_fn, "conv2d")
    return out.reshape(out.shape[1:]) if squeeze else out


def pointwise_conv(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """1x1 convolution (channel mixing), optionally subsampling by ``stride``.

    Used for projection shortcuts where a residual path changes channel
    count or spatial size.  ``weight`` is ``(C_out, C_in)``.
    """
    if stride not in (1, 2):
        raise ShapeError(f"pointwise_conv stride must be 1 or 2, got {stride}")
    xb, squeeze = _with_batch(x, 4)
    c_out, c_in = weight.shape
    if c_in != xb.shape[1]:
        raise ShapeError(f"pointwise_conv channel mismatch: {xb.shape[1]} vs {c_in}")
    xs = xb.data[:, :, ::stride, ::stride]
    out_data = np.einsum("bchw,oc->bohw", xs, weight.data, optimize=True)

    def grad_fn(g: Array) -> None:
        if weight.requires_grad:
            _accumulate(weight, np.einsum("bohw,bchw->oc", g, xs, optimize=True))
        if xb.requires_grad:
            gx = np.zeros_like(xb.data)
            gx[:, :, ::stride, ::stride] = np.einsum("bohw,oc->bchw", g, weight.data,
                                                     optimize=True)
            _accumulate(xb, gx)

    out = Tensor._from_op(out_data, (xb, weight), grad_fn, "pointwise_conv")
    return out.reshape(out.shape[1:]) if squeeze else out


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer (eval-mode inputs)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def zeros(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), momentum, eps)

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.eps)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel batch normalization over ``(B, H, W)``.

    Training mode normalizes with batch statistics (population variance)
    and updates the running statistics in ``state`` by exponential moving
    average; eval mode normalizes with the running statistics.
    """
    xb, squeeze = _with_batch(x, 4)
    b, c, h, w = xb.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match {c} channels")
    eps = state.eps

    if training:
        if b * h * w < 2:
            raise ShapeError("batchnorm training mode needs at least 2 values per channel")
        mu = xb.data.mean(axis=(0, 2, 3))
        var = xb.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mu = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xb.data - mu[:, None, None]) * inv_std[:, None, None]
    out_data = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def grad_fn(g: Array) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if xb.requires_grad:
            gxhat = g * gamma.data[:, None, None]
            if training:
                n = b * h * w
                sum_g = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - sum_g / n - xhat * sum_gx / n) * inv_std[:, None, None]
            else:
                gx = gxhat * inv_std[:, None, None]
            _accumulate(xb, gx)

    out = Tensor._from_op(out_data, (xb, gamma, beta), grad_fn, "batchnorm2d")
    return out.reshape(out.shape[1:]) if squeeze else out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of ``x`` to zero mean and unit variance, then
    apply the per-feature affine ``gamma * xhat + beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gamma.data * xhat + beta.data

    def grad_fn(g: Array) -> None:
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gxhat = g * gamma.data
            sum_g = gxhat.mean(axis=-1, keepdims=True)
            sum_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (gxhat - sum_g - xhat * sum_gx) * inv_std)

    return Tensor._from_op(out_data, (x, gamma, beta), grad_fn, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    out = x.matmul(weight)
    if bias is not None:
        out = out + bias
    return out


@dataclass
class GRUWeights:
    """Weight set of one GRU layer: input maps ``w_*`` (D, H), recurrent maps
    ``u_*`` (H, H), and biases ``b_*`` (H,) for the update gate ``z``, reset
    gate ``r``, and candidate state ``c``."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in
                ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c")}


def gru_sequence(x_seq: Tensor, h0: Tensor, weights: GRUWeights) -> Tensor:
    """Run a GRU over a sequence and return all hidden states.

    ``x_seq`` is ``(T, D)`` or ``(B, T, D)``; ``h0`` is ``(H,)`` (broadcast
    over the batch).  Gates: ``z = sigmoid(x w_z + h u_z + b_z)``,
    ``r = sigmoid(x w_r + h u_r + b_r)``,
    ``c = tanh(x w_c + (r * h) u_c + b_c)``, and the next state blends as
    ``h' = (1 - z) * h + z * c``.
    """
    xb, squeeze = _with_batch(x_seq, 3)
    b, t_len, _ = xb.shape
    hidden = h0.shape[-1]
    if t_len < 1:
        raise ShapeError("gru_sequence needs at least one step")
    h = h0.reshape(1, hidden).expand((b, hidden))
    states = []
    for t in range(t_len):
        x_t = xb[:, t, :]
        z = (linear(x_t, weights.w_z, weights.b_z) + h.matmul(weights.u_z)).sigmoid()
        r = (linear(x_t, weights.w_r, weights.b_r) + h.matmul(weights.u_r)).sigmoid()
        c = (linear(x_t, weights.w_c, weights.b_c) + (r * h).matmul(weights.u_c)).tanh()
        h = (1.0 - z) * h + z * c
        if not np.isfinite(h.data).all():
            raise NumericError(f"gru_sequence produced a non-finite hidden state at step {t}")
        states.append(h)
    out = Tensor.stack(states, axis=1)
    return out.reshape(out.shape[1:]) if squeeze else out
