"""Plain 3D convolution and transposed convolution.

Two routes exist on purpose:

* ``conv3d_ref`` / ``conv3d_transpose_ref``: direct nested-loop
  implementations of the definition sums. Slow, obvious, and used as the
  correctness oracle for everything faster.
* ``conv3d_forward`` / ``conv3d_transpose_forward`` (+ backwards): the
  gathered im2col-style path used by the network code. Must agree with the
  reference route to float tolerance; the tests enforce that.

Convolution means cross-correlation (no kernel flip) with zero padding.
Weight layout is (C_out, C_in, K_t, K_h, K_w) for forward convolutions.
A transposed layer reuses the same layout with axis 0 = its input channels
and axis 1 = its output channels, so that with literally identical params
the two ops are adjoint: <conv(x), y> == <x, conv_transpose(y)>.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError
from .tensor import check_tensor5

Triple = tuple[int, int, int]


@dataclass
class Conv3dParams:
    """Weights and geometry for one (possibly transposed) 3D convolution."""

    weight: np.ndarray                 # (C_out, C_in, K_t, K_h, K_w); transposed: (C_in, C_out, ...)
    bias: np.ndarray                   # (output channels,)
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    transposed: bool = False
    output_padding: Triple = (0, 0, 0)  # used only when transposed

    def __post_init__(self):
        self.validate()

    @property
    def kernel(self) -> Triple:
        return tuple(self.weight.shape[2:])

    @property
    def in_channels(self) -> int:
        return self.weight.shape[0] if self.transposed else self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.transposed else self.weight.shape[0]

    def validate(self) -> None:
        if self.weight.ndim != 5:
            raise ShapeError(f"conv weight must be 5-D, got shape {self.weight.shape}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.out_channels:
            raise ShapeError(f"bias length {self.bias.shape} does not match "
                             f"{self.out_channels} output channels")
        if not self.transposed:
            for name, k in zip("THW", self.kernel):
                if k % 2 != 1:
                    raise ShapeError(f"kernel K_{name} must be odd for forward conv, got {k}")
        for name, s in zip("THW", self.stride):
            if s < 1:
                raise ShapeError(f"stride s_{name} must be >= 1, got {s}")
        if self.transposed:
            for name, (o, s) in zip("THW", zip(self.output_padding, self.stride)):
                if not 0 <= o < s:
                    raise ShapeError(f"output_padding o_{name}={o} must satisfy 0 <= o < stride={s}")


def conv_out_shape(size: int, k: int, s: int, p: int, axis: str = "?") -> int:
    out = (size + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeError(f"conv output along {axis} would be empty: "
                         f"size={size}, kernel={k}, stride={s}, pad={p}")
    return out


def conv_transpose_out_shape(size: int, k: int, s: int, p: int, op: int) -> int:
    return (size - 1) * s - 2 * p + k + op


def _check_input(x: np.ndarray, params: Conv3dParams, op: str) -> None:
    check_tensor5(x, op)
    if x.shape[1] != params.in_channels:
        raise ShapeError(f"{op}: input has C={x.shape[1]} channels, "
                         f"params expect C_in={params.in_channels}")


# --- reference route ------------------------------------------------------

def conv3d_ref(x: np.ndarray, params: Conv3dParams) -> np.ndarray:
    """Direct-loop cross-correlation; the oracle for all fast paths."""
    if params.transposed:
        raise ShapeError("conv3d_ref: params are transposed, use conv3d_transpose_ref")
    _check_input(x, params, "conv3d_ref")
    n_, c_in, t_in, h_in, w_in = x.shape
    kt, kh, kw = params.kernel
    st, sh, sw = params.stride
    pt, ph, pw = params.padding
    t_out = conv_out_shape(t_in, kt, st, pt, "T")
    h_out = conv_out_shape(h_in, kh, sh, ph, "H")
    w_out = conv_out_shape(w_in, kw, sw, pw, "W")
    weight = params.weight
    y = np.zeros((n_, params.out_channels, t_out, h_out, w_out), dtype=x.dtype)
    for n in range(n_):
        for co in range(params.out_channels):
            for ot in range(t_out):
                for oh in range(h_out):
                    for ow in range(w_out):
                        acc = params.bias[co]
                        for jt in range(kt):
                            it = ot * st - pt + jt
                            if not 0 <= it < t_in:
                                continue
                            for jh in range(kh):
                                ih = oh * sh - ph + jh
                                if not 0 <= ih < h_in:
                                    continue
                                for jw in range(kw):
                                    iw = ow * sw - pw + jw
                                    if not 0 <= iw < w_in:
                                        continue
                                    acc = acc + np.dot(weight[co, :, jt, jh, jw], x[n, :, it, ih, iw])
                        y[n, co, ot, oh, ow] = acc
    return y


def conv3d_transpose_ref(x: np.ndarray, params: Conv3dParams) -> np.ndarray:
    """Direct-loop scatter ("deconvolution"); adjoint of conv3d_ref."""
    if not params.transposed:
        raise ShapeError("conv3d_transpose_ref: params.transposed must be true")
    _check_input(x, params, "conv3d_transpose_ref")
    n_, c_in, t_in, h_in, w_in = x.shape
    kt, kh, kw = params.kernel
    st, sh, sw = params.stride
    pt, ph, pw = params.padding
    ot_, oh_, ow_ = (conv_transpose_out_shape(s, k, st_, p, op)
                     for s, k, st_, p, op in zip((t_in, h_in, w_in), (kt, kh, kw),
                                                 (st, sh, sw), (pt, ph, pw),
                                                 params.output_padding))
    for name, o in zip("THW", (ot_, oh_, ow_)):
        if o < 1:
            raise ShapeError(f"transposed conv output along {name} would be empty ({o})")
    weight = params.weight
    y = np.zeros((n_, params.out_channels, ot_, oh_, ow_), dtype=x.dtype)
    for n in range(n_):
        for ci in range(c_in):
            for t in range(t_in):
                for h in range(h_in):
                    for w in range(w_in):
                        v = x[n, ci, t, h, w]
                        for jt in range(kt):
                            ot = t * st - pt + jt
                            if not 0 <= ot < ot_:
                                continue
                            for jh in range(kh):
                                oh = h * sh - ph + jh
                                if not 0 <= oh < oh_:
                                    continue
                                for jw in range(kw):
                                    ow = w * sw - pw + jw
                                    if not 0 <= ow < ow_:
                                        continue
                                    y[n, :, ot, oh, ow] += weight[ci, :, jt, jh, jw] * v
    y += params.bias[None, :, None, None, None].astype(y.dtype)
    return y


# --- gathered (im2col) route ----------------------------------------------

def _im2col(xp: np.ndarray, kernel: Triple, stride: Triple, out_shape: Triple) -> np.ndarray:
    """Strided view (N, C, Kt, Kh, Kw, To, Ho, Wo) over the padded input."""
    n_, c_ = xp.shape[:2]
    sn, sc, st_, sh_, sw_ = xp.strides
    st, sh, sw = stride
    shape = (n_, c_) + tuple(kernel) + tuple(out_shape)
    strides = (sn, sc, st_, sh_, sw_, st_ * st, sh_ * sh, sw_ * sw)
    return as_strided(xp, shape=shape, strides=strides)


def _pad(x: np.ndarray, padding: Triple) -> np.ndarray:
    pt, ph, pw = padding
    if pt == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def conv3d_forward(x: np.ndarray, params: Conv3dParams):
    """Fast forward; returns (y, ctx) where ctx feeds conv3d_backward."""
    if params.transposed:
        raise ShapeError("conv3d_forward: params are transposed")
    _check_input(x, params, "conv3d")
    out_shape = tuple(conv_out_shape(s, k, st, p, ax)
                      for s, k, st, p, ax in zip(x.shape[2:], params.kernel,
                                                 params.stride, params.padding, "THW"))
    xp = _pad(x, params.padding)
    patches = _im2col(xp, params.kernel, params.stride, out_shape)
    y = np.tensordot(params.weight, patches, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4))
    y += params.bias[None, :, None, None, None].astype(y.dtype)
    ctx = (x.shape, xp, params, out_shape)
    return y, ctx


def conv3d_backward(ctx, grad_y: np.ndarray):
    """Gradients of conv3d_forward: (grad_x, grad_w, grad_b)."""
    x_shape, xp, params, out_shape = ctx
    patches = _im2col(xp, params.kernel, params.stride, out_shape)
    grad_w = np.tensordot(grad_y, patches, axes=([0, 2, 3, 4], [0, 5, 6, 7]))
    grad_b = grad_y.sum(axis=(0, 2, 3, 4))
    # Scatter w^T @ grad_y back onto the padded grid, one kernel tap at a time;
    # taps hit disjoint strided slices so plain += is race-free.
    cols = np.tensordot(params.weight, grad_y, axes=([0], [1]))  # (C, Kt, Kh, Kw, N, To, Ho, Wo)
    gxp = np.zeros_like(xp)
    st, sh, sw = params.stride
    to, ho, wo = out_shape
    for jt in range(params.kernel[0]):
        for jh in range(params.kernel[1]):
            for jw in range(params.kernel[2]):
                gxp[:, :, jt:jt + st * to:st, jh:jh + sh * ho:sh, jw:jw + sw * wo:sw] += \
                    cols[:, jt, jh, jw].transpose(1, 0, 2, 3, 4)
    pt, ph, pw = params.padding
    t_in, h_in, w_in = x_shape[2:]
    grad_x = gxp[:, :, pt:pt + t_in, ph:ph + h_in, pw:pw + w_in]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv3d_transpose_forward(x: np.ndarray, params: Conv3dParams):
    """Fast transposed-conv forward; returns (y, ctx)."""
    if not params.transposed:
        raise ShapeError("conv3d_transpose_forward: params.transposed must be true")
    _check_input(x, params, "conv3d_transpose")
    n_, c_in, t_in, h_in, w_in = x.shape
    kt, kh, kw = params.kernel
    st, sh, sw = params.stride
    pt, ph, pw = params.padding
    out_shape = tuple(conv_transpose_out_shape(s, k, st_, p, op)
                      for s, k, st_, p, op in zip((t_in, h_in, w_in), (kt, kh, kw),
                                                  (st, sh, sw), (pt, ph, pw),
                                                  params.output_padding))
    for name, o in zip("THW", out_shape):
        if o < 1:
            raise ShapeError(f"transposed conv output along {name} would be empty ({o})")
    full = ((t_in - 1) * st + kt, (h_in - 1) * sh + kh, (w_in - 1) * sw + kw)
    ext = tuple(max(f, p + o) for f, p, o in zip(full, (pt, ph, pw), out_shape))
    ypad = np.zeros((n_, params.out_channels) + ext, dtype=x.dtype)
    cols = np.tensordot(params.weight, x, axes=([0], [1]))  # (Co, Kt, Kh, Kw, N, T, H, W)
    for jt in range(kt):
        for jh in range(kh):
            for jw in range(kw):
                ypad[:, :, jt:jt + st * t_in:st, jh:jh + sh * h_in:sh, jw:jw + sw * w_in:sw] += \
                    cols[:, jt, jh, jw].transpose(1, 0, 2, 3, 4)
    y = np.ascontiguousarray(ypad[:, :, pt:pt + out_shape[0], ph:ph + out_shape[1], pw:pw + out_shape[2]])
    y += params.bias[None, :, None, None, None].astype(y.dtype)
    ctx = (x, params, out_shape)
    return y, ctx


def conv3d_transpose_backward(ctx, grad_y: np.ndarray):
    """Gradients of conv3d_transpose_forward: (grad_x, grad_w, grad_b)."""
    x, params, out_shape = ctx
    # Input gradient: gather from grad_y exactly like a forward conv whose
    # weight is the stored (C_in, C_out, ...) array.
    gyp = _pad(grad_y, params.padding)
    in_shape = x.shape[2:]
    patches = _im2col(gyp, params.kernel, params.stride, in_shape)
    grad_x = np.tensordot(params.weight, patches, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    grad_x = np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3, 4))
    grad_w = np.tensordot(x, patches, axes=([0, 2, 3, 4], [0, 5, 6, 7]))
    grad_b = grad_y.sum(axis=(0, 2, 3, 4))
    return grad_x, grad_w, grad_b
