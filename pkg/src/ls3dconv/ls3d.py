"""Learnable-sampling 3D convolution.

Each of the K_t*K_h*K_w kernel taps samples its input frame at a learned
fractional 2D displacement (bilinear interpolation, zero outside the
frame) and is weighted by a learned importance scalar in [0, 1]. With
offsets == 0 and masks == 1 the operator reduces exactly to the plain 3D
convolution, which is the oracle test for this whole module.

For an output location p, tap n in frame t+tau:

    y_t(p) = sum_tau sum_n m^n_{t+tau} * w_tau(p^n) * x_{t+tau}(p + p^n + dp^n_{t+tau})

Offsets and masks are shared across output channels. The main kernel here
is always stride 1 with centered padding, so the offset/mask fields live
on the same (T, H, W) grid as the input.

Forward and backward are written by hand; `ls3d_backward` is exact
reverse-mode differentiation of the sum above (product rule for masks,
bilinear kernel derivative for offsets, bilinear scatter for the input).
"""

from __future__ import annotations

import numpy as np

from .conv3d import Conv3dParams, conv3d_backward, conv3d_forward
from .errors import NumericError, ShapeError
from .tensor import check_tensor5, sigmoid

__all__ = [
    "bilinear_sample", "bilinear_backward",
    "ls3d_forward", "ls3d_backward",
    "num_taps", "tap_offsets", "Ls3dConv",
]


def num_taps(kernel) -> int:
    kt, kh, kw = kernel
    return kt * kh * kw


def tap_offsets(kernel):
    """Yield (linear, tau, p_row, p_col) for each tap of an odd kernel."""
    kt, kh, kw = kernel
    k = 0
    for jt in range(kt):
        for jh in range(kh):
            for jw in range(kw):
                yield k, jt - kt // 2, jh - kh // 2, jw - kw // 2
                k += 1


# --- scalar bilinear kernel (reference form) -------------------------------

def bilinear_sample(frame: np.ndarray, point) -> float:
    """Sample one 2-D frame at a fractional (row, col); zero outside."""
    h, w = frame.shape
    r, c = point
    r0, c0 = int(np.floor(r)), int(np.floor(c))
    dr, dc = r - r0, c - c0

    def at(i, j):
        return frame[i, j] if 0 <= i < h and 0 <= j < w else 0.0

    return ((1 - dr) * (1 - dc) * at(r0, c0) + (1 - dr) * dc * at(r0, c0 + 1)
            + dr * (1 - dc) * at(r0 + 1, c0) + dr * dc * at(r0 + 1, c0 + 1))


def bilinear_backward(frame: np.ndarray, point, upstream: float):
    """Gradients of bilinear_sample wrt the frame cells and the point.

    The floor-based form gives the right-sided derivative at integer
    coordinates. Returns (grad_frame, (d_row, d_col)).
    """
    h, w = frame.shape
    r, c = point
    r0, c0 = int(np.floor(r)), int(np.floor(c))
    dr, dc = r - r0, c - c0
    grad_frame = np.zeros_like(frame)
    vals = {}
    for (i, j), wt in (((r0, c0), (1 - dr) * (1 - dc)), ((r0, c0 + 1), (1 - dr) * dc),
                       ((r0 + 1, c0), dr * (1 - dc)), ((r0 + 1, c0 + 1), dr * dc)):
        inside = 0 <= i < h and 0 <= j < w
        vals[(i - r0, j - c0)] = frame[i, j] if inside else 0.0
        if inside:
            grad_frame[i, j] += upstream * wt
    d_row = upstream * ((1 - dc) * (vals[(1, 0)] - vals[(0, 0)]) + dc * (vals[(1, 1)] - vals[(0, 1)]))
    d_col = upstream * ((1 - dr) * (vals[(0, 1)] - vals[(0, 0)]) + dr * (vals[(1, 1)] - vals[(1, 0)]))
    return grad_frame, (d_row, d_col)


# --- vectorized field sampling ---------------------------------------------

def _shift_t(x: np.ndarray, tau: int) -> np.ndarray:
    """Temporal shift with zero fill: out[..., t, :, :] = x[..., t+tau, :, :]."""
    if tau == 0:
        return x
    out = np.zeros_like(x)
    if tau > 0:
        out[:, :, :-tau] = x[:, :, tau:]
    else:
        out[:, :, -tau:] = x[:, :, :tau]
    return out


def _unshift_add(grad_x: np.ndarray, g_shifted: np.ndarray, tau: int) -> None:
    """Adjoint of _shift_t: accumulate into grad_x in place."""
    if tau == 0:
        grad_x += g_shifted
    elif tau > 0:
        grad_x[:, :, tau:] += g_shifted[:, :, :-tau]
    else:
        grad_x[:, :, :tau] += g_shifted[:, :, -tau:]


def _neighbor_indices(rows: np.ndarray, cols: np.ndarray, h: int, w: int):
    """Floor corners, fractional parts, and per-neighbor (lin, valid) stacks.

    rows/cols: (N, T, P). Returns r0c-style linear indices concatenated as
    (N, T, 4P) in neighbor order 00, 01, 10, 11, plus matching validity and
    the bilinear weights.
    """
    r0 = np.floor(rows)
    c0 = np.floor(cols)
    dr = rows - r0
    dc = cols - c0
    r0 = r0.astype(np.int64)
    c0 = c0.astype(np.int64)
    r1 = r0 + 1
    c1 = c0 + 1

    def lin_valid(r, c):
        valid = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        lin = np.clip(r, 0, h - 1) * w + np.clip(c, 0, w - 1)
        return lin, valid

    lins, valids = zip(lin_valid(r0, c0), lin_valid(r0, c1), lin_valid(r1, c0), lin_valid(r1, c1))
    weights = ((1 - dr) * (1 - dc), (1 - dr) * dc, dr * (1 - dc), dr * dc)
    return np.concatenate(lins, axis=-1), np.concatenate(valids, axis=-1), weights, (dr, dc)


class _TapState:
    __slots__ = ("lin4", "valid4", "weights", "frac", "sampled", "neighbor_vals")

    def __init__(self, lin4, valid4, weights, frac, sampled, neighbor_vals):
        self.lin4 = lin4
        self.valid4 = valid4
        self.weights = weights
        self.frac = frac
        self.sampled = sampled
        self.neighbor_vals = neighbor_vals


def _sample_tap(shifted: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> _TapState:
    """Bilinear-sample every (n, t, output position) of one tap at once."""
    n_, c_, t_, h, w = shifted.shape
    p = h * w
    lin4, valid4, weights, frac = _neighbor_indices(rows.reshape(n_, t_, p),
                                                    cols.reshape(n_, t_, p), h, w)
    frames = shifted.transpose(0, 2, 1, 3, 4).reshape(n_, t_, c_, p)
    vals4 = np.take_along_axis(frames, lin4[:, :, None, :], axis=3)
    vals4 = vals4 * valid4[:, :, None, :]
    v00, v01, v10, v11 = (vals4[..., i * p:(i + 1) * p] for i in range(4))
    w00, w01, w10, w11 = (wt.reshape(n_, t_, 1, p) for wt in weights)
    sampled = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11   # (N, T, C, P)
    return _TapState(lin4, valid4, weights, frac, sampled, (v00, v01, v10, v11))


def _validate_fields(x, params: Conv3dParams, offsets, masks):
    check_tensor5(x, "ls3d input")
    if params.transposed:
        raise ShapeError("ls3d: main conv cannot be transposed")
    if params.stride != (1, 1, 1):
        raise ShapeError(f"ls3d: main conv stride must be (1,1,1), got {params.stride}")
    expected_pad = tuple(k // 2 for k in params.kernel)
    if tuple(params.padding) != expected_pad:
        raise ShapeError(f"ls3d: main conv padding must be {expected_pad} for kernel "
                         f"{params.kernel}, got {tuple(params.padding)}")
    if x.shape[1] != params.weight.shape[1]:
        raise ShapeError(f"ls3d: input has C={x.shape[1]} channels, kernel expects "
                         f"{params.weight.shape[1]}")
    taps = num_taps(params.kernel)
    grid = (x.shape[0],) + x.shape[2:]
    for name, f, ch in (("offsets", offsets, 2 * taps), ("masks", masks, taps)):
        if f.shape != (grid[0], ch, *grid[1:]):
            raise ShapeError(f"ls3d: {name} must have shape {(grid[0], ch, *grid[1:])}, "
                             f"got {f.shape}")
    if not np.isfinite(offsets).all():
        bad = int(np.flatnonzero(~np.isfinite(offsets))[0])
        raise NumericError(f"ls3d: non-finite offset at flat index {bad} "
                           f"(shape {offsets.shape})")


def ls3d_forward(x: np.ndarray, params: Conv3dParams, offsets: np.ndarray,
                 masks: np.ndarray):
    """Offset-and-mask-modulated 3D convolution. Returns (y, ctx)."""
    _validate_fields(x, params, offsets, masks)
    n_, c_in, t_, h, w = x.shape
    p = h * w
    c_out = params.out_channels
    base_r = np.arange(h, dtype=x.dtype)[:, None]
    base_c = np.arange(w, dtype=x.dtype)[None, :]

    y = np.zeros((n_, t_, c_out, p), dtype=x.dtype)
    tap_states: list[_TapState] = []
    for k, tau, pr, pc in tap_offsets(params.kernel):
        shifted = _shift_t(x, tau)
        rows = base_r + pr + offsets[:, 2 * k]
        cols = base_c + pc + offsets[:, 2 * k + 1]
        state = _sample_tap(shifted, rows, cols)
        tap_states.append(state)
        jt, jh, jw = tau + params.kernel[0] // 2, pr + params.kernel[1] // 2, pc + params.kernel[2] // 2
        w_tap = params.weight[:, :, jt, jh, jw]                      # (Co, Ci)
        modulated = state.sampled * masks[:, k].reshape(n_, t_, 1, p)
        y += np.matmul(w_tap, modulated)

    y = y.reshape(n_, t_, c_out, h, w).transpose(0, 2, 1, 3, 4)
    y = np.ascontiguousarray(y) + params.bias[None, :, None, None, None].astype(x.dtype)
    ctx = (x, params, offsets, masks, tap_states)
    return y, ctx


def ls3d_backward(ctx, grad_y: np.ndarray):
    """Exact gradients of ls3d_forward.

    Returns (grad_x, grad_w, grad_bias, grad_offsets, grad_masks).
    """
    if ctx is None:
        raise ShapeError("ls3d_backward: no saved forward state")
    x, params, offsets, masks, tap_states = ctx
    n_, c_in, t_, h, w = x.shape
    p = h * w
    if grad_y.shape != (n_, params.out_channels, t_, h, w):
        raise ShapeError(f"ls3d_backward: grad_y shape {grad_y.shape} does not match "
                         f"forward output {(n_, params.out_channels, t_, h, w)}")

    gy = np.ascontiguousarray(grad_y.transpose(0, 2, 1, 3, 4)).reshape(n_, t_, -1, p)
    grad_x = np.zeros_like(x)
    grad_w = np.zeros_like(params.weight)
    grad_bias = grad_y.sum(axis=(0, 2, 3, 4))
    grad_offsets = np.zeros_like(offsets)
    grad_masks = np.zeros_like(masks)

    # Flattened scatter targets: index (n*T + t)*C*P + c*P + lin.
    seg_base = (np.arange(n_ * t_)[:, None, None] * c_in
                + np.arange(c_in)[None, :, None]) * p

    for (k, tau, pr, pc), state in zip(tap_offsets(params.kernel), tap_states):
        jt, jh, jw = tau + params.kernel[0] // 2, pr + params.kernel[1] // 2, pc + params.kernel[2] // 2
        w_tap = params.weight[:, :, jt, jh, jw]
        msk = masks[:, k].reshape(n_, t_, 1, p)

        # dL/d(m*sampled) per input channel, then split by product rule.
        g_mod = np.matmul(w_tap.T, gy)
        grad_masks[:, k] = (g_mod * state.sampled).sum(axis=2).reshape(n_, t_, h, w)
        g_samp = g_mod * msk
        grad_w[:, :, jt, jh, jw] = np.tensordot(gy, state.sampled * msk,
                                                axes=([0, 1, 3], [0, 1, 3]))

        # Offset gradient: derivative of the bilinear kernel wrt the point.
        v00, v01, v10, v11 = state.neighbor_vals
        dr, dc = state.frac
        dr = dr.reshape(n_, t_, 1, p)
        dc = dc.reshape(n_, t_, 1, p)
        d_row = (1 - dc) * (v10 - v00) + dc * (v11 - v01)
        d_col = (1 - dr) * (v01 - v00) + dr * (v11 - v10)
        grad_offsets[:, 2 * k] = (g_samp * d_row).sum(axis=2).reshape(n_, t_, h, w)
        grad_offsets[:, 2 * k + 1] = (g_samp * d_col).sum(axis=2).reshape(n_, t_, h, w)

        # Input gradient: scatter g_samp through the four bilinear weights.
        # bincount over a fully flattened index is much faster than ufunc.at.
        w4 = np.concatenate([wt.reshape(n_, t_, 1, p) for wt in state.weights], axis=-1)
        vals4 = np.concatenate([g_samp] * 4, axis=-1) * w4 * state.valid4[:, :, None, :]
        idx = (seg_base + state.lin4.reshape(n_ * t_, 1, 4 * p)).ravel()
        g_acc = np.bincount(idx, weights=vals4.ravel().astype(np.float64),
                            minlength=n_ * t_ * c_in * p)
        g_shifted = (g_acc.reshape(n_, t_, c_in, h, w).astype(x.dtype)
                     .transpose(0, 2, 1, 3, 4))
        _unshift_add(grad_x, g_shifted, tau)

    return grad_x, grad_w, grad_bias, grad_offsets, grad_masks


# --- layer with offset/mask prediction branches -----------------------------

class Ls3dConv:
    """LS3D layer: main kernel plus offset and mask prediction convolutions.

    Both branches consume the layer input. Offsets come out of the offset
    branch raw (plus an optional constant `offset_shift`, which the
    gradient checker uses to stay off the bilinear kernel's integer
    kinks); masks are squashed through a sigmoid into [0, 1].
    """

    def __init__(self, main: Conv3dParams, offset_branch: Conv3dParams,
                 mask_branch: Conv3dParams, name: str = "ls3d",
                 offset_shift: float | tuple[float, float] = 0.0):
        taps = num_taps(main.kernel)
        if offset_branch.out_channels != 2 * taps:
            raise ShapeError(f"offset branch must emit {2 * taps} channels, "
                             f"emits {offset_branch.out_channels}")
        if mask_branch.out_channels != taps:
            raise ShapeError(f"mask branch must emit {taps} channels, "
                             f"emits {mask_branch.out_channels}")
        self.main = main
        self.offset_branch = offset_branch
        self.mask_branch = mask_branch
        self.name = name
        self.offset_shift = offset_shift
        self.grads: dict[str, np.ndarray] = {}
        self._state = None

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.weight": self.main.weight,
            f"{self.name}.bias": self.main.bias,
            f"{self.name}.offset.weight": self.offset_branch.weight,
            f"{self.name}.offset.bias": self.offset_branch.bias,
            f"{self.name}.mask.weight": self.mask_branch.weight,
            f"{self.name}.mask.bias": self.mask_branch.bias,
        }

    def predict_offsets_masks(self, x: np.ndarray):
        """Run the two branches; returns (offsets, masks) only."""
        offsets, masks, _, _ = self._predict(x)
        return offsets, masks

    def _predict(self, x: np.ndarray):
        raw_off, off_ctx = conv3d_forward(x, self.offset_branch)
        shift = self.offset_shift
        if isinstance(shift, tuple):
            # (row, col) shift applied to every tap; gradient is unaffected.
            taps = num_taps(self.main.kernel)
            vec = np.tile(np.asarray(shift, dtype=x.dtype), taps)
            raw_off = raw_off + vec[None, :, None, None, None]
        elif shift:
            raw_off = raw_off + x.dtype.type(shift)
        logits, mask_ctx = conv3d_forward(x, self.mask_branch)
        return raw_off, sigmoid(logits), off_ctx, mask_ctx

    def forward(self, x: np.ndarray, keep_state: bool = False) -> np.ndarray:
        offsets, masks, off_ctx, mask_ctx = self._predict(x)
        y, core_ctx = ls3d_forward(x, self.main, offsets, masks)
        if keep_state:
            self._state = (core_ctx, off_ctx, mask_ctx, masks)
        else:
            self._state = None
        return y

    def backward(self, grad_y: np.ndarray) -> np.ndarray:
        if self._state is None:
            raise ShapeError(f"{self.name}: backward called without a keep-state forward")
        core_ctx, off_ctx, mask_ctx, masks = self._state
        grad_x, grad_w, grad_b, grad_off, grad_masks = ls3d_backward(core_ctx, grad_y)
        gx_off, gw_off, gb_off = conv3d_backward(off_ctx, grad_off)
        grad_logits = grad_masks * masks * (1 - masks)
        gx_mask, gw_mask, gb_mask = conv3d_backward(mask_ctx, grad_logits)
        self.grads = {
            f"{self.name}.weight": grad_w,
            f"{self.name}.bias": grad_b,
            f"{self.name}.offset.weight": gw_off,
            f"{self.name}.offset.bias": gb_off,
            f"{self.name}.mask.weight": gw_mask,
            f"{self.name}.mask.bias": gb_mask,
        }
        self._state = None
        return grad_x + gx_off + gx_mask
