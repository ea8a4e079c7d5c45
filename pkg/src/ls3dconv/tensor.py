"""Dense 5-D tensors and elementwise math.

A "Tensor5" is a plain C-contiguous numpy array of shape (N, C, T, H, W),
dtype float32 or float64, W fastest. Helpers here validate that contract,
convert between kernel-tap index forms, and provide the handful of
elementwise ops the layer code needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DTYPES = (np.float32, np.float64)
AXIS_NAMES = ("N", "C", "T", "H", "W")


def tensor5(data, dtype=np.float32) -> np.ndarray:
    """Build a validated 5-D tensor from array-like data."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    check_tensor5(arr)
    return arr


def check_tensor5(x: np.ndarray, name: str = "tensor") -> None:
    """Raise ShapeError unless x is a non-empty (N, C, T, H, W) float array."""
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        ndim = getattr(x, "ndim", None)
        raise ShapeError(f"{name}: expected a 5-D (N, C, T, H, W) array, got ndim={ndim}")
    for axis, n in zip(AXIS_NAMES, x.shape):
        if n < 1:
            raise ShapeError(f"{name}: dimension {axis} must be >= 1, got {n}")
    if x.dtype.type not in DTYPES:
        raise ShapeError(f"{name}: dtype must be float32 or float64, got {x.dtype}")


def check_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        for axis, (na, nb) in enumerate(zip(a.shape, b.shape)):
            if na != nb:
                name = AXIS_NAMES[axis] if a.ndim == 5 else str(axis)
                raise ShapeError(f"{op}: operand shapes differ at axis {name}: {na} vs {nb} "
                                 f"(full shapes {a.shape} vs {b.shape})")
        raise ShapeError(f"{op}: operand ranks differ: {a.shape} vs {b.shape}")


# --- kernel tap indexing ------------------------------------------------
#
# The 3x3x3 kernel has 27 taps. Tap k <-> (tau, pn) where tau in {-1,0,1}
# walks the temporal axis and pn = (row, col) in {-1,0,1}^2 walks the
# 3x3 spatial grid; k = (tau+1)*9 + (row+1)*3 + (col+1).

NUM_TAPS = 27


@dataclass(frozen=True)
class TapIndex:
    tau: int
    pn: tuple[int, int]

    @property
    def linear(self) -> int:
        return (self.tau + 1) * 9 + (self.pn[0] + 1) * 3 + (self.pn[1] + 1)

    @classmethod
    def from_linear(cls, k: int) -> "TapIndex":
        if not 0 <= k < NUM_TAPS:
            raise ShapeError(f"tap index must lie in [0, {NUM_TAPS}), got {k}")
        tau, rest = divmod(k, 9)
        row, col = divmod(rest, 3)
        return cls(tau - 1, (row - 1, col - 1))


ALL_TAPS = tuple(TapIndex.from_linear(k) for k in range(NUM_TAPS))


# --- elementwise ops ----------------------------------------------------

def ew_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "add")
    return a + b


def ew_sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_same_shape(a, b, "sub")
    return a - b


def ew_scale(a: np.ndarray, alpha: float) -> np.ndarray:
    return a * a.dtype.type(alpha)


def relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0)


def relu_backward(grad_out: np.ndarray, forward_input: np.ndarray) -> np.ndarray:
    """Mask the upstream gradient where the forward input was <= 0."""
    check_same_shape(grad_out, forward_input, "relu_backward")
    return np.where(forward_input > 0, grad_out, 0).astype(grad_out.dtype)


def sigmoid(a: np.ndarray) -> np.ndarray:
    # Split by sign to stay overflow-free in float32.
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out
