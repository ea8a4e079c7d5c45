"""Finite-difference harness: real layers must pass, corrupted ones must fail."""

import numpy as np
import pytest

from ls3dconv.conv3d import Conv3dParams
from ls3dconv.errors import NumericError, ShapeError
from ls3dconv.gradcheck import gradcheck
from ls3dconv.net import Conv3dLayer, make_ls3d_layer


def plain_conv_layer(rng, c_in, c_out, stride=(1, 1, 1), pad=(1, 1, 1)):
    w = rng.standard_normal((c_out, c_in, 3, 3, 3))
    b = rng.standard_normal(c_out)
    return Conv3dLayer(Conv3dParams(w, b, stride=stride, padding=pad), "conv")


class _ScaledGrads:
    """Wraps a layer and corrupts its analytic gradients by a factor."""

    def __init__(self, inner, factor):
        self.inner = inner
        self.factor = factor
        self.grads = {}

    def parameters(self):
        return self.inner.parameters()

    def forward(self, x, keep_state=False):
        return self.inner.forward(x, keep_state)

    def backward(self, grad_y):
        gx = self.inner.backward(grad_y)
        self.grads = {k: v * self.factor for k, v in self.inner.grads.items()}
        return gx * self.factor


def test_plain_conv_layer_passes_tightly():
    rng = np.random.default_rng(0)
    layer = plain_conv_layer(rng, 2, 2)
    x = rng.standard_normal((1, 2, 3, 6, 6))
    assert gradcheck(layer, x, seed=1) < 1e-6


def test_strided_conv_layer_passes():
    rng = np.random.default_rng(1)
    layer = plain_conv_layer(rng, 2, 3, stride=(1, 2, 2))
    x = rng.standard_normal((1, 2, 2, 6, 6))
    assert gradcheck(layer, x, seed=2) < 1e-6


def test_transposed_conv_layer_passes():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((2, 2, 3, 3, 3))
    p = Conv3dParams(w, rng.standard_normal(2), stride=(2, 1, 1), padding=(1, 1, 1),
                     transposed=True)
    layer = Conv3dLayer(p, "deconv")
    x = rng.standard_normal((1, 2, 2, 5, 5))
    assert gradcheck(layer, x, seed=3) < 1e-6


def test_ls3d_layer_passes():
    rng = np.random.default_rng(3)
    layer = make_ls3d_layer(rng, channels=2, name="ls3d", dtype=np.float64,
                            random_branches=True)
    layer.offset_shift = 0.3  # keep sampling points off integer coordinates
    x = rng.standard_normal((1, 2, 3, 6, 6))
    assert gradcheck(layer, x, seed=4, max_entries_per_tensor=80) < 1e-4


def test_injected_fault_is_detected():
    rng = np.random.default_rng(4)
    layer = _ScaledGrads(plain_conv_layer(rng, 1, 1), 1.01)
    x = rng.standard_normal((1, 1, 2, 5, 5))
    assert gradcheck(layer, x, seed=5) > 1e-3


def test_float32_rejected():
    rng = np.random.default_rng(5)
    layer = plain_conv_layer(rng, 1, 1)
    x = rng.standard_normal((1, 1, 2, 4, 4)).astype(np.float32)
    with pytest.raises(ShapeError, match="float64"):
        gradcheck(layer, x)


def test_nonfinite_gradient_reported_with_location():
    rng = np.random.default_rng(6)
    layer = plain_conv_layer(rng, 1, 1)

    class _Poisoned:
        def __init__(self, inner):
            self.inner = inner
            self.grads = {}

        def parameters(self):
            return self.inner.parameters()

        def forward(self, x, keep_state=False):
            return self.inner.forward(x, keep_state)

        def backward(self, grad_y):
            gx = self.inner.backward(grad_y)
            self.grads = dict(self.inner.grads)
            self.grads["conv.weight"] = self.grads["conv.weight"].copy()
            self.grads["conv.weight"].flat[3] = np.nan
            return gx

    x = rng.standard_normal((1, 1, 2, 4, 4))
    with pytest.raises(NumericError, match="conv.weight"):
        gradcheck(_Poisoned(layer), x)
