"""Independent quantized reference executor and random network generator.

Nothing here shares loop or tiling code with the compiler or the datapath;
only the requantization rule is imported from :mod:`naivetpu.arch`.
Convolutions are direct (no im2col), summing one kernel tap at a time in
int64 and wrapping to 32 bits at the end, which equals per-step 32-bit
wrapping.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .arch import requantize_array
from .compiler.network import (Conv2D, FullyConnected, MaxPool2D, NetworkDesc,
                               layer_output_shape)
from .compiler.weights import LayerWeights, weight_shape
from .isa import RequantParams

SIZE_CLASSES = ("tiny", "small", "medium")


@dataclass(frozen=True)
class QTensor:
    shape: tuple
    data: np.ndarray     # flat int8, row-major

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.int8).ravel()
        if data.size != int(np.prod(self.shape, dtype=np.int64)):
            raise ValueError(f"{data.size} values for shape {self.shape}")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, a) -> "QTensor":
        a = np.asarray(a)
        if a.dtype != np.int8:
            raise TypeError(f"QTensor needs int8 data, got {a.dtype}")
        return cls(a.shape, a.ravel())

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        return (isinstance(other, QTensor) and self.shape == other.shape
                and np.array_equal(self.data, other.data))


def _arr(x) -> np.ndarray:
    return x.array() if isinstance(x, QTensor) else np.asarray(x)


def _wrap32(v: np.ndarray) -> np.ndarray:
    return (v.astype(np.int64) + 2**31) % 2**32 - 2**31


def _conv_acc(a: np.ndarray, w: np.ndarray, layer: Conv2D) -> np.ndarray:
    _, oh, ow = layer_output_shape(layer, a.shape)
    p, s = layer.pad, layer.stride
    xp = np.pad(a.astype(np.int64), ((0, 0), (p, p), (p, p)))
    w = np.asarray(w, np.int64)
    acc = np.zeros((layer.out_ch, oh, ow), np.int64)
    for ky in range(layer.kernel_h):
        for kx in range(layer.kernel_w):
            patch = xp[:, ky:ky + s * (oh - 1) + 1:s, kx:kx + s * (ow - 1) + 1:s]
            acc += np.tensordot(w[:, :, ky, kx], patch, axes=(1, 0))
    return acc


def _activated(acc: np.ndarray, bias, act: str) -> np.ndarray:
    v = _wrap32(acc + np.asarray(bias, np.int64).reshape((-1,) + (1,) * (acc.ndim - 1)))
    return np.maximum(v, 0) if act == "relu" else v


def conv2d_ref(x, weights, bias, layer: Conv2D) -> QTensor:
    """Direct convolution: int32-wrapped sum, bias, activation, requantize."""
    a = _arr(x)
    w = np.asarray(weights)
    if a.ndim != 3 or a.shape[0] != layer.in_ch or w.shape != (layer.out_ch, layer.in_ch,
                                                                layer.kernel_h, layer.kernel_w):
        raise ValueError(f"conv input {a.shape} / weights {w.shape} do not match {layer}")
    v = _activated(_conv_acc(a, w, layer), bias, layer.act)
    return QTensor.from_array(requantize_array(v, layer.rq))


def conv2d_naive(x, weights, bias, layer: Conv2D) -> np.ndarray:
    """Six nested Python loops; slow, used only to check :func:`conv2d_ref`."""
    a = _arr(x)
    c, h, wd = a.shape
    _, oh, ow = layer_output_shape(layer, a.shape)
    out = np.zeros((layer.out_ch, oh, ow), np.int8)
    for o in range(layer.out_ch):
        for y in range(oh):
            for xx in range(ow):
                acc = 0
                for ci in range(c):
                    for ky in range(layer.kernel_h):
                        for kx in range(layer.kernel_w):
                            iy = y * layer.stride + ky - layer.pad
                            ix = xx * layer.stride + kx - layer.pad
                            if 0 <= iy < h and 0 <= ix < wd:
                                acc += int(a[ci, iy, ix]) * int(weights[o, ci, ky, kx])
                acc += int(bias[o])
                acc = (acc + 2**31) % 2**32 - 2**31
                if layer.act == "relu":
                    acc = max(acc, 0)
                out[o, y, xx] = requantize_array(np.array([acc]), layer.rq)[0]
    return out


def fc_ref(x, weights, bias, layer: FullyConnected) -> QTensor:
    """Dense layer on the channel-major flattened input; output shape (out, 1, 1)."""
    v = _arr(x).astype(np.int64).ravel()
    if v.size != layer.in_dim:
        raise ValueError(f"fc expects {layer.in_dim} inputs, got {v.size}")
    acc = np.asarray(weights, np.int64) @ v
    out = requantize_array(_activated(acc, bias, layer.act), layer.rq)
    return QTensor.from_array(out.reshape(layer.out_dim, 1, 1))


def maxpool_ref(x, layer: MaxPool2D) -> QTensor:
    a = _arr(x)
    _, oh, ow = layer_output_shape(layer, a.shape)
    k, s = layer.window, layer.stride
    out = np.full((a.shape[0], oh, ow), -128, np.int8)
    for dy in range(k):
        for dx in range(k):
            out = np.maximum(out, a[:, dy:dy + s * (oh - 1) + 1:s, dx:dx + s * (ow - 1) + 1:s])
    return QTensor.from_array(out)


def relu_ref(x) -> np.ndarray:
    a = _arr(x)
    return np.maximum(a, np.zeros((), a.dtype))


def apply_layer(layer, x, lw: Optional[LayerWeights]) -> QTensor:
    if isinstance(layer, Conv2D):
        return conv2d_ref(x, lw.weights, lw.bias, layer)
    if isinstance(layer, FullyConnected):
        return fc_ref(x, lw.weights, lw.bias, layer)
    if isinstance(layer, MaxPool2D):
        return maxpool_ref(x, layer)
    raise TypeError(f"unsupported layer {layer!r}")


def run_network_ref(net: NetworkDesc, x, weights: dict, trace: bool = False):
    """Layer-by-layer reference execution; ``trace`` also returns every layer output."""
    t = x if isinstance(x, QTensor) else QTensor.from_array(np.asarray(x))
    if t.shape != tuple(net.input_shape):
        raise ValueError(f"input shape {t.shape} != {tuple(net.input_shape)}")
    outs = []
    for i, layer in enumerate(net.layers):
        t = apply_layer(layer, t, weights.get(i))
        outs.append(t)
    return (t, outs) if trace else t


# ---------------------------------------------------------------------------
# Random data and networks
# ---------------------------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def random_input(shape: Sequence[int], seed=0) -> np.ndarray:
    return _rng(seed).integers(-128, 128, size=tuple(shape), dtype=np.int64).astype(np.int8)


def random_weights(net: NetworkDesc, seed=0, weight_range: int = 128,
                   bias_range: int = 4096) -> dict:
    rng = _rng(seed)
    out = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (Conv2D, FullyConnected)):
            shape = weight_shape(layer)
            w = rng.integers(-weight_range, weight_range, size=shape).clip(-128, 127).astype(np.int8)
            b = rng.integers(-bias_range, bias_range + 1, size=shape[0]).astype(np.int32)
            out[i] = LayerWeights(w, b)
    return out


def choose_requant(raw: np.ndarray, multiplier: int = 1, saturate: float = 0.01) -> RequantParams:
    """Smallest shift for ``multiplier`` so at most ``saturate`` of ``raw`` clamps."""
    mags = np.abs(raw.astype(np.int64)).ravel() * abs(multiplier)
    if mags.size == 0 or not mags.any():
        return RequantParams(multiplier, 0)
    lim = np.quantile(mags, 1.0 - saturate, method="higher")
    shift = 0
    while shift < 31 and (int(lim) + (1 << shift >> 1)) >> shift > 127:
        shift += 1
    return RequantParams(multiplier, shift)


def _raw(layer, x, lw: LayerWeights) -> np.ndarray:
    """Values entering requantization (after bias and activation)."""
    a = _arr(x)
    if isinstance(layer, FullyConnected):
        acc = np.asarray(lw.weights, np.int64) @ a.astype(np.int64).ravel()
    else:
        acc = _conv_acc(a, lw.weights, layer)
    return _activated(acc, lw.bias, layer.act)


def calibrate(net: NetworkDesc, weights: dict, x, seed=None) -> NetworkDesc:
    """Replace every layer's shift so that at most 1% of outputs saturate on ``x``.

    Multipliers are kept, except a random sign flip on about 10% of layers
    when ``seed`` is given.
    """
    rng = None if seed is None else _rng(seed)
    t = x if isinstance(x, QTensor) else QTensor.from_array(np.asarray(x))
    layers = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, (Conv2D, FullyConnected)):
            m = layer.rq.multiplier
            if rng is not None and rng.random() < 0.1:
                m = -m
            rq = choose_requant(_raw(layer, t, weights[i]), m)
            layer = replace(layer, rq=rq)
        layers.append(layer)
        t = apply_layer(layer, t, weights.get(i))
    return net.with_layers(layers)


_CLASS_LIMITS = {
    # max layers, max input hw, max input channels, max channels/features
    "tiny": (3, 8, 4, 16),
    "small": (7, 16, 8, 64),
    "medium": (9, 32, 16, 64),
}


def gen_random_network(seed: int, size_class: str = "small") -> tuple:
    """Seeded random conv/pool/fc network plus calibrated weights.

    Dimensions stay at most 64 and kernels at most 5; once a fully-connected
    layer appears only fully-connected layers follow.
    """
    if size_class not in _CLASS_LIMITS:
        raise ValueError(f"size class must be one of {SIZE_CLASSES}")
    max_layers, max_hw, max_in, max_ch = _CLASS_LIMITS[size_class]
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, max_in + 1))
    h = int(rng.integers(1, max_hw + 1))
    w = int(rng.integers(1, max_hw + 1))
    shape = input_shape = (c, h, w)
    n_layers = int(rng.integers(1, max_layers + 1))
    layers = []
    seen_fc = False
    for _ in range(n_layers):
        c, h, w = shape
        kinds = ["fc"] if seen_fc else ["conv", "conv", "pool", "fc"]
        kind = kinds[int(rng.integers(len(kinds)))]
        act = "relu" if rng.random() < 0.6 else "identity"
        mult = int(rng.integers(1, 256))
        if kind == "conv":
            pad = int(rng.integers(0, 3))
            kh = int(rng.integers(1, min(5, h + 2 * pad) + 1))
            kw = int(rng.integers(1, min(5, w + 2 * pad) + 1))
            stride = int(rng.integers(1, 3))
            pad = min(pad, kh - 1, kw - 1)
            kh, kw = min(kh, h + 2 * pad), min(kw, w + 2 * pad)
            layer = Conv2D(c, int(rng.integers(1, max_ch + 1)), kh, kw, stride, pad,
                           RequantParams(mult, 0), act)
        elif kind == "pool":
            win = int(rng.integers(1, min(3, h, w) + 1))
            stride = int(rng.integers(1, win + 1))
            layer = MaxPool2D(win, stride)
        else:
            layer = FullyConnected(c * h * w, int(rng.integers(1, max_ch + 1)),
                                   RequantParams(mult, 0), act)
            seen_fc = True
        layers.append(layer)
        shape = layer_output_shape(layer, shape)
    net = NetworkDesc(f"random_{size_class}_{seed}", input_shape, tuple(layers))
    weights = random_weights(net, rng)
    x = random_input(input_shape, rng)
    return calibrate(net, weights, x, rng), weights


def layer_profile(net: NetworkDesc) -> tuple:
    """(conv, pool, fc) layer counts."""
    kinds = (Conv2D, MaxPool2D, FullyConnected)
    return tuple(sum(isinstance(l, k) for l in net.layers) for k in kinds)
