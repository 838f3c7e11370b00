"""Per-layer int8 weights + int32 biases and the NTPUWGT container.

Container layout (little-endian)::

    "NTPUWGT"  version:u8  bias_mode:u8  layer_count:u32
    per layer: layer_index:u32  weight_bytes:u32  bias_count:u32
               int8 weights  int32 biases

Weights are stored in canonical order (conv: out, in, kh, kw; fc: out, in
with the input flattened channel-major), independent of any accelerator
shape.  ``bias_mode`` 1 means biases are applied through constant bias
lanes appended to each im2col row: lane 0 carries the constant 1, further
lanes the constant 127, and the matching weight-tile rows hold the digits
of the bias (see :func:`naivetpu.compiler.tiling.bias_digits`).
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

from .network import Conv2D, FullyConnected, NetworkDesc, has_weights

WEIGHTS_MAGIC = b"NTPUWGT"
WEIGHTS_VERSION = 1
BIAS_MODE_LANES = 1


class WeightsError(ValueError):
    pass


@dataclass
class LayerWeights:
    weights: np.ndarray  # int8
    bias: np.ndarray     # int32

    def __eq__(self, other):
        return (isinstance(other, LayerWeights)
                and np.array_equal(self.weights, other.weights)
                and np.array_equal(self.bias, other.bias))


def weight_shape(layer) -> tuple:
    if isinstance(layer, Conv2D):
        return (layer.out_ch, layer.in_ch, layer.kernel_h, layer.kernel_w)
    if isinstance(layer, FullyConnected):
        return (layer.out_dim, layer.in_dim)
    raise WeightsError(f"{type(layer).__name__} has no weights")


def check_weights(net: NetworkDesc, weights: dict) -> None:
    for i, layer in enumerate(net.layers):
        if not has_weights(layer):
            if i in weights:
                raise WeightsError(f"layer {i} ({type(layer).__name__}) takes no weights")
            continue
        if i not in weights:
            raise WeightsError(f"missing weights for layer {i}")
        lw = weights[i]
        if lw.weights.shape != weight_shape(layer) or lw.weights.dtype != np.int8:
            raise WeightsError(f"layer {i}: weights must be int8 {weight_shape(layer)}, "
                               f"got {lw.weights.dtype} {lw.weights.shape}")
        if lw.bias.shape != (weight_shape(layer)[0],) or lw.bias.dtype != np.int32:
            raise WeightsError(f"layer {i}: bias must be int32 ({weight_shape(layer)[0]},)")
    extra = set(weights) - set(range(len(net.layers)))
    if extra:
        raise WeightsError(f"weights for nonexistent layers {sorted(extra)}")


def write_weights(weights: dict, dest: Union[str, os.PathLike, BinaryIO]) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as f:
            write_weights(weights, f)
        return
    dest.write(WEIGHTS_MAGIC)
    dest.write(struct.pack("<BBI", WEIGHTS_VERSION, BIAS_MODE_LANES, len(weights)))
    for idx in sorted(weights):
        lw = weights[idx]
        w = np.ascontiguousarray(lw.weights, dtype=np.int8)
        b = np.ascontiguousarray(lw.bias, dtype="<i4")
        dest.write(struct.pack("<III", idx, w.size, b.size))
        dest.write(w.tobytes())
        dest.write(b.tobytes())


def weights_to_bytes(weights: dict) -> bytes:
    buf = io.BytesIO()
    write_weights(weights, buf)
    return buf.getvalue()


def read_weights(src: Union[str, os.PathLike, BinaryIO, bytes], net: NetworkDesc) -> dict:
    """Parse a container and reshape each entry to its layer's canonical shape."""
    if isinstance(src, (bytes, bytearray)):
        src = io.BytesIO(src)
    elif isinstance(src, (str, os.PathLike)):
        with open(src, "rb") as f:
            return read_weights(f, net)
    data = src.read()
    if data[:7] != WEIGHTS_MAGIC:
        raise WeightsError("bad weights magic")
    if len(data) < 13:
        raise WeightsError("truncated weights header")
    version, bias_mode, count = struct.unpack_from("<BBI", data, 7)
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported weights version {version}")
    if bias_mode != BIAS_MODE_LANES:
        raise WeightsError(f"unsupported bias mode {bias_mode}")
    pos = 13
    out = {}
    for _ in range(count):
        if pos + 12 > len(data):
            raise WeightsError("truncated layer header")
        idx, nw, nb = struct.unpack_from("<III", data, pos)
        pos += 12
        if pos + nw + 4 * nb > len(data):
            raise WeightsError(f"truncated payload for layer {idx}")
        if idx >= len(net.layers) or not has_weights(net.layers[idx]):
            raise WeightsError(f"weights for layer {idx}, which takes none")
        shape = weight_shape(net.layers[idx])
        if nw != int(np.prod(shape)) or nb != shape[0]:
            raise WeightsError(f"layer {idx}: expected {int(np.prod(shape))} weights and "
                               f"{shape[0]} biases, file has {nw} and {nb}")
        w = np.frombuffer(data, np.int8, nw, pos).reshape(shape).copy()
        pos += nw
        b = np.frombuffer(data, "<i4", nb, pos).astype(np.int32)
        pos += 4 * nb
        out[idx] = LayerWeights(w, b)
    if pos != len(data):
        raise WeightsError("trailing bytes after last layer")
    check_weights(net, out)
    return out
