"""Per-layer lowering geometry: K layouts, tile counts and pixel compute orders."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..arch import AcceleratorConfig
from ..isa import RequantParams
from .network import Conv2D, FullyConnected, MaxPool2D, NetworkDesc, infer_shapes
from .tiling import KLayout, bias_digits, build_klayout, channel_chunks, chunk_width


class CompileError(ValueError):
    """A layer or network cannot be mapped onto the configured accelerator."""


def compute_order(out_shape, consumer) -> np.ndarray:
    """Order in which a layer produces its output pixels.

    Row-major, except when feeding a non-overlapping max-pool: then each
    pooling window's pixels are produced consecutively (windows row-major,
    uncovered border pixels last) so the pool's input buffer fills with long
    contiguous write-backs.
    """
    _, h, w = out_shape
    if isinstance(consumer, MaxPool2D) and consumer.window == consumer.stride:
        k = consumer.window
        oh, ow = (h - k) // k + 1, (w - k) // k + 1
        oy, ox, dy, dx = np.meshgrid(np.arange(oh), np.arange(ow), np.arange(k), np.arange(k),
                                     indexing="ij")
        covered = ((oy * k + dy) * w + ox * k + dx).ravel()
        rest = np.setdiff1d(np.arange(h * w), covered)
        return np.concatenate([covered, rest]).astype(np.int64)
    return np.arange(h * w, dtype=np.int64)


@dataclass
class InputPlan:
    """Copy of the network input from host memory into the activation stream."""
    shape: tuple
    widths: list
    order: np.ndarray
    block: int = 0
    host_base: list = field(default_factory=list)   # per channel chunk

    kind = "input"
    index = -1


@dataclass
class ConvPlan:
    index: int
    kind: str                   # "conv" or "fc"
    layer: object
    in_shape: tuple
    out_shape: tuple
    kernel_h: int
    kernel_w: int
    stride: int
    pad: int
    act: str
    rq: RequantParams
    klayout: KLayout
    out_widths: list
    order: np.ndarray
    block: int = 0
    host_base: list = field(default_factory=list)   # per K-chunk
    tile_addr: int = 0
    onchip: bool = False

    @property
    def k_chunks(self) -> int:
        return self.klayout.n_chunks

    @property
    def out_chunks(self) -> int:
        return len(self.out_widths)

    @property
    def n_tiles(self) -> int:
        return self.k_chunks * self.out_chunks

    @property
    def positions(self) -> int:
        return self.out_shape[1] * self.out_shape[2]

    def conv_weights(self, w: np.ndarray) -> np.ndarray:
        """Canonical layer weights viewed as (out, in_ch, kh, kw)."""
        if self.kind == "fc":
            c, h, ww = self.in_shape
            return w.reshape(w.shape[0], c, h, ww)
        return w


@dataclass
class PoolPlan:
    index: int
    layer: MaxPool2D
    in_shape: tuple
    out_shape: tuple
    widths: list
    order: np.ndarray
    block: int = 0
    host_base: list = field(default_factory=list)   # per channel chunk

    kind = "pool"

    @property
    def window_rows(self) -> int:
        return self.layer.window * self.layer.window

    @property
    def positions(self) -> int:
        return self.out_shape[1] * self.out_shape[2]


@dataclass
class OutputPlan:
    shape: tuple
    widths: list
    host_base: list = field(default_factory=list)

    kind = "output"


def bias_lane_count(bias) -> int:
    return len(bias_digits(bias)[0])


def build_plans(net: NetworkDesc, cfg: AcceleratorConfig, weights: Optional[dict] = None) -> list:
    """Geometry for [input, layer..., output]; addresses and blocks unset."""
    shapes = infer_shapes(net)
    cw = chunk_width(cfg)
    layers = list(net.layers)
    consumers = layers + [None]
    plans = [InputPlan(net.input_shape, channel_chunks(net.input_shape[0], cw),
                       compute_order(net.input_shape, consumers[0]))]
    # the input pass streams in host order; reorder only if the host layout allows it
    plans[0].order = np.arange(net.input_shape[1] * net.input_shape[2], dtype=np.int64)
    in_shape = net.input_shape
    for i, layer in enumerate(layers):
        out_shape = shapes[i]
        order = compute_order(out_shape, consumers[i + 1])
        if isinstance(layer, (Conv2D, FullyConnected)):
            nb = bias_lane_count(weights[i].bias) if weights is not None else 0
            if isinstance(layer, Conv2D):
                kh, kw, stride, pad, kind = layer.kernel_h, layer.kernel_w, layer.stride, layer.pad, "conv"
            else:
                kh, kw, stride, pad, kind = in_shape[1], in_shape[2], 1, 0, "fc"
            try:
                kl = build_klayout(in_shape[0], kh, kw, cfg, nb)
            except ValueError as e:
                raise CompileError(f"layer {i}: {e}") from None
            plans.append(ConvPlan(i, kind, layer, in_shape, out_shape, kh, kw, stride, pad,
                                  layer.act, layer.rq, kl, channel_chunks(out_shape[0], cw), order))
        elif isinstance(layer, MaxPool2D):
            if layer.window * layer.window > 255:
                raise CompileError(f"layer {i}: pool window {layer.window}x{layer.window} exceeds "
                                   "the 255-row post-processor window")
            plans.append(PoolPlan(i, layer, in_shape, out_shape,
                                  channel_chunks(in_shape[0], cw), order))
        else:
            raise CompileError(f"layer {i}: unsupported layer {layer!r}")
        in_shape = out_shape
    plans.append(OutputPlan(in_shape, channel_chunks(in_shape[0], cw)))
    return plans
