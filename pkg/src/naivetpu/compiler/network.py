"""Quantized CNN descriptions: layer specs, shape inference, parameter
counting and the line-oriented network file format.

Network file::

    name lenet5
    input 1 32 32
    conv out=6 k=5 s=1 p=0 act=relu rq=1:0
    pool w=2 s=2
    fc out=120 act=relu rq=1:0
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Union

from ..isa import RequantParams

ACTIVATIONS = ("identity", "relu")

Shape = tuple  # (channels, height, width)


class NetworkError(ValueError):
    pass


class ShapeError(NetworkError):
    pass


class NetworkParseError(NetworkError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad: int = 0
    rq: RequantParams = RequantParams(1, 0)
    act: str = "identity"

    def __post_init__(self):
        _positive(self, "in_ch", "out_ch", "kernel_h", "kernel_w", "stride")
        if self.pad < 0:
            raise NetworkError(f"pad must be >= 0, got {self.pad}")
        _check_act(self.act)
        _check_rq(self.rq)


@dataclass(frozen=True)
class FullyConnected:
    in_dim: int
    out_dim: int
    rq: RequantParams = RequantParams(1, 0)
    act: str = "identity"

    def __post_init__(self):
        _positive(self, "in_dim", "out_dim")
        _check_act(self.act)
        _check_rq(self.rq)


@dataclass(frozen=True)
class MaxPool2D:
    window: int
    stride: int

    def __post_init__(self):
        _positive(self, "window", "stride")


LayerSpec = Union[Conv2D, FullyConnected, MaxPool2D]


def _positive(obj, *names):
    for n in names:
        v = getattr(obj, n)
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise NetworkError(f"{type(obj).__name__}.{n} must be a positive integer, got {v!r}")


def _check_act(act):
    if act not in ACTIVATIONS:
        raise NetworkError(f"unknown activation {act!r}")


def _check_rq(rq):
    if not (-(1 << 31) <= rq.multiplier < (1 << 31)) or not 0 <= rq.shift <= 31:
        raise NetworkError(f"requant parameters out of range: {rq}")
    if rq.multiplier == 0:
        raise NetworkError("requant multiplier must be nonzero")


def has_weights(layer: LayerSpec) -> bool:
    return isinstance(layer, (Conv2D, FullyConnected))


@dataclass(frozen=True)
class NetworkDesc:
    name: str
    input_shape: Shape
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or any(
                not isinstance(d, int) or d < 1 for d in self.input_shape):
            raise ShapeError(f"input shape must be three positive ints, got {self.input_shape}")

    def with_layers(self, layers) -> "NetworkDesc":
        return replace(self, layers=tuple(layers))


def layer_output_shape(layer: LayerSpec, in_shape: Shape) -> Shape:
    c, h, w = in_shape
    if isinstance(layer, Conv2D):
        if layer.in_ch != c:
            raise ShapeError(f"conv expects {layer.in_ch} input channels, got {c}")
        oh = (h + 2 * layer.pad - layer.kernel_h) // layer.stride + 1
        ow = (w + 2 * layer.pad - layer.kernel_w) // layer.stride + 1
        if h + 2 * layer.pad < layer.kernel_h or w + 2 * layer.pad < layer.kernel_w:
            raise ShapeError(f"kernel {layer.kernel_h}x{layer.kernel_w} larger than padded input {h}x{w}")
        return (layer.out_ch, oh, ow)
    if isinstance(layer, FullyConnected):
        if layer.in_dim != c * h * w:
            raise ShapeError(f"fc expects in_dim={layer.in_dim}, input has {c * h * w} values")
        return (layer.out_dim, 1, 1)
    if isinstance(layer, MaxPool2D):
        if h < layer.window or w < layer.window:
            raise ShapeError(f"pool window {layer.window} larger than input {h}x{w}")
        return (c, (h - layer.window) // layer.stride + 1, (w - layer.window) // layer.stride + 1)
    raise NetworkError(f"unknown layer {layer!r}")


def infer_shapes(net: NetworkDesc) -> list:
    """Output shape of every layer, in order."""
    shapes = []
    shape = net.input_shape
    for i, layer in enumerate(net.layers):
        try:
            shape = layer_output_shape(layer, shape)
        except ShapeError as e:
            raise ShapeError(f"layer {i}: {e}") from None
        shapes.append(shape)
    return shapes


def input_shapes(net: NetworkDesc) -> list:
    return [net.input_shape] + infer_shapes(net)[:-1] if net.layers else []


def layer_params(layer: LayerSpec) -> int:
    if isinstance(layer, Conv2D):
        return layer.out_ch * (layer.in_ch * layer.kernel_h * layer.kernel_w + 1)
    if isinstance(layer, FullyConnected):
        return layer.out_dim * (layer.in_dim + 1)
    return 0


def count_params(net: NetworkDesc) -> tuple:
    """(per-layer parameter counts, total); weights plus one bias per output."""
    per_layer = [layer_params(l) for l in net.layers]
    return per_layer, sum(per_layer)


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _parse_kv(tokens, lineno, allowed):
    out = {}
    for tok in tokens:
        key, eq, value = tok.partition("=")
        if not eq:
            raise NetworkParseError(lineno, f"expected key=value, got {tok!r}")
        if key not in allowed:
            raise NetworkParseError(lineno, f"unknown key {key}")
        if key in out:
            raise NetworkParseError(lineno, f"duplicate key {key}")
        out[key] = value
    return out


def _int(value, lineno, key):
    try:
        return int(value, 0)
    except ValueError:
        raise NetworkParseError(lineno, f"bad integer for {key}: {value!r}") from None


def _rq(value, lineno):
    m, sep, s = value.partition(":")
    try:
        return RequantParams(int(m, 0), int(s, 0) if sep else 0)
    except ValueError:
        raise NetworkParseError(lineno, f"bad requant spec {value!r} (want multiplier:shift)") from None


def parse_network(text: str, name: str = "network") -> NetworkDesc:
    input_shape = None
    layers = []
    shape = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *tokens = line.split()
        try:
            if kind == "name":
                if len(tokens) != 1:
                    raise NetworkParseError(lineno, "name takes one token")
                name = tokens[0]
            elif kind == "input":
                if input_shape is not None:
                    raise NetworkParseError(lineno, "duplicate input line")
                if layers:
                    raise NetworkParseError(lineno, "input must precede layers")
                if len(tokens) != 3:
                    raise NetworkParseError(lineno, "input takes <ch> <h> <w>")
                input_shape = tuple(_int(t, lineno, "input") for t in tokens)
                shape = input_shape
            elif kind in ("conv", "fc", "pool"):
                if shape is None:
                    raise NetworkParseError(lineno, "layer before input line")
                layer = _parse_layer(kind, tokens, lineno, shape)
                shape = layer_output_shape(layer, shape)
                layers.append(layer)
            else:
                raise NetworkParseError(lineno, f"unknown directive {kind}")
        except NetworkParseError:
            raise
        except NetworkError as e:
            raise NetworkParseError(lineno, str(e)) from None
    if input_shape is None:
        raise NetworkParseError(0, "missing input line")
    return NetworkDesc(name, input_shape, tuple(layers))


def _parse_layer(kind, tokens, lineno, shape):
    c, h, w = shape
    if kind == "conv":
        kv = _parse_kv(tokens, lineno, {"out", "k", "kh", "kw", "s", "p", "act", "rq"})
        if "out" not in kv:
            raise NetworkParseError(lineno, "conv needs out=")
        k = _int(kv["k"], lineno, "k") if "k" in kv else None
        kh = _int(kv["kh"], lineno, "kh") if "kh" in kv else k
        kw = _int(kv["kw"], lineno, "kw") if "kw" in kv else k
        if kh is None or kw is None:
            raise NetworkParseError(lineno, "conv needs k= (or kh= and kw=)")
        return Conv2D(c, _int(kv["out"], lineno, "out"), kh, kw,
                      stride=_int(kv.get("s", "1"), lineno, "s"),
                      pad=_int(kv.get("p", "0"), lineno, "p"),
                      rq=_rq(kv.get("rq", "1:0"), lineno),
                      act=kv.get("act", "identity"))
    if kind == "fc":
        kv = _parse_kv(tokens, lineno, {"out", "act", "rq"})
        if "out" not in kv:
            raise NetworkParseError(lineno, "fc needs out=")
        return FullyConnected(c * h * w, _int(kv["out"], lineno, "out"),
                              rq=_rq(kv.get("rq", "1:0"), lineno), act=kv.get("act", "identity"))
    kv = _parse_kv(tokens, lineno, {"w", "s"})
    if "w" not in kv:
        raise NetworkParseError(lineno, "pool needs w=")
    window = _int(kv["w"], lineno, "w")
    return MaxPool2D(window, _int(kv.get("s", str(window)), lineno, "s"))


def format_network(net: NetworkDesc) -> str:
    lines = [f"name {net.name}", "input {} {} {}".format(*net.input_shape)]
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            k = (f"k={layer.kernel_h}" if layer.kernel_h == layer.kernel_w
                 else f"kh={layer.kernel_h} kw={layer.kernel_w}")
            lines.append(f"conv out={layer.out_ch} {k} s={layer.stride} p={layer.pad} "
                         f"act={layer.act} rq={layer.rq.multiplier}:{layer.rq.shift}")
        elif isinstance(layer, FullyConnected):
            lines.append(f"fc out={layer.out_dim} act={layer.act} "
                         f"rq={layer.rq.multiplier}:{layer.rq.shift}")
        else:
            lines.append(f"pool w={layer.window} s={layer.stride}")
    return "\n".join(lines) + "\n"


def load_network(path: Union[str, os.PathLike]) -> NetworkDesc:
    with open(path) as f:
        text = f.read()
    stem = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return parse_network(text, name=stem)


def save_network(net: NetworkDesc, path: Union[str, os.PathLike]) -> None:
    with open(path, "w") as f:
        f.write(format_network(net))


# ---------------------------------------------------------------------------
# Reference topologies
# ---------------------------------------------------------------------------


def lenet5() -> NetworkDesc:
    relu = "relu"
    return NetworkDesc("lenet5", (1, 32, 32), (
        Conv2D(1, 6, 5, 5, act=relu),
        MaxPool2D(2, 2),
        Conv2D(6, 16, 5, 5, act=relu),
        MaxPool2D(2, 2),
        FullyConnected(400, 120, act=relu),
        FullyConnected(120, 84, act=relu),
        FullyConnected(84, 10),
    ))


VGG16_BLOCKS = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def vgg16(input_hw: int = 224, num_classes: int = 1000, fc_dim: int = 4096,
          in_ch: int = 3) -> NetworkDesc:
    layers = []
    c, hw = in_ch, input_hw
    for block in VGG16_BLOCKS:
        for out in block:
            layers.append(Conv2D(c, out, 3, 3, stride=1, pad=1, act="relu"))
            c = out
        layers.append(MaxPool2D(2, 2))
        hw //= 2
    flat = c * hw * hw
    layers += [
        FullyConnected(flat, fc_dim, act="relu"),
        FullyConnected(fc_dim, fc_dim, act="relu"),
        FullyConnected(fc_dim, num_classes),
    ]
    name = "vgg16" if input_hw == 224 else f"vgg16_{input_hw}"
    return NetworkDesc(name, (in_ch, input_hw, input_hw), tuple(layers))
