"""Instruction emission: im2col conv/fc lowering, pooling via identity staging.

Each pass reads its input blocks from host memory, computes, and scatters
every produced UB row straight into the consumer's host buffer with
WRITE_HOST_MEMORY runs.  For a conv consumer that buffer *is* the im2col
matrix (host-side patch materialization); for a pool consumer it holds each
window's rows consecutively, so the post-processor can max over them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..arch import AcceleratorConfig
from ..isa import (IDENTITY, RELU, Activate, MatMulConv, MaxPool, Program, ReadHostMemory,
                   ReadWeights, RequantParams, WriteHostMemory)
from .memory import MemoryMap, plan
from .network import Conv2D, FullyConnected, MaxPool2D, NetworkDesc
from .plan import CompileError, ConvPlan, InputPlan, OutputPlan, PoolPlan
from .tiling import identity_tile, kmatrix, pack_tiles
from .weights import check_weights

POOL_RQ = RequantParams(1, 0)


def merge_runs(rows: np.ndarray, addrs: np.ndarray, width: int) -> list:
    """Group (UB row, host addr) pairs into maximal contiguous write-back runs.

    A run is rows r, r+1, ... landing at addr, addr+width, ...  Returns
    (row, addr, length) triples ordered by row then address.
    """
    if rows.size == 0:
        return []
    key = addrs - rows * width
    idx = np.lexsort((rows, key))
    r, a, k = rows[idx], addrs[idx], key[idx]
    brk = np.ones(r.size, bool)
    brk[1:] = (k[1:] != k[:-1]) | (r[1:] != r[:-1] + 1)
    starts = np.flatnonzero(brk)
    lens = np.diff(np.append(starts, r.size))
    r0, a0 = r[starts], a[starts]
    order = np.lexsort((a0, r0))
    return list(zip(r0[order].tolist(), a0[order].tolist(), lens[order].tolist()))


def _conv_dests(c: ConvPlan) -> list:
    """Per input-channel chunk: (pixel, host addr) pairs of the im2col buffer."""
    _, h, w = c.in_shape
    ow = c.out_shape[2]
    i = np.arange(c.positions, dtype=np.int64)
    oy, ox = np.divmod(c.order, ow)
    qs = [[] for _ in c.klayout.in_chunks]
    ads = [[] for _ in c.klayout.in_chunks]
    for s in c.klayout.slots:
        iy = oy * c.stride + s.ky - c.pad
        ix = ox * c.stride + s.kx - c.pad
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        qs[s.m].append((iy * w + ix)[ok])
        ads[s.m].append((c.host_base[s.chunk] + i * c.klayout.used[s.chunk] + s.lane)[ok])
    return [(np.concatenate(q), np.concatenate(a)) for q, a in zip(qs, ads)]


def _pool_dests(p: PoolPlan) -> list:
    _, _, w = p.in_shape
    k, s = p.layer.window, p.layer.stride
    ow = p.out_shape[2]
    oy, ox = np.divmod(p.order, ow)
    dy, dx = np.divmod(np.arange(k * k), k)
    q = ((oy[:, None] * s + dy) * w + ox[:, None] * s + dx).ravel()
    row = np.arange(p.positions * k * k, dtype=np.int64)
    return [(q, p.host_base[m] + row * cm) for m, cm in enumerate(p.widths)]


def _output_dests(o: OutputPlan) -> list:
    q = np.arange(o.shape[1] * o.shape[2], dtype=np.int64)
    return [(q, o.host_base[m] + q * cm) for m, cm in enumerate(o.widths)]


def _dests(consumer) -> list:
    if isinstance(consumer, ConvPlan):
        return _conv_dests(consumer)
    if isinstance(consumer, PoolPlan):
        return _pool_dests(consumer)
    return _output_dests(consumer)


class _Sink:
    """Routes a producer's UB output rows to its consumer's host buffer."""

    def __init__(self, order: np.ndarray, dests: list, widths: list):
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        self.widths = widths
        self.per_chunk = []
        for q, a in dests:
            pos = inv[q]
            idx = np.argsort(pos, kind="stable")
            self.per_chunk.append((pos[idx], a[idx]))

    def emit(self, out: list, m: int, i0: int, n: int, ub_row: int) -> None:
        pos, addr = self.per_chunk[m]
        lo, hi = np.searchsorted(pos, [i0, i0 + n])
        w = self.widths[m]
        for r, a, ln in merge_runs(pos[lo:hi] - i0 + ub_row, addr[lo:hi], w):
            out.append(WriteHostMemory(r, ln, a, w))


def _blocks(total: int, b: int):
    for i0 in range(0, total, b):
        yield i0, min(b, total - i0)


def _emit_input(p: InputPlan, sink: _Sink, out: list) -> None:
    for i0, n in _blocks(p.shape[1] * p.shape[2], p.block):
        for m, w in enumerate(p.widths):
            out.append(ReadHostMemory(p.host_base[m] + i0 * w, 0, n, w))
            sink.emit(out, m, i0, n, 0)


def _emit_conv(p: ConvPlan, cfg: AcceleratorConfig, sink: _Sink, out: list) -> None:
    nk, no, b = p.k_chunks, p.out_chunks, p.block
    used = p.klayout.used
    func = RELU if p.act == "relu" else IDENTITY
    out_row = nk * b
    blocks = list(_blocks(p.positions, b))
    seq = [(o, c) for _ in blocks for o in range(no) for c in range(nk)]

    def tile(t):
        o, c = seq[t]
        return ReadWeights(p.tile_addr + (o * nk + c) * cfg.tile_bytes, 1)

    out.append(tile(0))
    t = 0
    for i0, n in blocks:
        for c in range(nk):
            out.append(ReadHostMemory(p.host_base[c] + i0 * used[c], c * n, n, used[c]))
        for o in range(no):
            for c in range(nk):
                out.append(MatMulConv(c * n, n, 0, accumulate=c > 0, advance_tile=True))
                t += 1
                if t < len(seq):
                    out.append(tile(t))    # prefetch behind this matmul
            out.append(Activate(0, n, func, p.rq, out_row))
            sink.emit(out, o, i0, n, out_row)


def _emit_pool(p: PoolPlan, sink: _Sink, out: list) -> None:
    w2, b = p.window_rows, p.block
    out_row = w2 * b
    func = MaxPool(w2, w2)
    out.append(ReadWeights(0, 1))
    first = True
    for i0, n in _blocks(p.positions, b):
        for m, cm in enumerate(p.widths):
            out.append(ReadHostMemory(p.host_base[m] + i0 * w2 * cm, 0, n * w2, cm))
            out.append(MatMulConv(0, n * w2, 0, accumulate=False, advance_tile=first))
            first = False
            out.append(Activate(0, n * w2, func, POOL_RQ, out_row))
            sink.emit(out, m, i0, n, out_row)


def _out_widths(p) -> list:
    return p.out_widths if isinstance(p, ConvPlan) else p.widths


@dataclass
class CompiledNetwork:
    net: NetworkDesc
    cfg: AcceleratorConfig
    program: Program
    memory_map: MemoryMap
    plans: list
    spans: list                        # instruction range per pass
    host_size: int
    weights: Optional[dict] = None
    dram_image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def input_plan(self) -> InputPlan:
        return self.plans[0]

    @property
    def output_plan(self) -> OutputPlan:
        return self.plans[-1]

    def layer_instructions(self, index: int) -> list:
        """Instructions emitted for layer ``index`` (pass index + 1)."""
        s, e = self.spans[index + 1]
        return self.program.instructions[s:e]

    def host_image(self, x) -> np.ndarray:
        """Initial host memory holding input ``x`` (C, H, W) int8 and bias constants."""
        x = np.asarray(x)
        inp = self.input_plan
        if x.shape != tuple(inp.shape):
            raise CompileError(f"input shape {x.shape} != network input {tuple(inp.shape)}")
        img = np.zeros(self.host_size, np.int8)
        hw = inp.shape[1] * inp.shape[2]
        c0 = 0
        for m, w in enumerate(inp.widths):
            img[inp.host_base[m]:inp.host_base[m] + hw * w] = x[c0:c0 + w].reshape(w, hw).T.ravel()
            c0 += w
        for p in self.plans[1:-1]:
            if isinstance(p, ConvPlan):
                for chunk, lane, const in p.klayout.bias_lanes:
                    u = p.klayout.used[chunk]
                    start = p.host_base[chunk] + lane
                    img[start:start + p.positions * u:u] = const
        return img

    def layer_outputs(self, host_mem) -> list:
        """Every layer's output recovered from the host buffers it was scattered to.

        Returns (values, known) pairs shaped like the layer output; pixels the
        consumer never reads (e.g. skipped by a stride) are marked unknown.
        """
        host_mem = np.asarray(host_mem, dtype=np.int8)
        outs = []
        for producer, consumer in zip(self.plans[1:-1], self.plans[2:]):
            c, h, w = producer.out_shape
            vals = np.zeros((c, h * w), np.int8)
            known = np.zeros((c, h * w), bool)
            c0 = 0
            for (q, a), cm in zip(_dests(consumer), _out_widths(producer)):
                vals[c0:c0 + cm, q] = host_mem[a[:, None] + np.arange(cm)].T
                known[c0:c0 + cm, q] = True
                c0 += cm
            outs.append((vals.reshape(c, h, w), known.reshape(c, h, w)))
        return outs

    def read_output(self, host_mem) -> np.ndarray:
        host_mem = np.asarray(host_mem, dtype=np.int8)
        o = self.output_plan
        c, h, w = o.shape
        out = np.empty((c, h * w), np.int8)
        c0 = 0
        for m, cm in enumerate(o.widths):
            buf = host_mem[o.host_base[m]:o.host_base[m] + h * w * cm]
            out[c0:c0 + cm] = buf.reshape(h * w, cm).T
            c0 += cm
        return out.reshape(c, h, w)


def build_dram_image(plans: list, cfg: AcceleratorConfig, weights: dict) -> np.ndarray:
    """Identity tile (if pooling) followed by every layer's tiles, tile-major."""
    parts = []
    if any(isinstance(p, PoolPlan) for p in plans):
        parts.append(identity_tile(cfg).ravel())
    for p in plans:
        if isinstance(p, ConvPlan):
            lw = weights[p.index]
            try:
                mat = kmatrix(p.klayout, p.conv_weights(lw.weights), lw.bias)
            except ValueError as e:
                raise CompileError(f"layer {p.index}: {e}") from None
            tiles = pack_tiles(mat, cfg)
            assert tiles.size == p.n_tiles * cfg.tile_bytes
            parts.append(tiles.ravel())
    return np.concatenate(parts) if parts else np.zeros(0, np.int8)


def compile(net: NetworkDesc, cfg: AcceleratorConfig, weights: Optional[dict] = None) -> CompiledNetwork:
    """Lower ``net`` to a Program plus memory map and image builders.

    Bias lanes are sized from ``weights``; without weights the program
    assumes zero biases and no DRAM image is built.
    """
    if weights is None and not any(isinstance(l, (Conv2D, FullyConnected)) for l in net.layers):
        weights = {}
    if weights is not None:
        check_weights(net, weights)
    plans, mm = plan(net, cfg, weights)
    out: list = []
    spans = []
    for k, p in enumerate(plans[:-1]):
        sink = _Sink(p.order, _dests(plans[k + 1]), _out_widths(p))
        start = len(out)
        if isinstance(p, InputPlan):
            _emit_input(p, sink, out)
        elif isinstance(p, ConvPlan):
            _emit_conv(p, cfg, sink, out)
        else:
            _emit_pool(p, sink, out)
        spans.append((start, len(out)))
    host_size = mm.host_bits_used // 8
    program = Program(out, name=net.name, config_id=cfg.name)
    dram = build_dram_image(plans, cfg, weights) if weights is not None else None
    return CompiledNetwork(net, cfg, program, mm, plans, spans, host_size, weights, dram)


@dataclass
class LayerLowering:
    """One layer compiled in isolation: the fragment plus its tiling."""
    compiled: CompiledNetwork
    plan: object

    @property
    def instructions(self) -> list:
        return self.compiled.layer_instructions(0)

    @property
    def k_chunks(self) -> int:
        return getattr(self.plan, "k_chunks", 0)

    @property
    def out_chunks(self) -> int:
        return getattr(self.plan, "out_chunks", 0)


def _lower_single(layer, in_shape, cfg, weights) -> LayerLowering:
    net = NetworkDesc(f"{type(layer).__name__.lower()}", tuple(in_shape), (layer,))
    w = None if weights is None else {0: weights}
    cn = compile(net, cfg, w)
    return LayerLowering(cn, cn.plans[1])


def lower_conv(layer: Conv2D, in_shape, cfg: AcceleratorConfig, weights=None) -> LayerLowering:
    return _lower_single(layer, in_shape, cfg, weights)


def lower_fc(layer: FullyConnected, cfg: AcceleratorConfig, in_shape=None, weights=None) -> LayerLowering:
    return _lower_single(layer, in_shape or (layer.in_dim, 1, 1), cfg, weights)


def lower_pool(layer: MaxPool2D, in_shape, cfg: AcceleratorConfig) -> LayerLowering:
    return _lower_single(layer, in_shape, cfg, None)
