"""im2col K-dimension layout and weight-tile packing.

An activation tensor lives as one UB row per pixel per channel chunk of
``chunk_width(cfg)`` channels.  A convolution's im2col row is a sequence of
*slots*, one per (channel chunk, ky, kx), each as wide as its channel chunk.
Slots are packed first-fit into K-chunks of ``mac_rows`` lanes and never
straddle a chunk boundary, so every slot arrives with a single contiguous
write-back.  Optional bias lanes fill the tail of the last chunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..arch import AcceleratorConfig

# bias lane 0 carries the constant 1, the rest the constant 127
BIAS_UNIT = 1
BIAS_STEP = 127
MAX_BIAS_LANES = 4096


class TilingError(ValueError):
    pass


def chunk_width(cfg: AcceleratorConfig) -> int:
    """Channels per UB row; bounded by mac_rows so a slot fits in a K-chunk."""
    return min(cfg.mac_rows, cfg.mac_cols)


def channel_chunks(channels: int, width: int) -> list:
    return [min(width, channels - s) for s in range(0, channels, width)]


def bias_digits(bias) -> tuple:
    """Split int32 biases into per-lane int8 digits.

    Returns (constants, digits) with ``digits`` shaped (lanes, outputs) such
    that ``constants @ digits == bias``.  All-zero biases need no lanes.
    """
    b = np.asarray(bias, dtype=np.int64)
    if not b.any():
        return np.zeros(0, np.int64), np.zeros((0, b.size), np.int8)
    r = np.mod(b, BIAS_STEP)                 # carried by the unit lane, in [0, 126]
    q = (b - r) // BIAS_STEP
    need = np.where(q > 0, -(-q // 127), -(-(-q) // 128))
    extra = int(need.max())
    if 1 + extra > MAX_BIAS_LANES:
        raise TilingError(f"bias magnitude {int(np.abs(b).max())} needs {1 + extra} bias lanes "
                          f"(limit {MAX_BIAS_LANES})")
    digits = np.zeros((1 + extra, b.size), np.int64)
    digits[0] = r
    rem = q.copy()
    for i in range(extra):
        d = np.clip(rem, -128, 127)
        digits[1 + i] = d
        rem -= d
    assert not rem.any()
    consts = np.array([BIAS_UNIT] + [BIAS_STEP] * extra, np.int64)
    return consts, digits.astype(np.int8)


@dataclass(frozen=True)
class Slot:
    m: int       # input channel chunk
    ky: int
    kx: int
    chunk: int   # K-chunk index
    lane: int    # first lane inside the K-chunk
    width: int   # channels carried (= width of chunk m)


@dataclass(frozen=True)
class KLayout:
    lanes: int                 # K lanes per chunk (mac_rows)
    in_chunks: tuple           # channel-chunk widths of the input tensor
    chunk_width: int           # nominal channel-chunk width
    kernel_h: int
    kernel_w: int
    slots: tuple
    used: tuple                # lanes used per K-chunk
    bias_lanes: tuple          # (chunk, lane, constant) per bias lane

    @property
    def n_chunks(self) -> int:
        return len(self.used)

    @property
    def k(self) -> int:
        return sum(self.in_chunks) * self.kernel_h * self.kernel_w

    def slot(self, m: int, ky: int, kx: int) -> Slot:
        return self.slots[(m * self.kernel_h + ky) * self.kernel_w + kx]


def build_klayout(in_ch: int, kernel_h: int, kernel_w: int, cfg: AcceleratorConfig,
                  n_bias_lanes: int = 0) -> KLayout:
    lanes = cfg.mac_rows
    cw = chunk_width(cfg)
    widths = channel_chunks(in_ch, cw)
    slots = []
    used = []
    for m, w in enumerate(widths):
        for ky in range(kernel_h):
            for kx in range(kernel_w):
                if not used or used[-1] + w > lanes:
                    used.append(0)
                slots.append(Slot(m, ky, kx, len(used) - 1, used[-1], w))
                used[-1] += w
    bias = []
    for _ in range(n_bias_lanes):
        if used[-1] >= lanes:
            used.append(0)
        bias.append((len(used) - 1, used[-1]))
        used[-1] += 1
    consts = [BIAS_UNIT] + [BIAS_STEP] * (n_bias_lanes - 1) if n_bias_lanes else []
    return KLayout(lanes, tuple(widths), cw, kernel_h, kernel_w, tuple(slots), tuple(used),
                   tuple((c, l, k) for (c, l), k in zip(bias, consts)))


def kmatrix(layout: KLayout, conv_weights, bias) -> np.ndarray:
    """Weights rearranged to the K layout: shape (n_chunks, lanes, out_ch), int8."""
    w = np.asarray(conv_weights)
    out_ch = w.shape[0]
    mat = np.zeros((layout.n_chunks, layout.lanes, out_ch), np.int8)
    base = np.cumsum((0,) + layout.in_chunks)
    for s in layout.slots:
        c0 = base[s.m]
        mat[s.chunk, s.lane:s.lane + s.width, :] = w[:, c0:c0 + s.width, s.ky, s.kx].T
    consts, digits = bias_digits(bias)
    if len(consts) != len(layout.bias_lanes):
        raise TilingError(f"layout has {len(layout.bias_lanes)} bias lanes, biases need {len(consts)}")
    for (chunk, lane, _), row in zip(layout.bias_lanes, digits):
        mat[chunk, lane, :] = row
    return mat


def pack_tiles(mat: np.ndarray, cfg: AcceleratorConfig) -> np.ndarray:
    """Split a K-layout matrix into (out_chunks, k_chunks, mac_rows, mac_cols) tiles."""
    n_k, lanes, out_ch = mat.shape
    cw = chunk_width(cfg)
    n_o = -(-out_ch // cw)
    tiles = np.zeros((n_o, n_k, lanes, cfg.mac_cols), np.int8)
    for o in range(n_o):
        cols = mat[:, :, o * cw:(o + 1) * cw]
        tiles[o, :, :, :cols.shape[2]] = cols
    return tiles


def identity_tile(cfg: AcceleratorConfig) -> np.ndarray:
    t = np.zeros((cfg.mac_rows, cfg.mac_cols), np.int8)
    t[np.arange(cfg.mac_rows), np.arange(cfg.mac_rows)] = 1
    return t
