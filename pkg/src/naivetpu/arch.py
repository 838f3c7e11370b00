"""Architectural state and bit-exact datapath semantics of the NaiveTPU.

Storage: an int8 unified buffer (UB), a weight FIFO of int8 tiles feeding a
weight-stationary MAC array, int32 accumulators and a post-processor that
applies activation/pooling plus 32->8 bit requantization.  Nothing here
knows about time; cycle accounting lives in :mod:`naivetpu.sim`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .isa import ActFunc, Identity, MaxPool, ReLU, RequantParams

__all__ = [
    "AcceleratorConfig", "MachineState", "RequantParams", "PRESETS", "preset",
    "new_state", "push_weight_tile", "advance_tile", "systolic_matmul",
    "requantize", "requantize_array", "post_process", "read_host_memory",
    "write_host_memory", "read_weights", "wrap_int32",
]

INT8_MIN, INT8_MAX = -128, 127
DDR_8GBIT = 8 * 2**30


class ConfigError(ValueError):
    pass


class ArchError(RuntimeError):
    """Datapath fault (range violation, FIFO misuse, ...)."""


class FifoFullError(ArchError):
    pass


class FifoUnderflowError(ArchError):
    pass


class NoTileError(ArchError):
    pass


class RangeError(ArchError):
    pass


class PoolAlignmentError(ArchError):
    pass


@dataclass(frozen=True)
class AcceleratorConfig:
    name: str
    mac_rows: int
    mac_cols: int
    ub_rows: int
    acc_rows: int
    weight_fifo_tiles: int = 4
    host_bw: int = 8          # bytes/cycle, host <-> UB
    dram_bw: int = 8          # bytes/cycle, DRAM -> weight FIFO
    dram_latency: int = 32    # cycles per DRAM transaction
    onchip_budget_bits: int = 4_900_000
    dram_capacity_bits: int = DDR_8GBIT

    def __post_init__(self):
        for f in ("mac_rows", "mac_cols", "ub_rows", "acc_rows", "weight_fifo_tiles",
                  "host_bw", "dram_bw"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{f} must be a positive integer, got {v!r}")
        for f in ("dram_latency", "onchip_budget_bits", "dram_capacity_bits"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise ConfigError(f"{f} must be a non-negative integer, got {v!r}")
        # a UB entry feeds mac_rows array inputs out of its mac_cols lanes
        if self.mac_rows > self.mac_cols:
            raise ConfigError("mac_rows must not exceed mac_cols (UB width)")

    @property
    def ub_width(self) -> int:
        return self.mac_cols

    @property
    def acc_width(self) -> int:
        return self.mac_cols

    @property
    def tile_bytes(self) -> int:
        return self.mac_rows * self.mac_cols

    @property
    def ub_bits(self) -> int:
        return self.ub_rows * self.ub_width * 8

    @property
    def acc_bits(self) -> int:
        return self.acc_rows * self.acc_width * 32

    @property
    def fifo_bits(self) -> int:
        return self.weight_fifo_tiles * self.tile_bytes * 8

    def replace(self, **changes) -> "AcceleratorConfig":
        return replace(self, **changes)


PRESETS = {
    # 32x32 course design sized for the AX7020 BRAM budget
    "naivetpu": AcceleratorConfig("naivetpu", 32, 32, ub_rows=16 * 1024, acc_rows=4 * 1024),
    # datacenter TPU geometry; on-chip budget = its own UB + accumulators
    "googletpu": AcceleratorConfig(
        "googletpu", 256, 256, ub_rows=96 * 1024, acc_rows=4 * 1024,
        host_bw=32, dram_bw=32,
        onchip_budget_bits=96 * 1024 * 256 * 8 + 4 * 1024 * 256 * 32,
    ),
    # the board itself: 4.9 Mb BRAM, 8 Gbit DDR3, carrying the NaiveTPU datapath
    "ax7020": AcceleratorConfig("ax7020", 32, 32, ub_rows=16 * 1024, acc_rows=4 * 1024),
}


def preset(name: str) -> AcceleratorConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown config preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class MachineState:
    cfg: AcceleratorConfig
    ub: np.ndarray
    acc: np.ndarray
    weight_fifo: deque = field(default_factory=deque)
    loaded_tile: Optional[np.ndarray] = None
    host_mem: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    dram: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))

    def snapshot(self) -> dict:
        """Copy of every storage, for equality checks between runs."""
        return {
            "ub": self.ub.copy(),
            "acc": self.acc.copy(),
            "weight_fifo": [t.copy() for t in self.weight_fifo],
            "loaded_tile": None if self.loaded_tile is None else self.loaded_tile.copy(),
            "host_mem": self.host_mem.copy(),
            "dram": self.dram.copy(),
        }


def _as_store(image) -> np.ndarray:
    if image is None:
        return np.zeros(0, np.int8)
    if isinstance(image, np.ndarray):
        return image.astype(np.int8, copy=True).ravel()
    return np.frombuffer(bytes(image), dtype=np.int8).copy()


def new_state(cfg: AcceleratorConfig, host_image=None, dram_image=None) -> MachineState:
    if not isinstance(cfg, AcceleratorConfig):
        raise ConfigError(f"expected AcceleratorConfig, got {type(cfg).__name__}")
    return MachineState(
        cfg=cfg,
        ub=np.zeros((cfg.ub_rows, cfg.mac_cols), np.int8),
        acc=np.zeros((cfg.acc_rows, cfg.mac_cols), np.int32),
        host_mem=_as_store(host_image),
        dram=_as_store(dram_image),
    )


def wrap_int32(a) -> np.ndarray:
    """Reduce integer values to two's-complement 32-bit."""
    a = np.asarray(a, dtype=np.int64)
    return ((a + (1 << 31)) & 0xFFFFFFFF).astype(np.int64) - (1 << 31)


def _check_rows(what: str, start: int, count: int, limit: int) -> None:
    if start < 0 or count < 1 or start + count > limit:
        raise RangeError(f"{what} rows [{start}, {start + count}) outside [0, {limit})")


# ---------------------------------------------------------------------------
# Weight FIFO
# ---------------------------------------------------------------------------


def push_weight_tile(state: MachineState, tile) -> None:
    cfg = state.cfg
    if len(state.weight_fifo) >= cfg.weight_fifo_tiles:
        raise FifoFullError(f"weight FIFO full ({cfg.weight_fifo_tiles} tiles)")
    tile = np.asarray(tile)
    if tile.shape != (cfg.mac_rows, cfg.mac_cols):
        raise RangeError(f"weight tile shape {tile.shape} != {(cfg.mac_rows, cfg.mac_cols)}")
    state.weight_fifo.append(tile.astype(np.int8, copy=True))


def advance_tile(state: MachineState) -> np.ndarray:
    if not state.weight_fifo:
        raise FifoUnderflowError("weight FIFO underflow")
    state.loaded_tile = state.weight_fifo.popleft()
    return state.loaded_tile


# ---------------------------------------------------------------------------
# MAC array
# ---------------------------------------------------------------------------


def systolic_matmul(state: MachineState, ub_row: int, num_rows: int, acc_row: int,
                    accumulate: bool) -> None:
    """acc[acc_row+n][j] (+)= sum_i ub[ub_row+n][i] * tile[i][j], 32-bit wrapping."""
    cfg = state.cfg
    if state.loaded_tile is None:
        raise NoTileError("no weight tile loaded in the MAC array")
    _check_rows("UB", ub_row, num_rows, cfg.ub_rows)
    _check_rows("accumulator", acc_row, num_rows, cfg.acc_rows)
    # float64 products/sums are exact here: |sum| <= mac_rows * 2**14 < 2**53
    x = state.ub[ub_row:ub_row + num_rows, :cfg.mac_rows].astype(np.float64)
    p = (x @ state.loaded_tile.astype(np.float64)).astype(np.int64)
    dst = state.acc[acc_row:acc_row + num_rows]
    if accumulate:
        p = p + dst
    dst[...] = wrap_int32(p)


# ---------------------------------------------------------------------------
# Requantization and post-processing
# ---------------------------------------------------------------------------


def requantize(v: int, rq: RequantParams) -> int:
    t = int(v) * rq.multiplier
    if rq.shift:
        half = 1 << (rq.shift - 1)
        r = (abs(t) + half) >> rq.shift
        t = -r if t < 0 else r
    return max(INT8_MIN, min(INT8_MAX, t))


def requantize_array(v, rq: RequantParams) -> np.ndarray:
    """Element-wise :func:`requantize` on int32-range values."""
    t = np.asarray(v, dtype=np.int64) * np.int64(rq.multiplier)
    if rq.shift:
        half = np.int64(1 << (rq.shift - 1))
        r = (np.abs(t) + half) >> np.int64(rq.shift)
        t = np.where(t < 0, -r, r)
    return np.clip(t, INT8_MIN, INT8_MAX).astype(np.int8)


def pool_output_rows(num_rows: int, window: int, stride: int) -> int:
    if window < 1 or stride < 1 or num_rows < window or (num_rows - window) % stride:
        raise PoolAlignmentError(
            f"max-pool window={window} stride={stride} does not tile {num_rows} rows")
    return (num_rows - window) // stride + 1


def post_process(state: MachineState, acc_row: int, num_rows: int, func: ActFunc,
                 rq: RequantParams, ub_dest_row: int) -> int:
    """Apply ``func`` + requantization to accumulator rows; returns rows written."""
    cfg = state.cfg
    _check_rows("accumulator", acc_row, num_rows, cfg.acc_rows)
    src = state.acc[acc_row:acc_row + num_rows]
    if isinstance(func, MaxPool):
        out_rows = pool_output_rows(num_rows, func.window, func.stride)
        _check_rows("UB", ub_dest_row, out_rows, cfg.ub_rows)
        starts = np.arange(out_rows) * func.stride
        idx = starts[:, None] + np.arange(func.window)[None, :]
        vals = src[idx].max(axis=1)
    elif isinstance(func, ReLU):
        out_rows = num_rows
        _check_rows("UB", ub_dest_row, out_rows, cfg.ub_rows)
        vals = np.maximum(src, 0)
    elif isinstance(func, Identity):
        out_rows = num_rows
        _check_rows("UB", ub_dest_row, out_rows, cfg.ub_rows)
        vals = src
    else:
        raise ArchError(f"unknown activation function {func!r}")
    state.ub[ub_dest_row:ub_dest_row + out_rows] = requantize_array(vals, rq)
    return out_rows


# ---------------------------------------------------------------------------
# Host / DRAM transfers
# ---------------------------------------------------------------------------


def _check_span(what: str, addr: int, nbytes: int, size: int) -> None:
    if addr < 0 or addr + nbytes > size:
        raise RangeError(f"{what} bytes [{addr}, {addr + nbytes}) outside [0, {size})")


def _check_lanes(valid_lanes: int, cfg: AcceleratorConfig) -> None:
    if not 1 <= valid_lanes <= cfg.mac_cols:
        raise RangeError(f"valid_lanes={valid_lanes} outside [1, {cfg.mac_cols}]")


def read_host_memory(state: MachineState, host_addr: int, ub_row: int, num_rows: int,
                     valid_lanes: int) -> None:
    cfg = state.cfg
    _check_lanes(valid_lanes, cfg)
    _check_rows("UB", ub_row, num_rows, cfg.ub_rows)
    nbytes = num_rows * valid_lanes
    _check_span("host memory", host_addr, nbytes, state.host_mem.size)
    dst = state.ub[ub_row:ub_row + num_rows]
    dst[:, :valid_lanes] = state.host_mem[host_addr:host_addr + nbytes].reshape(num_rows, valid_lanes)
    dst[:, valid_lanes:] = 0


def write_host_memory(state: MachineState, ub_row: int, num_rows: int, host_addr: int,
                      valid_lanes: int) -> None:
    cfg = state.cfg
    _check_lanes(valid_lanes, cfg)
    _check_rows("UB", ub_row, num_rows, cfg.ub_rows)
    nbytes = num_rows * valid_lanes
    _check_span("host memory", host_addr, nbytes, state.host_mem.size)
    state.host_mem[host_addr:host_addr + nbytes] = state.ub[ub_row:ub_row + num_rows, :valid_lanes].ravel()


def read_weights(state: MachineState, dram_addr: int, num_tiles: int) -> None:
    cfg = state.cfg
    if len(state.weight_fifo) + num_tiles > cfg.weight_fifo_tiles:
        raise FifoFullError(
            f"weight FIFO overflow: {len(state.weight_fifo)} queued + {num_tiles} > "
            f"{cfg.weight_fifo_tiles} tiles")
    nbytes = num_tiles * cfg.tile_bytes
    _check_span("DRAM", dram_addr, nbytes, state.dram.size)
    tiles = state.dram[dram_addr:dram_addr + nbytes].reshape(num_tiles, cfg.mac_rows, cfg.mac_cols)
    for t in tiles:
        push_weight_tile(state, t)
