"""Memory planning: weight placement, per-layer block sizes and address maps.

Execution is a sequence of *passes*: pass 0 copies the network input into
the activation stream, pass ``i + 1`` runs layer ``i``.  Inside a pass the
layer's output pixels are processed in blocks of ``block`` rows; the UB and
accumulator regions of a pass are only live during that pass.  Every layer
boundary goes through a host-memory buffer laid out the way the consumer
reads it (im2col rows for conv/fc, window-major rows for pooling).

Placement follows a greedy rule: if all weight bits plus the peak per-layer
activation bits fit the on-chip budget, weights are marked resident and a
matching UB reservation is carved out of the top of the unified buffer;
otherwise they stay in DRAM.  In both cases tiles reach the array through
READ_WEIGHTS, the only path into the weight FIFO.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from ..arch import AcceleratorConfig
from .network import NetworkDesc, count_params, infer_shapes
from .plan import CompileError, ConvPlan, InputPlan, OutputPlan, PoolPlan, build_plans

MAX_HOST_BYTES = 1 << 32
MAX_UB_ADDR = 1 << 24
MAX_ACT_ROWS = (1 << 16) - 1

PLACEMENT_ONCHIP = "on-chip"
PLACEMENT_DRAM = "dram-streamed"


@dataclass(frozen=True)
class Region:
    space: str        # "ub", "acc", "host" or "dram"
    name: str
    start: int        # rows for ub/acc, bytes for host/dram
    stop: int
    live: tuple       # (first pass, last pass), inclusive

    @property
    def size(self) -> int:
        return self.stop - self.start

    def overlaps(self, other: "Region") -> bool:
        return (self.space == other.space
                and self.start < other.stop and other.start < self.stop
                and self.live[0] <= other.live[1] and other.live[0] <= self.live[1])


@dataclass(frozen=True)
class OnChip:
    ub_rows: tuple    # (start, stop) of the reserved UB rows
    dram_addr: int    # staged copy that READ_WEIGHTS reads


@dataclass(frozen=True)
class Dram:
    addr: int
    nbytes: int


@dataclass
class LayerMemory:
    index: int
    kind: str
    block: int
    n_blocks: int
    weight: Optional[object] = None      # OnChip | Dram | None
    ub_regions: list = field(default_factory=list)
    acc_regions: list = field(default_factory=list)
    ub_bits: int = 0
    acc_bits: int = 0

    @property
    def streamed(self) -> bool:
        """True when the layer's live set does not fit and is processed in blocks."""
        return self.n_blocks > 1


@dataclass
class MemoryMap:
    config: str
    placement: str
    layers: list = field(default_factory=list)
    host_regions: list = field(default_factory=list)
    dram_regions: list = field(default_factory=list)
    reserved_regions: list = field(default_factory=list)
    weight_bits: int = 0
    peak_activation_bits: int = 0
    onchip_bits_used: int = 0
    dram_bits_used: int = 0
    host_bits_used: int = 0
    onchip_budget_bits: int = 0
    dram_capacity_bits: int = 0

    def regions(self) -> list:
        out = list(self.reserved_regions) + list(self.host_regions) + list(self.dram_regions)
        for lm in self.layers:
            out += lm.ub_regions + lm.acc_regions
        return out

    def overlapping(self) -> list:
        """All pairs of regions that share addresses while both are live."""
        rs = self.regions()
        return [(a, b) for i, a in enumerate(rs) for b in rs[i + 1:] if a.overlaps(b)]

    @property
    def peak_ub_rows(self) -> int:
        used = [r.stop for lm in self.layers for r in lm.ub_regions]
        return max(used, default=0)

    def summary(self) -> str:
        lines = [
            f"config: {self.config}",
            f"placement: {self.placement}",
            f"weight_bits: {self.weight_bits}",
            f"peak_activation_bits: {self.peak_activation_bits}",
            f"onchip_bits_used: {self.onchip_bits_used}",
            f"onchip_budget_bits: {self.onchip_budget_bits}",
            f"dram_bits_used: {self.dram_bits_used}",
            f"host_bits_used: {self.host_bits_used}",
            f"ub_peak_rows: {self.peak_ub_rows}",
        ]
        for lm in self.layers:
            w = lm.weight
            where = ("-" if w is None else
                     f"ub[{w.ub_rows[0]}:{w.ub_rows[1]}]" if isinstance(w, OnChip) else
                     f"dram@{w.addr:#x}")
            lines.append(f"layer {lm.index} {lm.kind}: block={lm.block} blocks={lm.n_blocks} "
                         f"weights={where}")
        return "\n".join(lines) + "\n"


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _activation_bits(net: NetworkDesc) -> int:
    shapes = [net.input_shape] + infer_shapes(net)
    elems = [a[0] * a[1] * a[2] + b[0] * b[1] * b[2] for a, b in zip(shapes, shapes[1:])]
    return max(elems, default=0) * 8


def _pass_costs(p, cfg: AcceleratorConfig) -> tuple:
    """(ub rows per block row, acc rows per block row, block-row limit)."""
    if isinstance(p, InputPlan):
        return 1, 0, p.shape[1] * p.shape[2]
    if isinstance(p, ConvPlan):
        return p.k_chunks + 1, 1, min(p.positions, cfg.acc_rows, MAX_ACT_ROWS)
    if isinstance(p, PoolPlan):
        w2 = p.window_rows
        return w2 + 1, w2, min(p.positions, cfg.acc_rows // w2, MAX_ACT_ROWS // w2)
    raise TypeError(p)


def _size_blocks(plans: list, cfg: AcceleratorConfig, ub_avail: int, bits_avail: int) -> Optional[list]:
    """Largest block per pass under the UB/acc/bit limits, or None if any pass has none."""
    ubw_bits = cfg.ub_width * 8
    accw_bits = cfg.acc_width * 32
    blocks = []
    for p in plans[:-1]:
        ub_per, acc_per, limit = _pass_costs(p, cfg)
        per_bits = ub_per * ubw_bits + acc_per * accw_bits
        b = min(limit, ub_avail // ub_per, max(bits_avail, 0) // per_bits)
        if b < 1:
            return None
        blocks.append(b)
    return blocks


def _diagnose(plans: list, cfg: AcceleratorConfig, ub_avail: int, bits_avail: int) -> str:
    ubw_bits = cfg.ub_width * 8
    accw_bits = cfg.acc_width * 32
    for p in plans[:-1]:
        ub_per, acc_per, limit = _pass_costs(p, cfg)
        per_bits = ub_per * ubw_bits + acc_per * accw_bits
        if limit < 1 or ub_per > ub_avail or per_bits > bits_avail:
            what = "input" if isinstance(p, InputPlan) else f"layer {p.index} ({p.kind})"
            return (f"{what} needs {ub_per} UB rows + {acc_per} accumulator rows "
                    f"({per_bits} bits) per output row; available: {ub_avail} UB rows, "
                    f"{cfg.acc_rows} accumulator rows, {bits_avail} bits of on-chip budget")
    return "no feasible tiling"


def plan(net: NetworkDesc, cfg: AcceleratorConfig, weights: Optional[dict] = None) -> tuple:
    """Full planning pass; returns (plans, MemoryMap) with addresses filled in."""
    plans = build_plans(net, cfg, weights)
    if cfg.ub_rows > MAX_UB_ADDR:
        raise CompileError(f"ub_rows={cfg.ub_rows} exceeds the 24-bit row address space")
    layer_plans = plans[1:-1]
    conv_plans = [p for p in layer_plans if isinstance(p, ConvPlan)]
    has_pool = any(isinstance(p, PoolPlan) for p in layer_plans)

    # DRAM image: identity tile (pooling), then each layer's tiles tile-major
    addr = 0
    dram_regions = []
    ident = None
    if has_pool:
        ident = Region("dram", "identity", 0, cfg.tile_bytes, (0, len(plans) - 1))
        dram_regions.append(ident)
        addr = cfg.tile_bytes
    weight_image_bytes = 0
    for p in conv_plans:
        p.tile_addr = addr
        n = p.n_tiles * cfg.tile_bytes
        dram_regions.append(Region("dram", f"layer{p.index}.tiles", addr, addr + n, (0, len(plans) - 1)))
        addr += n
        weight_image_bytes += n
    dram_bytes = addr

    _, total_params = count_params(net)
    weight_bits = total_params * 8
    peak_act = _activation_bits(net)
    fifo_bits = cfg.fifo_bits if layer_plans else 0
    ub_cap = min(cfg.ub_rows, MAX_UB_ADDR)

    onchip = False
    blocks = None
    reserve_rows = 0
    if layer_plans and weight_bits + peak_act <= cfg.onchip_budget_bits:
        reserve_rows = _ceil_div(weight_image_bytes, cfg.ub_width)
        if reserve_rows < ub_cap:
            bits = cfg.onchip_budget_bits - fifo_bits - reserve_rows * cfg.ub_width * 8
            blocks = _size_blocks(plans, cfg, ub_cap - reserve_rows, bits)
            onchip = blocks is not None
    if not onchip:
        reserve_rows = 0
        bits = cfg.onchip_budget_bits - fifo_bits
        blocks = _size_blocks(plans, cfg, ub_cap, bits)
        if blocks is None:
            raise CompileError("capacity: " + _diagnose(plans, cfg, ub_cap, bits))

    placement = PLACEMENT_ONCHIP if onchip else PLACEMENT_DRAM
    last_pass = len(plans) - 2
    reserved = []
    if reserve_rows:
        reserved.append(Region("ub", "weights", ub_cap - reserve_rows, ub_cap, (0, last_pass)))

    # host buffers: each consumer's input layout, allocated in pass order
    host_regions = []
    haddr = 0

    def alloc(name, nbytes, live):
        nonlocal haddr
        r = Region("host", name, haddr, haddr + nbytes, live)
        host_regions.append(r)
        haddr += nbytes
        return r.start

    inp = plans[0]
    hw = inp.shape[1] * inp.shape[2]
    inp.host_base = [alloc(f"input.c{m}", hw * w, (0, 0)) for m, w in enumerate(inp.widths)]
    for k, p in enumerate(layer_plans, start=1):
        live = (k - 1, k)
        if isinstance(p, ConvPlan):
            p.host_base = [alloc(f"layer{p.index}.im2col.k{c}", p.positions * u, live)
                           for c, u in enumerate(p.klayout.used)]
        else:
            p.host_base = [alloc(f"layer{p.index}.windows.c{m}", p.positions * p.window_rows * w, live)
                           for m, w in enumerate(p.widths)]
    out = plans[-1]
    ohw = out.shape[1] * out.shape[2]
    out.host_base = [alloc(f"output.c{m}", ohw * w, (last_pass, last_pass + 1))
                     for m, w in enumerate(out.widths)]
    if haddr > MAX_HOST_BYTES:
        raise CompileError(f"capacity: host buffers need {haddr} bytes, beyond the 32-bit host address space")

    # per-pass regions
    layers = []
    peak_pass_bits = 0
    rbase = ub_cap - reserve_rows
    wcursor = rbase
    for k, (p, b) in enumerate(zip(plans[:-1], blocks)):
        p.block = b
        ub_per, acc_per, limit = _pass_costs(p, cfg)
        if isinstance(p, InputPlan):
            if not layer_plans:
                continue
            ubr = [Region("ub", "input.stage", 0, b, (k, k))]
            accr = []
        elif isinstance(p, ConvPlan):
            nk = p.k_chunks
            ubr = [Region("ub", f"layer{p.index}.stage", 0, nk * b, (k, k)),
                   Region("ub", f"layer{p.index}.out", nk * b, (nk + 1) * b, (k, k))]
            accr = [Region("acc", f"layer{p.index}.acc", 0, b, (k, k))]
        else:
            w2 = p.window_rows
            ubr = [Region("ub", f"layer{p.index}.stage", 0, w2 * b, (k, k)),
                   Region("ub", f"layer{p.index}.out", w2 * b, (w2 + 1) * b, (k, k))]
            accr = [Region("acc", f"layer{p.index}.acc", 0, w2 * b, (k, k))]
        ub_bits = ub_per * b * cfg.ub_width * 8
        acc_bits = acc_per * b * cfg.acc_width * 32
        peak_pass_bits = max(peak_pass_bits, ub_bits + acc_bits)
        if isinstance(p, InputPlan):
            continue
        weight = None
        if isinstance(p, ConvPlan):
            n = p.n_tiles * cfg.tile_bytes
            if onchip:
                rows = _ceil_div(n, cfg.ub_width)
                weight = OnChip((wcursor, wcursor + rows), p.tile_addr)
                wcursor += rows
                p.onchip = True
            else:
                weight = Dram(p.tile_addr, n)
        layers.append(LayerMemory(p.index, p.kind, b, _ceil_div(limit_positions(p), b), weight,
                                  ubr, accr, ub_bits, acc_bits))

    host_bytes = haddr
    mm = MemoryMap(
        config=cfg.name,
        placement=placement if layer_plans else PLACEMENT_ONCHIP,
        layers=layers,
        host_regions=host_regions,
        dram_regions=dram_regions,
        reserved_regions=reserved,
        weight_bits=weight_bits,
        peak_activation_bits=peak_act,
        onchip_bits_used=(reserve_rows * cfg.ub_width * 8 + peak_pass_bits + fifo_bits) if layer_plans else 0,
        dram_bits_used=dram_bytes * 8,
        host_bits_used=host_bytes * 8,
        onchip_budget_bits=cfg.onchip_budget_bits,
        dram_capacity_bits=cfg.dram_capacity_bits,
    )
    if mm.dram_bits_used + mm.host_bits_used > cfg.dram_capacity_bits:
        raise CompileError(f"capacity: DRAM image ({mm.dram_bits_used} bits) plus host buffers "
                           f"({mm.host_bits_used} bits) exceed {cfg.dram_capacity_bits} bits")
    return plans, mm


def limit_positions(p) -> int:
    if isinstance(p, InputPlan):
        return p.shape[1] * p.shape[2]
    return p.positions


def plan_memory(net: NetworkDesc, cfg: AcceleratorConfig, weights: Optional[dict] = None) -> MemoryMap:
    """Weight placement and buffer map for ``net``; raises CompileError if infeasible."""
    return plan(net, cfg, weights)[1]
