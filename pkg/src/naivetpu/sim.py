"""Program execution under the dataflow FSM with analytic, transaction-level timing.

Timing model
------------
Instructions retire in order and block, with one exception: a READ_WEIGHTS
that directly follows a MATMUL_CONV is a prefetch.  Its DRAM transfer is
issued on the weight DMA channel when that MATMUL_CONV started, so it
overlaps the computation; it retires at zero cost and its tiles carry a
ready time.  A later MATMUL_CONV that pops a tile which has not arrived yet
stalls until it does (``stall_cycles_weight_fifo``).  Every other
READ_WEIGHTS is a blocking data-preparation transfer.

Hence ``total_cycles == sum(cycles_by_opcode) + stall_cycles_weight_fifo``.
"""

from __future__ import annotations

import copy
import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from . import arch
from .arch import AcceleratorConfig, ArchError, MachineState
from .isa import (MNEMONICS, Activate, Instruction, MatMulConv, Program, ReadHostMemory,
                  ReadWeights, WriteHostMemory)

POSTPROCESS_DEPTH = 4
OPCODE_NAMES = tuple(MNEMONICS.values())


class Phase(enum.Enum):
    DATA_PREP = "DataPrep"
    ROW_READY = "RowReady"
    COMPUTE = "Compute"
    POST_PROCESS = "PostProcess"
    WRITE_BACK = "WriteBack"
    DONE = "Done"


# the phases each instruction class passes through, in order
PHASE_PATH = {
    ReadHostMemory: (Phase.DATA_PREP,),
    ReadWeights: (Phase.DATA_PREP,),
    MatMulConv: (Phase.ROW_READY, Phase.COMPUTE),
    Activate: (Phase.POST_PROCESS,),
    WriteHostMemory: (Phase.WRITE_BACK,),
}

_ENTRY = {Phase.DATA_PREP, Phase.ROW_READY, Phase.POST_PROCESS, Phase.WRITE_BACK, Phase.DONE}
FSM_TRANSITIONS = {
    Phase.DATA_PREP: _ENTRY,
    Phase.ROW_READY: {Phase.COMPUTE},
    Phase.COMPUTE: _ENTRY,
    Phase.POST_PROCESS: _ENTRY,
    Phase.WRITE_BACK: _ENTRY,
    Phase.DONE: set(),
}


@dataclass(frozen=True)
class ExecState:
    phase: Phase
    pc: int


CSV_COLUMNS = (
    "config", "total_cycles",
    *(f"cycles_{name.lower()}" for name in OPCODE_NAMES),
    "stall_cycles_weight_fifo", "mac_ops", "mac_utilization",
    "host_bytes_read", "host_bytes_written", "dram_bytes_read", "dram_bytes_written",
    "instructions",
)


@dataclass
class PerfReport:
    config: str
    mac_rows: int
    mac_cols: int
    total_cycles: int = 0
    cycles_by_opcode: dict = field(default_factory=lambda: dict.fromkeys(OPCODE_NAMES, 0))
    stall_cycles_weight_fifo: int = 0
    mac_ops: int = 0
    host_bytes_read: int = 0
    host_bytes_written: int = 0
    dram_bytes_read: int = 0
    dram_bytes_written: int = 0
    instructions: int = 0

    @property
    def mac_utilization(self) -> float:
        if self.total_cycles == 0:
            return 0.0
        return self.mac_ops / (self.total_cycles * self.mac_rows * self.mac_cols)

    def as_dict(self) -> dict:
        d = {"config": self.config, "total_cycles": self.total_cycles}
        for name in OPCODE_NAMES:
            d[f"cycles_{name.lower()}"] = self.cycles_by_opcode[name]
        d.update(
            stall_cycles_weight_fifo=self.stall_cycles_weight_fifo,
            mac_ops=self.mac_ops,
            mac_utilization=f"{self.mac_utilization:.6f}",
            host_bytes_read=self.host_bytes_read,
            host_bytes_written=self.host_bytes_written,
            dram_bytes_read=self.dram_bytes_read,
            dram_bytes_written=self.dram_bytes_written,
            instructions=self.instructions,
        )
        return d

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.as_dict().items())

    def to_csv_row(self) -> str:
        d = self.as_dict()
        return ",".join(str(d[c]) for c in CSV_COLUMNS)

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_COLUMNS)


class SimulationError(RuntimeError):
    def __init__(self, message: str, pc: int, report: PerfReport, state: MachineState):
        super().__init__(message)
        self.pc = pc
        self.report = report
        self.state = state


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def cycle_cost(inst: Instruction, cfg: AcceleratorConfig) -> int:
    if isinstance(inst, (ReadHostMemory, WriteHostMemory)):
        return _ceil_div(inst.num_rows * inst.valid_lanes, cfg.host_bw)
    if isinstance(inst, ReadWeights):
        return cfg.dram_latency + _ceil_div(inst.num_tiles * cfg.tile_bytes, cfg.dram_bw)
    if isinstance(inst, MatMulConv):
        fill = inst.num_rows + cfg.mac_rows + cfg.mac_cols - 1
        return fill + (cfg.mac_rows if inst.advance_tile else 0)
    if isinstance(inst, Activate):
        return inst.num_rows + POSTPROCESS_DEPTH
    raise TypeError(f"not an instruction: {inst!r}")


class Simulator:
    """Single-owner execution context: machine state, clock and counters."""

    def __init__(self, program: Program, cfg: AcceleratorConfig, host_image=None,
                 dram_image=None, trace: bool = False):
        self.program = program
        self.cfg = cfg
        self.state = arch.new_state(cfg, host_image, dram_image)
        self.report = PerfReport(cfg.name, cfg.mac_rows, cfg.mac_cols)
        self.exec = self._entry(0)
        self.now = 0
        self.trace: Optional[list] = [] if trace else None
        self._dma_free = 0
        self._tile_ready: deque = deque()
        self._last_mm_start: Optional[int] = None
        self._dispatch = {
            ReadHostMemory: self._read_host,
            ReadWeights: self._read_weights,
            MatMulConv: self._matmul,
            Activate: self._activate,
            WriteHostMemory: self._write_host,
        }

    def _entry(self, pc: int) -> ExecState:
        if pc >= len(self.program.instructions):
            return ExecState(Phase.DONE, pc)
        return ExecState(PHASE_PATH[type(self.program.instructions[pc])][0], pc)

    def _charge(self, inst, cycles: int) -> None:
        self.report.cycles_by_opcode[MNEMONICS[type(inst)]] += cycles
        self.now += cycles

    # -- per-opcode semantics + timing --------------------------------------

    def _read_host(self, inst: ReadHostMemory) -> None:
        arch.read_host_memory(self.state, inst.host_addr, inst.ub_row, inst.num_rows, inst.valid_lanes)
        self.report.host_bytes_read += inst.num_rows * inst.valid_lanes
        self._charge(inst, cycle_cost(inst, self.cfg))

    def _write_host(self, inst: WriteHostMemory) -> None:
        arch.write_host_memory(self.state, inst.ub_row, inst.num_rows, inst.host_addr, inst.valid_lanes)
        self.report.host_bytes_written += inst.num_rows * inst.valid_lanes
        self._charge(inst, cycle_cost(inst, self.cfg))

    def _read_weights(self, inst: ReadWeights, prefetch: bool) -> None:
        arch.read_weights(self.state, inst.dram_addr, inst.num_tiles)
        issue = self._last_mm_start if prefetch else self.now
        start = max(issue, self._dma_free)
        done = start + cycle_cost(inst, self.cfg)
        self._dma_free = done
        self._tile_ready.extend([done] * inst.num_tiles)
        self.report.dram_bytes_read += inst.num_tiles * self.cfg.tile_bytes
        if not prefetch:
            self._charge(inst, done - self.now)

    def _matmul(self, inst: MatMulConv) -> None:
        state = self.state
        if inst.advance_tile:
            if not state.weight_fifo:
                raise arch.FifoUnderflowError("weight FIFO underflow")
            ready = self._tile_ready[0]
            if ready > self.now:
                self.report.stall_cycles_weight_fifo += ready - self.now
                self.now = ready
            arch.advance_tile(state)
            self._tile_ready.popleft()
        elif state.loaded_tile is None:
            raise arch.NoTileError("no weight tile loaded in the MAC array")
        arch.systolic_matmul(state, inst.ub_row, inst.num_rows, inst.acc_row, inst.accumulate)
        self.report.mac_ops += inst.num_rows * self.cfg.tile_bytes
        self._last_mm_start = self.now
        self._charge(inst, cycle_cost(inst, self.cfg))

    def _activate(self, inst: Activate) -> None:
        arch.post_process(self.state, inst.acc_row, inst.num_rows, inst.func, inst.requant,
                          inst.ub_dest_row)
        self._charge(inst, cycle_cost(inst, self.cfg))

    # -- FSM ------------------------------------------------------------------

    def step(self) -> ExecState:
        ex = self.exec
        if ex.phase is Phase.DONE:
            raise RuntimeError("step() on a finished program")
        insts = self.program.instructions
        inst = insts[ex.pc]
        cls = type(inst)
        try:
            if cls is ReadWeights:
                prev = insts[ex.pc - 1] if ex.pc else None
                self._read_weights(inst, prefetch=type(prev) is MatMulConv)
            else:
                self._dispatch[cls](inst)
        except ArchError as e:
            self.report.total_cycles = self.now
            raise SimulationError(f"{e} at pc {ex.pc}", ex.pc, copy.deepcopy(self.report),
                                  self.state) from e
        if self.trace is not None:
            self.trace.extend(PHASE_PATH[cls])
        self.report.instructions += 1
        self.report.total_cycles = self.now
        self.exec = self._entry(ex.pc + 1)
        if self.trace is not None and self.exec.phase is Phase.DONE:
            self.trace.append(Phase.DONE)
        return self.exec

    def run(self) -> PerfReport:
        if self.trace is not None and self.exec.phase is Phase.DONE and not self.trace:
            self.trace.append(Phase.DONE)
        while self.exec.phase is not Phase.DONE:
            self.step()
        return self.report


def step(sim: Simulator) -> ExecState:
    return sim.step()


def run(program: Program, cfg: AcceleratorConfig, host_image=None, dram_image=None):
    """Execute ``program`` to completion; returns (MachineState, PerfReport)."""
    sim = Simulator(program, cfg, host_image, dram_image)
    report = sim.run()
    return sim.state, report
