"""Compile-and-simulate helpers and simulator-vs-golden comparison."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import golden, sim
from .arch import AcceleratorConfig
from .compiler import CompiledNetwork, NetworkDesc, compile


@dataclass
class Divergence:
    layer: int            # -1 for the final output when no layer tap differs
    index: tuple          # (channel, y, x)
    sim_value: int
    ref_value: int

    def __str__(self) -> str:
        where = "output" if self.layer < 0 else f"layer {self.layer}"
        return (f"first divergence at {where} index {self.index}: "
                f"simulator={self.sim_value} golden={self.ref_value}")


@dataclass
class VerifyResult:
    ok: bool
    output: np.ndarray
    reference: np.ndarray
    report: sim.PerfReport
    divergence: Optional[Divergence] = None


def run_compiled(cn: CompiledNetwork, x, dram_image=None):
    """Simulate one input; returns (output tensor, PerfReport, MachineState)."""
    dram = cn.dram_image if dram_image is None else dram_image
    state, report = sim.run(cn.program, cn.cfg, cn.host_image(x), dram)
    return cn.read_output(state.host_mem), report, state


def run_network(net: NetworkDesc, weights: dict, x, cfg: AcceleratorConfig):
    return run_compiled(compile(net, cfg, weights), x)


def first_divergence(cn: CompiledNetwork, host_mem, ref_trace: list, output: np.ndarray,
                     reference: np.ndarray) -> Optional[Divergence]:
    for i, ((vals, known), ref) in enumerate(zip(cn.layer_outputs(host_mem), ref_trace)):
        bad = known & (vals != ref.array())
        if bad.any():
            idx = tuple(int(v) for v in np.argwhere(bad)[0])
            return Divergence(i, idx, int(vals[idx]), int(ref.array()[idx]))
    bad = output != reference
    if bad.any():
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        return Divergence(-1, idx, int(output[idx]), int(reference[idx]))
    return None


def verify(net: NetworkDesc, weights: dict, x, cfg: AcceleratorConfig,
           compiled: Optional[CompiledNetwork] = None, dram_image=None) -> VerifyResult:
    """Run simulator and golden model on ``x`` and compare elementwise.

    ``dram_image`` overrides the weights image the simulator sees, which is
    how a corrupted weights file is exercised against clean golden weights.
    """
    cn = compiled or compile(net, cfg, weights)
    out, report, state = run_compiled(cn, x, dram_image)
    ref, trace = golden.run_network_ref(net, x, weights, trace=True)
    refa = ref.array()
    if np.array_equal(out, refa):
        return VerifyResult(True, out, refa, report)
    div = first_divergence(cn, state.host_mem, trace, out, refa)
    return VerifyResult(False, out, refa, report, div)
