"""``ntpu`` command line: compile, run, verify, check-capacity, disasm and helpers.

Exit status: 0 success, 1 verification failure, 2 usage or parse error,
3 capacity, compile or simulation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import golden, isa, runner, sim
from .arch import PRESETS, AcceleratorConfig, ConfigError, preset
from .compiler import (CompileError, NetworkError, TilingError, WeightsError, compile, count_params,
                       load_network, plan_memory, read_weights, save_network, write_weights)
from .compiler.network import has_weights, infer_shapes

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE, EXIT_CAPACITY = 0, 1, 2, 3


class UsageError(Exception):
    """Bad arguments or unreadable input files (exit status 2)."""


# ---------------------------------------------------------------------------
# Manifest pieces
# ---------------------------------------------------------------------------


def load_config(spec: str) -> AcceleratorConfig:
    """Preset name, or a JSON file of field overrides with an optional ``base`` preset."""
    if spec in PRESETS:
        return preset(spec)
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"unknown config {spec!r}: not a preset ({', '.join(sorted(PRESETS))}) "
                         "or a readable file")
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"config {spec}: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config {spec}: expected a JSON object")
    base = preset(data.pop("base", "naivetpu"))
    data.setdefault("name", path.stem)
    known = {f.name for f in dataclasses.fields(AcceleratorConfig)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"config {spec}: unknown fields {sorted(unknown)}")
    try:
        return base.replace(**data)
    except (ConfigError, TypeError) as e:
        raise UsageError(f"config {spec}: {e}") from None


def _network(path: str):
    if not os.path.isfile(path):
        raise UsageError(f"network file not found: {path}")
    return load_network(path)


def _weights(args, net) -> dict:
    if getattr(args, "weights", None):
        if not os.path.isfile(args.weights):
            raise UsageError(f"weights file not found: {args.weights}")
        return read_weights(args.weights, net)
    return golden.random_weights(net, args.seed)


def _input(args, net) -> np.ndarray:
    src = getattr(args, "input", "random")
    if src == "random":
        return golden.random_input(net.input_shape, args.seed)
    if not os.path.isfile(src):
        raise UsageError(f"input file not found: {src}")
    try:
        x = np.load(src, allow_pickle=False)
    except ValueError as e:
        raise UsageError(f"input {src}: {e}") from None
    if x.dtype != np.int8 or x.shape != tuple(net.input_shape):
        raise UsageError(f"input {src}: need int8 {tuple(net.input_shape)} (CHW), "
                         f"got {x.dtype} {x.shape}")
    return x


def _dram_image(args) -> Optional[np.ndarray]:
    path = getattr(args, "dram_image", None)
    if not path:
        return None
    if not os.path.isfile(path):
        raise UsageError(f"DRAM image not found: {path}")
    return np.fromfile(path, dtype=np.int8)


def _compiled(args, net, cfg, weights):
    cn = compile(net, cfg, weights)
    prog = getattr(args, "program", None)
    if prog:
        if not os.path.isfile(prog):
            raise UsageError(f"program file not found: {prog}")
        cn = dataclasses.replace(cn, program=isa.read_program(prog))
    return cn


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_compile(args) -> int:
    net = _network(args.network)
    cfg = load_config(args.config)
    if args.weights and not os.path.isfile(args.weights):
        raise UsageError(f"weights file not found: {args.weights}")
    weights = read_weights(args.weights, net) if args.weights else None
    cn = compile(net, cfg, weights)
    out = args.output or str(Path(args.network).with_suffix(".ntpu"))
    isa.write_program(cn.program, out)
    if args.dram_image:
        if cn.dram_image is None:
            raise UsageError("--dram-image needs --weights")
        cn.dram_image.tofile(args.dram_image)
    mm = cn.memory_map
    print(f"program: {out} ({len(cn.program)} instructions)")
    print(mm.summary(), end="")
    return EXIT_OK


def _run_one(payload) -> tuple:
    """Worker for sweeps: (cfg, net, weights, x) -> (csv row, text report, output)."""
    cfg, net, weights, x = payload
    out, report, _ = runner.run_network(net, weights, x, cfg)
    return report.to_csv_row(), report.to_text(), out


def cmd_run(args) -> int:
    net = _network(args.network)
    weights = _weights(args, net)
    x = _input(args, net)
    if args.sweep:
        if not os.path.isfile(args.sweep):
            raise UsageError(f"sweep file not found: {args.sweep}")
        specs = [s.strip() for s in Path(args.sweep).read_text().splitlines()
                 if s.strip() and not s.lstrip().startswith("#")]
        cfgs = [load_config(s) for s in specs]
        jobs = [(c, net, weights, x) for c in cfgs]
        workers = max(1, min(len(jobs), args.jobs or os.cpu_count() or 1))
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                results = list(ex.map(_run_one, jobs))    # map keeps input order
        else:
            results = [_run_one(j) for j in jobs]
        rows = [r[0] for r in results]
        print(sim.PerfReport.csv_header())
        for row in rows:
            print(row)
        _append_csv(args.csv, rows)
        return EXIT_OK
    cfg = load_config(args.config)
    cn = _compiled(args, net, cfg, weights)
    out, report, _ = runner.run_compiled(cn, x, _dram_image(args))
    print(report.to_text(), end="")
    if args.output:
        np.save(args.output, out, allow_pickle=False)
        print(f"output={args.output}")
    _append_csv(args.csv, [report.to_csv_row()])
    return EXIT_OK


def _append_csv(path: Optional[str], rows: Sequence[str]) -> None:
    if not path:
        return
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as f:
        if new:
            f.write(sim.PerfReport.csv_header() + "\n")
        for row in rows:
            f.write(row + "\n")


def cmd_verify(args) -> int:
    net = _network(args.network)
    cfg = load_config(args.config)
    weights = _weights(args, net)
    cn = _compiled(args, net, cfg, weights)
    dram = _dram_image(args)
    for k in range(args.count):
        if args.input == "random":
            x = golden.random_input(net.input_shape, args.seed + k)
        else:
            x = _input(args, net)
        res = runner.verify(net, weights, x, cfg, compiled=cn, dram_image=dram)
        if not res.ok:
            print(f"FAIL input {k}: {res.divergence}")
            return EXIT_MISMATCH
    print(f"PASS {net.name} on {cfg.name}: {args.count} input(s) bit-exact")
    return EXIT_OK


def cmd_check_capacity(args) -> int:
    net = _network(args.network)
    cfg = load_config(args.config)
    per_layer, total = count_params(net)
    shapes = infer_shapes(net)
    print(f"config: {cfg.name}")
    print(f"ub_capacity: {cfg.ub_rows}x{cfg.ub_width}x8b = {cfg.ub_bits} bits")
    print(f"acc_capacity: {cfg.acc_rows}x{cfg.acc_width}x32b = {cfg.acc_bits} bits")
    print(f"weight_fifo: {cfg.weight_fifo_tiles} tiles = {cfg.fifo_bits} bits")
    print(f"onchip_budget_bits: {cfg.onchip_budget_bits}")
    print(f"{'layer':>5} {'type':<14} {'output':<14} {'params':>12} {'weight_bits':>14}")
    for i, (layer, shape, n) in enumerate(zip(net.layers, shapes, per_layer)):
        kind = type(layer).__name__
        print(f"{i:>5} {kind:<14} {'x'.join(map(str, shape)):<14} {n:>12} {n * 8:>14}")
    print(f"total_params: {total}")
    print(f"total_weight_bits: {total * 8}")
    fits = "yes" if total * 8 <= cfg.onchip_budget_bits else "no"
    print(f"weights_fit_onchip: {fits}")
    try:
        mm = plan_memory(net, cfg)
        print(f"placement: {mm.placement}")
        print(f"peak_activation_bits: {mm.peak_activation_bits}")
        print(f"dram_bits_used: {mm.dram_bits_used}")
    except CompileError as e:
        print(f"placement: infeasible ({e})")
    return EXIT_OK


def cmd_disasm(args) -> int:
    if not os.path.isfile(args.program):
        raise UsageError(f"program file not found: {args.program}")
    sys.stdout.write(isa.disassemble(isa.read_program(args.program)))
    return EXIT_OK


def cmd_asm(args) -> int:
    if not os.path.isfile(args.source):
        raise UsageError(f"assembly file not found: {args.source}")
    prog = isa.assemble(Path(args.source).read_text())
    isa.write_program(prog, args.output)
    print(f"{args.output}: {len(prog)} instructions")
    return EXIT_OK


def cmd_gen_weights(args) -> int:
    net = _network(args.network)
    weights = golden.random_weights(net, args.seed)
    write_weights(weights, args.output)
    if args.calibrated_network:
        x = golden.random_input(net.input_shape, args.seed)
        save_network(golden.calibrate(net, weights, x), args.calibrated_network)
    print(f"{args.output}: {sum(has_weights(l) for l in net.layers)} weighted layers")
    return EXIT_OK


def cmd_gen_network(args) -> int:
    net, weights = golden.gen_random_network(args.seed, args.size_class)
    save_network(net, args.output)
    if args.weights_output:
        write_weights(weights, args.weights_output)
    print(f"{args.output}: {len(net.layers)} layers, profile {golden.layer_profile(net)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntpu", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, weights=True, inputs=True):
        sp.add_argument("network", help="network description file")
        sp.add_argument("--config", default="naivetpu", help="preset name or JSON config file")
        sp.add_argument("--seed", type=int, default=0, help="seed for random input/weights")
        if weights:
            sp.add_argument("--weights", help="NTPUWGT weights file (default: seeded random)")
        if inputs:
            sp.add_argument("--input", default="random", help="CHW int8 .npy file, or 'random'")
            sp.add_argument("--program", help="precompiled NTPUPROG file to execute")
            sp.add_argument("--dram-image", help="precompiled DRAM weight image to execute with")

    c = sub.add_parser("compile", help="lower a network to an NTPUPROG file")
    common(c, inputs=False)
    c.add_argument("-o", "--output", help="program path (default: <network>.ntpu)")
    c.add_argument("--dram-image", help="also write the tile-major DRAM weight image")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="simulate and print the performance report")
    common(r)
    r.add_argument("-o", "--output", help="write the output tensor (.npy)")
    r.add_argument("--csv", help="append CSV rows to this file")
    r.add_argument("--sweep", help="file listing one config (name or path) per line")
    r.add_argument("--jobs", type=int, help="parallel sweep workers")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="compare simulator and golden outputs")
    common(v)
    v.add_argument("--count", type=int, default=1, help="random inputs to check (seed, seed+1, ...)")
    v.set_defaults(func=cmd_verify)

    k = sub.add_parser("check-capacity", help="per-layer weight bits versus budgets")
    common(k, weights=False, inputs=False)
    k.set_defaults(func=cmd_check_capacity)

    d = sub.add_parser("disasm", help="print a program as assembly")
    d.add_argument("program")
    d.set_defaults(func=cmd_disasm)

    a = sub.add_parser("asm", help="assemble text into an NTPUPROG file")
    a.add_argument("source")
    a.add_argument("-o", "--output", required=True)
    a.set_defaults(func=cmd_asm)

    g = sub.add_parser("gen-weights", help="write seeded random weights for a network")
    g.add_argument("network")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--calibrated-network", help="also write the network with calibrated shifts")
    g.set_defaults(func=cmd_gen_weights)

    n = sub.add_parser("gen-network", help="write a seeded random network (+ weights)")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--size-class", default="small", choices=golden.SIZE_CLASSES)
    n.add_argument("-o", "--output", required=True)
    n.add_argument("--weights-output")
    n.set_defaults(func=cmd_gen_network)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, NetworkError, WeightsError, isa.IsaError, ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CompileError, TilingError, sim.SimulationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CAPACITY


if __name__ == "__main__":
    sys.exit(main())
