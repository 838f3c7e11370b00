"""Five-instruction NaiveTPU ISA: instruction values, 16-byte binary words,
program files and the textual assembly format.

Word layout: byte 0 is the opcode, bytes 1..15 hold the operands
little-endian in field-declaration order, unused bytes are zero.

    READ_HOST_MEMORY   host_addr:u32 ub_row:u24 num_rows:u24 valid_lanes:u16
    READ_WEIGHTS       dram_addr:u64 num_tiles:u32
    MATMUL_CONV        ub_row:u24 num_rows:u24 acc_row:u16 flags:u8
                       (bit 0 accumulate, bit 1 advance_tile)
    ACTIVATE           acc_row:u16 num_rows:u16 func:u8 window:u8 stride:u8
                       multiplier:i32 shift:u8 ub_dest_row:u24
    WRITE_HOST_MEMORY  ub_row:u24 num_rows:u24 host_addr:u32 valid_lanes:u16
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Union

WORD_BYTES = 16
PROGRAM_MAGIC = b"NTPUPROG"
PROGRAM_VERSION = 1

OP_READ_HOST_MEMORY = 1
OP_READ_WEIGHTS = 2
OP_MATMUL_CONV = 3
OP_ACTIVATE = 4
OP_WRITE_HOST_MEMORY = 5


class IsaError(ValueError):
    pass


class EncodingError(IsaError):
    def __init__(self, field_name: str, value, lo: int, hi: int):
        super().__init__(f"field {field_name}={value!r} out of range [{lo}, {hi}]")
        self.field = field_name


class DecodeError(IsaError):
    pass


class AssemblyError(IsaError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ---------------------------------------------------------------------------
# Instruction values
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RequantParams:
    """32->8 bit requantization: round(v * multiplier / 2**shift), clamped."""

    multiplier: int = 1
    shift: int = 0


@dataclass(frozen=True, slots=True)
class Identity:
    pass


@dataclass(frozen=True, slots=True)
class ReLU:
    pass


@dataclass(frozen=True, slots=True)
class MaxPool:
    window: int
    stride: int


ActFunc = Union[Identity, ReLU, MaxPool]
IDENTITY = Identity()
RELU = ReLU()


@dataclass(frozen=True, slots=True)
class ReadHostMemory:
    host_addr: int
    ub_row: int
    num_rows: int
    valid_lanes: int


@dataclass(frozen=True, slots=True)
class ReadWeights:
    dram_addr: int
    num_tiles: int


@dataclass(frozen=True, slots=True)
class MatMulConv:
    ub_row: int
    num_rows: int
    acc_row: int
    accumulate: bool = False
    advance_tile: bool = False


@dataclass(frozen=True, slots=True)
class Activate:
    acc_row: int
    num_rows: int
    func: ActFunc
    requant: RequantParams
    ub_dest_row: int


@dataclass(frozen=True, slots=True)
class WriteHostMemory:
    ub_row: int
    num_rows: int
    host_addr: int
    valid_lanes: int


Instruction = Union[ReadHostMemory, ReadWeights, MatMulConv, Activate, WriteHostMemory]


@dataclass
class Program:
    instructions: list = field(default_factory=list)
    name: str = ""
    config_id: str = ""

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def __getitem__(self, i):
        return self.instructions[i]


# ---------------------------------------------------------------------------
# Field tables
# ---------------------------------------------------------------------------

# (name, byte width, min, max) for plain integer operands
_U = lambda nbytes: (0, (1 << (8 * nbytes)) - 1)  # noqa: E731

_FIELDS = {
    ReadHostMemory: (
        ("host_addr", 4, *_U(4)),
        ("ub_row", 3, *_U(3)),
        ("num_rows", 3, 1, _U(3)[1]),
        ("valid_lanes", 2, 1, _U(2)[1]),
    ),
    ReadWeights: (
        ("dram_addr", 8, *_U(8)),
        ("num_tiles", 4, 1, _U(4)[1]),
    ),
    MatMulConv: (
        ("ub_row", 3, *_U(3)),
        ("num_rows", 3, 1, _U(3)[1]),
        ("acc_row", 2, *_U(2)),
    ),
    WriteHostMemory: (
        ("ub_row", 3, *_U(3)),
        ("num_rows", 3, 1, _U(3)[1]),
        ("host_addr", 4, *_U(4)),
        ("valid_lanes", 2, 1, _U(2)[1]),
    ),
}

_ACT_FIELDS = (("acc_row", 2, *_U(2)), ("num_rows", 2, 1, _U(2)[1]))
_ACT_DEST = ("ub_dest_row", 3, *_U(3))
I32_MIN, I32_MAX = -(1 << 31), (1 << 31) - 1

OPCODES = {
    ReadHostMemory: OP_READ_HOST_MEMORY,
    ReadWeights: OP_READ_WEIGHTS,
    MatMulConv: OP_MATMUL_CONV,
    Activate: OP_ACTIVATE,
    WriteHostMemory: OP_WRITE_HOST_MEMORY,
}
_BY_OPCODE = {v: k for k, v in OPCODES.items()}

MNEMONICS = {
    ReadHostMemory: "READ_HOST_MEMORY",
    ReadWeights: "READ_WEIGHTS",
    MatMulConv: "MATMUL_CONV",
    Activate: "ACTIVATE",
    WriteHostMemory: "WRITE_HOST_MEMORY",
}
_BY_MNEMONIC = {v: k for k, v in MNEMONICS.items()}

_FUNC_CODES = {Identity: 0, ReLU: 1, MaxPool: 2}


def _check_int(name: str, value, lo: int, hi: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not lo <= value <= hi:
        raise EncodingError(name, value, lo, hi)
    return value


def _check_bool(name: str, value) -> bool:
    if not isinstance(value, bool):
        raise EncodingError(name, value, 0, 1)
    return value


def validate(inst: Instruction) -> None:
    """Raise EncodingError for the first out-of-range field of ``inst``."""
    cls = type(inst)
    if cls is Activate:
        for name, _, lo, hi in _ACT_FIELDS:
            _check_int(name, getattr(inst, name), lo, hi)
        func = inst.func
        if isinstance(func, MaxPool):
            _check_int("func.window", func.window, 1, 255)
            _check_int("func.stride", func.stride, 1, 255)
        elif not isinstance(func, (Identity, ReLU)):
            raise EncodingError("func", func, 0, 2)
        rq = inst.requant
        if not isinstance(rq, RequantParams):
            raise EncodingError("requant", rq, 0, 0)
        _check_int("requant.multiplier", rq.multiplier, I32_MIN, I32_MAX)
        _check_int("requant.shift", rq.shift, 0, 31)
        _check_int(_ACT_DEST[0], inst.ub_dest_row, _ACT_DEST[2], _ACT_DEST[3])
        return
    try:
        fields = _FIELDS[cls]
    except KeyError:
        raise IsaError(f"not an instruction: {inst!r}") from None
    for name, _, lo, hi in fields:
        _check_int(name, getattr(inst, name), lo, hi)
    if cls is MatMulConv:
        _check_bool("accumulate", inst.accumulate)
        _check_bool("advance_tile", inst.advance_tile)


# ---------------------------------------------------------------------------
# Binary encoding
# ---------------------------------------------------------------------------


def encode(inst: Instruction) -> bytes:
    validate(inst)
    cls = type(inst)
    out = bytearray(WORD_BYTES)
    out[0] = OPCODES[cls]
    pos = 1

    def put(value: int, nbytes: int, signed: bool = False) -> None:
        nonlocal pos
        out[pos:pos + nbytes] = value.to_bytes(nbytes, "little", signed=signed)
        pos += nbytes

    if cls is Activate:
        put(inst.acc_row, 2)
        put(inst.num_rows, 2)
        func = inst.func
        put(_FUNC_CODES[type(func)], 1)
        if isinstance(func, MaxPool):
            put(func.window, 1)
            put(func.stride, 1)
        else:
            pos += 2
        put(inst.requant.multiplier, 4, signed=True)
        put(inst.requant.shift, 1)
        put(inst.ub_dest_row, 3)
    else:
        for name, nbytes, _, _ in _FIELDS[cls]:
            put(getattr(inst, name), nbytes)
        if cls is MatMulConv:
            put(int(inst.accumulate) | (int(inst.advance_tile) << 1), 1)
    return bytes(out)


def decode(word: bytes) -> Instruction:
    if len(word) != WORD_BYTES:
        raise DecodeError(f"instruction word must be {WORD_BYTES} bytes, got {len(word)}")
    opcode = word[0]
    cls = _BY_OPCODE.get(opcode)
    if cls is None:
        raise DecodeError(f"unknown opcode {opcode}")
    pos = 1

    def take(nbytes: int, signed: bool = False) -> int:
        nonlocal pos
        v = int.from_bytes(word[pos:pos + nbytes], "little", signed=signed)
        pos += nbytes
        return v

    if cls is Activate:
        acc_row, num_rows = take(2), take(2)
        code, window, stride = take(1), take(1), take(1)
        multiplier, shift, dest = take(4, signed=True), take(1), take(3)
        if code == 2:
            func = MaxPool(window, stride)
        elif code in (0, 1):
            if window or stride:
                raise DecodeError("nonzero padding")
            func = IDENTITY if code == 0 else RELU
        else:
            raise DecodeError(f"unknown activation function code {code}")
        inst = Activate(acc_row, num_rows, func, RequantParams(multiplier, shift), dest)
    else:
        values = [take(nbytes) for _, nbytes, _, _ in _FIELDS[cls]]
        if cls is MatMulConv:
            flags = take(1)
            if flags & ~0b11:
                raise DecodeError("nonzero padding")
            values += [bool(flags & 1), bool(flags & 2)]
        inst = cls(*values)
    if any(word[pos:]):
        raise DecodeError("nonzero padding")
    try:
        validate(inst)
    except EncodingError as e:
        raise DecodeError(str(e)) from None
    return inst


def encode_program(program: Program) -> bytes:
    buf = io.BytesIO()
    write_program(program, buf)
    return buf.getvalue()


def decode_program(data: bytes) -> Program:
    return read_program(io.BytesIO(data))


def write_program(program: Program, dest: Union[str, os.PathLike, BinaryIO]) -> None:
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "wb") as f:
            write_program(program, f)
        return
    dest.write(PROGRAM_MAGIC)
    dest.write(struct.pack("<BI", PROGRAM_VERSION, len(program.instructions)))
    dest.write(b"".join(encode(i) for i in program.instructions))


def read_program(src: Union[str, os.PathLike, BinaryIO]) -> Program:
    if isinstance(src, (str, os.PathLike)):
        with open(src, "rb") as f:
            return read_program(f)
    header = src.read(len(PROGRAM_MAGIC) + 5)
    if len(header) < len(PROGRAM_MAGIC) + 5 or header[:8] != PROGRAM_MAGIC:
        raise DecodeError("bad program magic")
    version, count = struct.unpack("<BI", header[8:])
    if version != PROGRAM_VERSION:
        raise DecodeError(f"unsupported program version {version}")
    body = src.read()
    if len(body) != count * WORD_BYTES:
        raise DecodeError(f"program body holds {len(body)} bytes, header declares {count} words")
    insts = [decode(body[i:i + WORD_BYTES]) for i in range(0, len(body), WORD_BYTES)]
    return Program(insts)


# ---------------------------------------------------------------------------
# Assembly text
# ---------------------------------------------------------------------------

_KEYS = {
    ReadHostMemory: ("host_addr", "ub_row", "num_rows", "valid_lanes"),
    ReadWeights: ("dram_addr", "num_tiles"),
    MatMulConv: ("ub_row", "num_rows", "acc_row", "accumulate", "advance_tile"),
    Activate: ("acc_row", "num_rows", "func", "rq", "ub_dest_row"),
    WriteHostMemory: ("ub_row", "num_rows", "host_addr", "valid_lanes"),
}


def format_func(func: ActFunc) -> str:
    if isinstance(func, MaxPool):
        return f"maxpool:{func.window}:{func.stride}"
    return "relu" if isinstance(func, ReLU) else "identity"


def parse_func(text: str) -> ActFunc:
    if text == "identity":
        return IDENTITY
    if text == "relu":
        return RELU
    parts = text.split(":")
    if parts[0] == "maxpool" and len(parts) == 3:
        return MaxPool(int(parts[1], 0), int(parts[2], 0))
    raise ValueError(f"bad activation function {text!r}")


def format_instruction(inst: Instruction) -> str:
    parts = [MNEMONICS[type(inst)]]
    for key in _KEYS[type(inst)]:
        if key == "func":
            value = format_func(inst.func)
        elif key == "rq":
            value = f"{inst.requant.multiplier}:{inst.requant.shift}"
        else:
            value = getattr(inst, key)
            if isinstance(value, bool):
                value = int(value)
        parts.append(f"{key}={value}")
    return " ".join(parts)


def disassemble(program: Program) -> str:
    lines = []
    if program.name:
        lines.append(f"#! name={program.name}")
    if program.config_id:
        lines.append(f"#! config={program.config_id}")
    lines.extend(format_instruction(i) for i in program.instructions)
    return "".join(line + "\n" for line in lines)


def _parse_value(cls, key: str, text: str):
    if key == "func":
        return parse_func(text)
    if key == "rq":
        m, _, s = text.partition(":")
        return RequantParams(int(m, 0), int(s, 0) if s else 0)
    if key in ("accumulate", "advance_tile"):
        if text in ("1", "true"):
            return True
        if text in ("0", "false"):
            return False
        raise ValueError(f"bad flag value {text!r}")
    return int(text, 0)


def assemble(text: str) -> Program:
    program = Program()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#!"):
            key, _, value = line[2:].strip().partition("=")
            if key.strip() == "name":
                program.name = value.strip()
            elif key.strip() == "config":
                program.config_id = value.strip()
            continue
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        mnemonic, *tokens = line.split()
        cls = _BY_MNEMONIC.get(mnemonic)
        if cls is None:
            raise AssemblyError(lineno, f"unknown mnemonic {mnemonic}")
        keys = _KEYS[cls]
        values = {}
        for tok in tokens:
            key, eq, text_value = tok.partition("=")
            if not eq:
                raise AssemblyError(lineno, f"expected key=value, got {tok!r}")
            if key not in keys:
                raise AssemblyError(lineno, f"unknown key {key} for {mnemonic}")
            if key in values:
                raise AssemblyError(lineno, f"duplicate key {key}")
            try:
                values[key] = _parse_value(cls, key, text_value)
            except ValueError as e:
                raise AssemblyError(lineno, f"bad value for {key}: {e}") from None
        missing = [k for k in keys if k not in values]
        if missing:
            raise AssemblyError(lineno, f"missing key {missing[0]}")
        if cls is Activate:
            inst = Activate(values["acc_row"], values["num_rows"], values["func"],
                            values["rq"], values["ub_dest_row"])
        else:
            inst = cls(**values)
        try:
            validate(inst)
        except EncodingError as e:
            raise AssemblyError(lineno, f"value out of range: {e}") from None
        program.instructions.append(inst)
    return program


def opcode_name(inst_or_cls) -> str:
    cls = inst_or_cls if isinstance(inst_or_cls, type) else type(inst_or_cls)
    return MNEMONICS[cls]


def program_from(instructions: Iterable[Instruction], name: str = "", config_id: str = "") -> Program:
    return Program(list(instructions), name, config_id)
