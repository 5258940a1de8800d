"""Normalized program representation and analysis configuration.

Every analysis in the package works on these immutable types. A program is a
sorted list of functions (each a list of basic blocks of instructions) plus a
global memory image split into sections of pointer-width slots.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Optional

POINTER_WIDTH = 4

REGISTERS = ("r0", "r1", "r2", "r3", "r4", "r5", "fp", "sp")
RETURN_REGISTER = "r0"
# Registers a call may overwrite; their pre-call values never survive a call.
CALLER_SAVED = frozenset({"r0", "r1", "r2"})
FRAME_REGISTERS = frozenset({"fp", "sp"})

MNEMONICS = (
    "mov", "lea", "push", "pop", "add", "sub", "cmp", "test",
    "call", "icall", "jmp", "je", "jne", "jg", "jl", "ret",
)
COND_JUMPS = frozenset({"je", "jne", "jg", "jl"})
CONTROL_TRANSFERS = frozenset({"call", "icall", "jmp", "ret"}) | COND_JUMPS

OPERAND_KINDS = ("register", "immediate", "stack", "global", "indirect")
TERMINATORS = ("fallthrough", "jump", "cond-jump", "call", "icall", "ret")


@dataclass(frozen=True)
class Operand:
    kind: str
    reg: Optional[str] = None
    offset: Optional[int] = None
    address: Optional[int] = None
    value: Optional[int] = None

    @classmethod
    def register(cls, reg: str) -> "Operand":
        return cls("register", reg=reg)

    @classmethod
    def imm(cls, value: int) -> "Operand":
        return cls("immediate", value=value)

    @classmethod
    def stack(cls, offset: int) -> "Operand":
        return cls("stack", offset=offset)

    @classmethod
    def glob(cls, address: int) -> "Operand":
        return cls("global", address=address)

    @classmethod
    def indirect(cls, reg: str, offset: int = 0) -> "Operand":
        return cls("indirect", reg=reg, offset=offset)

    @property
    def is_memory(self) -> bool:
        return self.kind in ("stack", "global", "indirect")

    def problems(self) -> list[str]:
        expected = {
            "register": ("reg",),
            "immediate": ("value",),
            "stack": ("offset",),
            "global": ("address",),
            "indirect": ("reg", "offset"),
        }
        if self.kind not in expected:
            return [f"unknown operand kind {self.kind!r}"]
        out = []
        for name in ("reg", "offset", "address", "value"):
            populated = getattr(self, name) is not None
            if populated != (name in expected[self.kind]):
                out.append(f"{self.kind} operand field {name!r} "
                           f"{'set' if populated else 'missing'}")
        if self.reg is not None and self.reg not in REGISTERS:
            out.append(f"unknown register {self.reg!r}")
        return out

    def __str__(self) -> str:
        if self.kind == "register":
            return self.reg
        if self.kind == "immediate":
            return f"${_hex(self.value)}"
        if self.kind == "stack":
            return f"[fp{_signed_hex(self.offset)}]"
        if self.kind == "global":
            return f"[{_hex(self.address)}]"
        if self.offset:
            return f"[{self.reg}{_signed_hex(self.offset)}]"
        return f"[{self.reg}]"


def _hex(v: int) -> str:
    return f"-{-v:#x}" if v < 0 else f"{v:#x}"


def _signed_hex(v: int) -> str:
    return f"-{-v:#x}" if v < 0 else f"+{v:#x}"


@dataclass(frozen=True)
class Instruction:
    address: int
    mnemonic: str
    operands: tuple[Operand, ...] = ()

    @property
    def is_call(self) -> bool:
        return self.mnemonic in ("call", "icall")

    @property
    def target(self) -> Optional[int]:
        """Immediate target of a direct call or jump."""
        if self.mnemonic == "call" or self.mnemonic == "jmp" or self.mnemonic in COND_JUMPS:
            if self.operands and self.operands[0].kind == "immediate":
                return self.operands[0].value
        return None


@dataclass(frozen=True)
class BasicBlock:
    start: int
    instructions: tuple[Instruction, ...]

    @property
    def last(self) -> Instruction:
        return self.instructions[-1]

    @property
    def end(self) -> int:
        return self.instructions[-1].address

    @property
    def terminator(self) -> str:
        m = self.last.mnemonic
        if m == "jmp":
            return "jump"
        if m in COND_JUMPS:
            return "cond-jump"
        if m in ("call", "icall", "ret"):
            return m
        return "fallthrough"


@dataclass(frozen=True)
class Function:
    start: int
    blocks: tuple[BasicBlock, ...]
    name: Optional[str] = None

    @property
    def end(self) -> int:
        """Address of the last instruction (inclusive range end)."""
        return max(b.end for b in self.blocks) if self.blocks else self.start

    def instructions(self) -> Iterator[Instruction]:
        for b in self.blocks:
            yield from b.instructions

    @property
    def label(self) -> str:
        return self.name or f"sub_{self.start:x}"


@dataclass(frozen=True)
class Section:
    name: str
    base: int
    slots: tuple[tuple[int, int], ...]  # (address, raw value)

    @property
    def end(self) -> int:
        """One past the last byte covered by the section."""
        last = max((a for a, _ in self.slots), default=self.base - POINTER_WIDTH)
        return max(self.base, last + POINTER_WIDTH)

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end


@dataclass(frozen=True)
class MemoryImage:
    sections: tuple[Section, ...] = ()

    @cached_property
    def _sorted(self) -> tuple[list[int], list[Section]]:
        secs = sorted(self.sections, key=lambda s: s.base)
        return [s.base for s in secs], secs

    def section_of(self, addr: int) -> Optional[Section]:
        bases, secs = self._sorted
        i = bisect.bisect_right(bases, addr) - 1
        if i >= 0 and secs[i].contains(addr):
            return secs[i]
        return None

    @cached_property
    def slot_map(self) -> dict[int, int]:
        return {a: v for s in self.sections for a, v in s.slots}


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    memory: MemoryImage = field(default_factory=MemoryImage)
    entry: Optional[int] = None
    pointer_width: int = POINTER_WIDTH

    @cached_property
    def starts(self) -> list[int]:
        return [f.start for f in self.functions]

    @cached_property
    def start_set(self) -> frozenset[int]:
        return frozenset(self.starts)

    @cached_property
    def by_start(self) -> dict[int, Function]:
        return {f.start: f for f in self.functions}

    @cached_property
    def by_name(self) -> dict[str, Function]:
        return {f.name: f for f in self.functions if f.name}

    @cached_property
    def blocks(self) -> dict[int, BasicBlock]:
        return {b.start: b for f in self.functions for b in f.blocks}

    @cached_property
    def instruction_map(self) -> dict[int, Instruction]:
        return {i.address: i for f in self.functions for i in f.instructions()}

    @cached_property
    def block_of_instruction(self) -> dict[int, int]:
        return {i.address: b.start for f in self.functions for b in f.blocks
                for i in b.instructions}

    def instructions(self) -> Iterator[Instruction]:
        for f in self.functions:
            yield from f.instructions()

    def icall_sites(self) -> list["Callsite"]:
        out = []
        for f in self.functions:
            for b in f.blocks:
                for ins in b.instructions:
                    if ins.mnemonic == "icall":
                        out.append(Callsite(ins.address, f.start, b.start, ins.operands[0]))
        return out


@dataclass(frozen=True)
class Callsite:
    id: int
    function: int
    block: int
    operand: Optional[Operand] = None


def callsite_at(p: Program, addr: int) -> Callsite:
    """Callsite record for the call or icall instruction at ``addr``."""
    ins = p.instruction_map.get(addr)
    if ins is None or not ins.is_call:
        raise KeyError(f"no call instruction at {addr:#x}")
    f = function_at(p, addr)
    return Callsite(addr, f.start, p.block_of_instruction[addr],
                    ins.operands[0] if ins.operands else None)


@dataclass(frozen=True)
class AnalysisConfig:
    height: int = 40
    sweep_depth: int = 1
    xref_depth: int = 3
    timeout: float = 250.0
    delta: float = 0.1
    tau_arg: float = 6.0
    tau_ret: float = 2.0
    prune_threshold: float = 0.0
    trace_sample_fraction: float = 0.3
    rng_seed: int = 0
    deterministic_time: bool = False

    def problems(self) -> list[str]:
        out = []
        if self.height < 1:
            out.append("height must be >= 1")
        if self.sweep_depth < 0:
            out.append("sweep_depth must be >= 0")
        if self.xref_depth < 0:
            out.append("xref_depth must be >= 0")
        if not self.timeout > 0:
            out.append("timeout must be > 0")
        if not 0.0 <= self.delta <= 1.0:
            out.append("delta must lie in [0, 1]")
        if not 0.0 <= self.prune_threshold <= 1.0:
            out.append("prune_threshold must lie in [0, 1]")
        if not 0.0 < self.trace_sample_fraction <= 1.0:
            out.append("trace_sample_fraction must lie in (0, 1]")
        return out

    def validate(self) -> "AnalysisConfig":
        probs = self.problems()
        if probs:
            raise ValueError("; ".join(probs))
        return self


def function_at(p: Program, addr: int) -> Optional[Function]:
    i = bisect.bisect_right(p.starts, addr) - 1
    if i < 0:
        return None
    f = p.functions[i]
    return f if addr <= f.end else None


def is_function_start(p: Program, value: int) -> bool:
    return value in p.start_set


def validate_program(p: Program) -> list[str]:
    """Check structural invariants; returns one message per violation."""
    v: list[str] = []
    if p.pointer_width != POINTER_WIDTH:
        v.append(f"pointer width {p.pointer_width} != {POINTER_WIDTH}")

    prev: Optional[Function] = None
    for f in p.functions:
        if prev is not None:
            if f.start < prev.start:
                v.append(f"functions not sorted at {f.start:#x}")
            elif f.start <= prev.end:
                v.append(f"overlapping function ranges at {f.start:#x} "
                         f"({prev.label} ends at {prev.end:#x})")
        prev = f
        if not f.blocks:
            v.append(f"function {f.label} at {f.start:#x} has no blocks")
            continue
        first = f.blocks[0]
        if not first.instructions or first.instructions[0].address != f.start:
            v.append(f"function {f.label} first instruction is not at start {f.start:#x}")
        last_end = None
        for b in f.blocks:
            if not b.instructions:
                v.append(f"empty block at {b.start:#x}")
                continue
            if b.instructions[0].address != b.start:
                v.append(f"block {b.start:#x} does not begin with its first instruction")
            if last_end is not None and b.start <= last_end:
                v.append(f"overlapping blocks at {b.start:#x}")
            last_end = b.end
            addrs = [i.address for i in b.instructions]
            if any(a >= c for a, c in zip(addrs, addrs[1:])):
                v.append(f"instruction addresses not increasing in block {b.start:#x}")
            for ins in b.instructions[:-1]:
                if ins.mnemonic in CONTROL_TRANSFERS:
                    v.append(f"control transfer inside block at {ins.address:#x}")
            for ins in b.instructions:
                v.extend(f"{m} at {ins.address:#x}" for m in instruction_problems(ins))

    if p.entry is None:
        v.append("program has no entry function")
    elif p.entry not in p.start_set:
        v.append(f"entry {p.entry:#x} is not a function start")

    seen: dict[int, str] = {}
    secs = sorted(p.memory.sections, key=lambda s: s.base)
    for a, b in zip(secs, secs[1:]):
        if b.base < a.end:
            v.append(f"overlapping sections {a.name} and {b.name} at {b.base:#x}")
    for s in secs:
        for addr, _ in s.slots:
            if addr % POINTER_WIDTH:
                v.append(f"unaligned slot at {addr:#x}")
            if addr < s.base:
                v.append(f"slot {addr:#x} below section {s.name} base")
            if addr in seen:
                v.append(f"duplicate slot at {addr:#x}")
            seen[addr] = s.name
    return v


def instruction_problems(ins: Instruction) -> list[str]:
    out = []
    if ins.mnemonic not in MNEMONICS:
        return [f"unknown mnemonic {ins.mnemonic!r}"]
    for op in ins.operands:
        out.extend(op.problems())
    if len(ins.operands) > 2:
        out.append("more than two operands")
    ops = ins.operands
    if ins.mnemonic == "call":
        if len(ops) != 1 or ops[0].kind != "immediate":
            out.append("call operand kind")
    elif ins.mnemonic == "icall":
        if len(ops) != 1 or ops[0].kind == "immediate":
            out.append("icall operand kind")
    elif ins.mnemonic == "jmp" or ins.mnemonic in COND_JUMPS:
        if len(ops) != 1 or ops[0].kind != "immediate":
            out.append("jump operand kind")
    elif ins.mnemonic == "ret":
        if ops:
            out.append("ret takes no operands")
    elif ins.mnemonic in ("push", "pop"):
        if len(ops) != 1:
            out.append(f"{ins.mnemonic} takes one operand")
        elif ins.mnemonic == "pop" and ops[0].kind == "immediate":
            out.append("pop into immediate")
    else:
        if len(ops) != 2:
            out.append(f"{ins.mnemonic} takes two operands")
        elif ins.mnemonic in ("mov", "lea", "add", "sub") and ops[1].kind == "immediate":
            out.append(f"{ins.mnemonic} destination is immediate")
        elif ins.mnemonic == "lea" and not ops[0].is_memory:
            out.append("lea source must be a memory operand")
    return out
