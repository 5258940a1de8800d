"""Readers and writers for the micro-assembly, trace and candidate text formats."""

from __future__ import annotations

import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from .model import (
    CONTROL_TRANSFERS,
    MNEMONICS,
    REGISTERS,
    BasicBlock,
    Function,
    Instruction,
    MemoryImage,
    Operand,
    Program,
    Section,
    instruction_problems,
    validate_program,
)


class ParseError(ValueError):
    def __init__(self, line: Optional[int], message: str):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass(frozen=True)
class TraceSet:
    pairs: frozenset[tuple[int, int]] = frozenset()

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(sorted(self.pairs))

    def by_callsite(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = defaultdict(set)
        for c, f in self.pairs:
            out[c].add(f)
        return dict(out)


ExternalCandidates = dict  # callsite address -> frozenset of callee addresses

_HEX = r"-?0[xX][0-9a-fA-F]+"
_NAME = r"[A-Za-z_.@][\w.@$]*"
_INSN_RE = re.compile(rf"^({_HEX})\s*:\s*([a-z]+)\s*(.*)$")
_STACK_RE = re.compile(r"^\[\s*fp\s*(?:([+-])\s*(0[xX][0-9a-fA-F]+|\d+))?\s*\]$")
_INDIRECT_RE = re.compile(r"^\[\s*(r[0-5]|sp)\s*(?:([+-])\s*(0[xX][0-9a-fA-F]+|\d+))?\s*\]$")
_GLOBAL_RE = re.compile(r"^\[\s*(0[xX][0-9a-fA-F]+)\s*\]$")


def _int(tok: str, line: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ParseError(line, f"malformed number {tok!r}") from None


def _strip(raw: str) -> str:
    return raw.split("#", 1)[0].strip()


def parse_microasm(text: str) -> Program:
    lines = text.splitlines()

    # Pass 1: function names, so data slots and calls may refer forward.
    names: dict[str, int] = {}
    for no, raw in enumerate(lines, 1):
        toks = _strip(raw).split()
        if toks and toks[0] == ".func":
            if len(toks) == 3:
                if toks[1] in names:
                    raise ParseError(no, f"duplicate function name {toks[1]!r}")
                names[toks[1]] = _int(toks[2], no)
            elif len(toks) != 2:
                raise ParseError(no, "expected '.func <name> <hexaddr>'")

    sections: list[tuple[str, int, list[tuple[int, int]]]] = []
    funcs: list[dict] = []
    cur_sec = None
    cur_fn = None
    seen_insn: set[int] = set()
    seen_slot: set[int] = set()

    for no, raw in enumerate(lines, 1):
        line = _strip(raw)
        if not line:
            continue
        toks = line.split()
        head = toks[0]
        if head == ".section":
            if len(toks) != 3:
                raise ParseError(no, "expected '.section <name> <hexaddr>'")
            cur_sec = (toks[1], _int(toks[2], no), [])
            sections.append(cur_sec)
            cur_fn = None
        elif head == ".slot":
            if cur_sec is None:
                raise ParseError(no, ".slot outside a section")
            if len(toks) != 3:
                raise ParseError(no, "expected '.slot <hexaddr> <value>'")
            addr = _int(toks[1], no)
            if addr in seen_slot:
                raise ParseError(no, f"duplicate slot address {addr:#x}")
            seen_slot.add(addr)
            if toks[2].startswith("&"):
                label = toks[2][1:]
                if label not in names:
                    raise ParseError(no, f"undefined function label {label!r}")
                value = names[label]
            else:
                value = _int(toks[2], no)
            cur_sec[2].append((addr, value))
        elif head == ".func":
            name = toks[1] if len(toks) == 3 else None
            start = _int(toks[-1], no)
            cur_fn = {"name": name, "start": start, "insns": [], "splits": set(), "line": no}
            funcs.append(cur_fn)
            cur_sec = None
        elif head == ".block":
            if cur_fn is None:
                raise ParseError(no, ".block outside a function")
            if len(toks) != 2:
                raise ParseError(no, "expected '.block <hexaddr>'")
            cur_fn["splits"].add(_int(toks[1], no))
            cur_fn.setdefault("declared", []).append((_int(toks[1], no), no))
        elif head.startswith("."):
            raise ParseError(no, f"unknown directive {head!r}")
        else:
            if cur_fn is None:
                raise ParseError(no, "instruction outside a function")
            ins = _parse_instruction(line, no, names)
            if ins.address in seen_insn:
                raise ParseError(no, f"duplicate address {ins.address:#x}")
            seen_insn.add(ins.address)
            if cur_fn["insns"] and ins.address <= cur_fn["insns"][-1][0].address:
                raise ParseError(no, f"address {ins.address:#x} not increasing")
            cur_fn["insns"].append((ins, no))

    jump_targets = {ins.target for fn in funcs for ins, _ in fn["insns"]
                    if ins.mnemonic != "call" and ins.target is not None}

    functions = []
    for fn in funcs:
        insns = fn["insns"]
        if not insns:
            raise ParseError(fn["line"], "function without instructions")
        addrs = {i.address for i, _ in insns}
        for addr, no in fn.get("declared", []):
            if addr not in addrs:
                raise ParseError(no, f"block {addr:#x} has no instruction at its address")
        splits = fn["splits"] | (jump_targets & addrs)
        blocks, cur = [], []
        for ins, _ in insns:
            if cur and ins.address in splits:
                blocks.append(BasicBlock(cur[0].address, tuple(cur)))
                cur = []
            cur.append(ins)
            if ins.mnemonic in CONTROL_TRANSFERS:
                blocks.append(BasicBlock(cur[0].address, tuple(cur)))
                cur = []
        if cur:
            blocks.append(BasicBlock(cur[0].address, tuple(cur)))
        functions.append(Function(fn["start"], tuple(blocks), fn["name"]))

    functions.sort(key=lambda f: f.start)
    entry = None
    if functions:
        entry = names.get("main", functions[0].start)
    memory = MemoryImage(tuple(Section(n, b, tuple(sorted(s))) for n, b, s in sections))
    prog = Program(tuple(functions), memory, entry)
    problems = validate_program(prog) if functions else [
        m for m in validate_program(prog) if "entry" not in m]
    if problems:
        raise ParseError(None, "invalid program: " + "; ".join(problems))
    return prog


def _parse_instruction(line: str, no: int, names: Mapping[str, int]) -> Instruction:
    m = _INSN_RE.match(line)
    if not m:
        raise ParseError(no, f"syntax error: {line!r}")
    addr = _int(m.group(1), no)
    mnem = m.group(2)
    if mnem not in MNEMONICS:
        raise ParseError(no, f"unknown mnemonic {mnem!r}")
    rest = m.group(3).strip()
    toks = [t.strip() for t in rest.split(",")] if rest else []
    if any(not t for t in toks):
        raise ParseError(no, "empty operand")
    branch = mnem in ("call", "jmp", "je", "jne", "jg", "jl")
    ops = tuple(_parse_operand(t, no, names, branch) for t in toks)
    ins = Instruction(addr, mnem, ops)
    probs = instruction_problems(ins)
    if probs:
        raise ParseError(no, probs[0])
    return ins


def _parse_operand(tok: str, no: int, names: Mapping[str, int], branch: bool) -> Operand:
    if tok in REGISTERS:
        return Operand.register(tok)
    if tok.startswith("$"):
        body = tok[1:]
        if body in names:
            return Operand.imm(names[body])
        return Operand.imm(_int(body, no))
    if tok.startswith("["):
        m = _STACK_RE.match(tok)
        if m:
            off = int(m.group(2), 0) if m.group(2) else 0
            return Operand.stack(-off if m.group(1) == "-" else off)
        m = _INDIRECT_RE.match(tok)
        if m:
            off = int(m.group(3), 0) if m.group(3) else 0
            return Operand.indirect(m.group(1), -off if m.group(2) == "-" else off)
        m = _GLOBAL_RE.match(tok)
        if m:
            return Operand.glob(int(m.group(1), 0))
        raise ParseError(no, f"malformed memory operand {tok!r}")
    if branch:
        if tok in names:
            return Operand.imm(names[tok])
        if re.fullmatch(_HEX, tok):
            return Operand.imm(int(tok, 0))
        raise ParseError(no, f"undefined function label {tok!r}")
    raise ParseError(no, f"malformed operand {tok!r}")


def format_program(p: Program) -> str:
    """Canonical text form; ``parse_microasm(format_program(p)) == p``."""
    names = {f.start: f.name for f in p.functions if f.name}
    out = []
    for s in p.memory.sections:
        out.append(f".section {s.name} {s.base:#x}")
        for addr, val in s.slots:
            out.append(f".slot {addr:#x} " + (f"&{names[val]}" if val in names else _h(val)))
    for f in p.functions:
        out.append(f".func {f.name} {f.start:#x}" if f.name else f".func {f.start:#x}")
        for i, b in enumerate(f.blocks):
            if i:
                out.append(f".block {b.start:#x}")
            for ins in b.instructions:
                out.append(f"{ins.address:#x}: {_format_insn(ins, names)}".rstrip())
    return "\n".join(out) + ("\n" if out else "")


def _h(v: int) -> str:
    return f"-{-v:#x}" if v < 0 else f"{v:#x}"


def _format_insn(ins: Instruction, names: Mapping[int, str]) -> str:
    if ins.mnemonic == "call" or ins.target is not None:
        t = ins.operands[0].value
        dest = names[t] if ins.mnemonic == "call" and t in names else _h(t)
        return f"{ins.mnemonic} {dest}"
    return f"{ins.mnemonic} " + ", ".join(str(o) for o in ins.operands)


def parse_traces(text: str) -> TraceSet:
    pairs = set()
    for no, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        toks = line.split()
        if len(toks) != 2 or not all(re.fullmatch(r"0[xX][0-9a-fA-F]+", t) for t in toks):
            raise ParseError(no, f"malformed trace record {line!r}")
        pairs.add((int(toks[0], 16), int(toks[1], 16)))
    return TraceSet(frozenset(pairs))


def format_traces(traces: Iterable[tuple[int, int]]) -> str:
    return "".join(f"{c:#x} {f:#x}\n" for c, f in sorted(set(traces)))


def parse_candidates(text: str) -> dict[int, frozenset[int]]:
    out: dict[int, frozenset[int]] = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        key, sep, rest = line.partition(":")
        if not sep or not re.fullmatch(r"0[xX][0-9a-fA-F]+", key.strip()):
            raise ParseError(no, f"malformed candidate record {line!r}")
        site = int(key, 16)
        if site in out:
            raise ParseError(no, f"duplicate callsite {site:#x}")
        toks = rest.split()
        if not all(re.fullmatch(r"0[xX][0-9a-fA-F]+", t) for t in toks):
            raise ParseError(no, f"malformed callee address in {line!r}")
        out[site] = frozenset(int(t, 16) for t in toks)
    return out


def format_candidates(cands: Mapping[int, Iterable[int]]) -> str:
    lines = []
    for site in sorted(cands):
        targets = " ".join(f"{t:#x}" for t in sorted(cands[site]))
        lines.append(f"{site:#x}: {targets}".rstrip())
    return "".join(line + "\n" for line in lines)
