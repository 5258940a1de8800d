"""Synthetic micro-asm programs.

``synthetic_corpus`` produces direct-call programs with varied signatures for
training the scorer. ``poc_case`` produces a layered dispatch program in which
a single chain of function-pointer tables leads to a hidden payload, together
with its ground-truth indirect edges.

Run ``python3 -m icresolve.synth OUTDIR`` to write a corpus to disk.
"""

from __future__ import annotations

import argparse
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .frontend import TraceSet, format_traces, parse_microasm
from .model import Program

INSN_SIZE = 4
_LABEL = re.compile(r"\{(\w+)\}")


@dataclass
class _Function:
    name: str
    body: list = field(default_factory=list)

    def ins(self, text: str) -> "_Function":
        self.body.append(text)
        return self

    def label(self, name: str) -> "_Function":
        self.body.append(("label", name))
        return self

    def mark(self, key: str) -> "_Function":
        self.body.append(("mark", key))
        return self


class _Assembler:
    """Lays out functions at increasing addresses and resolves ``{label}``
    placeholders to the address of the labelled instruction."""

    def __init__(self, code_base: int = 0x8049000):
        self.code_base = code_base
        self.sections: list[tuple[str, int, list[str]]] = []
        self.functions: list[_Function] = []
        self.marks: dict[str, int] = {}
        self.starts: dict[str, int] = {}

    def section(self, name: str, base: int, values: Sequence[str]) -> None:
        self.sections.append((name, base, list(values)))

    def function(self, name: str) -> _Function:
        f = _Function(name)
        self.functions.append(f)
        return f

    def render(self) -> str:
        out = []
        for name, base, values in self.sections:
            out.append(f".section {name} {base:#x}")
            out += [f".slot {base + 4 * i:#x} {v}" for i, v in enumerate(values)]
            out.append("")
        addr = self.code_base
        for f in self.functions:
            addr = (addr + 0xF) & ~0xF
            self.starts[f.name] = addr
            labels: dict[str, int] = {}
            a = addr
            for item in f.body:
                if isinstance(item, tuple):
                    if item[0] == "label":
                        labels[item[1]] = a
                    else:
                        self.marks[item[1]] = a
                else:
                    a += INSN_SIZE
            out.append(f".func {f.name} {addr:#x}")
            pending_block = False
            for item in f.body:
                if isinstance(item, tuple):
                    pending_block = pending_block or item[0] == "label"
                    continue
                if pending_block:
                    out.append(f".block {addr:#x}")
                    pending_block = False
                text = _LABEL.sub(lambda m: f"{labels[m.group(1)]:#x}", item)
                out.append(f"{addr:#x}: {text}")
                addr += INSN_SIZE
            out.append("")
        return "\n".join(out)


# -- training corpus ----------------------------------------------------------

ARG_TYPES = ("int", "char_ptr", "other_ptr")
_STRINGS = (0x6c6c6548, 0x6f77206f, 0x0a6425, 0x6425, 0x203a7325, 0x4b4f)


@dataclass(frozen=True)
class Signature:
    args: tuple[str, ...]
    returns: bool
    unused: frozenset[int] = frozenset()


def _random_signature(rng: np.random.Generator, unused_prob: float) -> Signature:
    n = int(rng.choice(5, p=[0.15, 0.3, 0.25, 0.2, 0.1]))
    args = tuple(str(rng.choice(ARG_TYPES, p=[0.5, 0.25, 0.25])) for _ in range(n))
    unused = frozenset(j for j in range(n) if rng.random() < unused_prob)
    return Signature(args, bool(rng.random() < 0.6), unused)


def _emit_worker(f: _Function, sig: Signature, rng: np.random.Generator) -> None:
    used = [j for j in range(len(sig.args)) if j not in sig.unused]
    off = {j: 8 + 4 * j for j in range(len(sig.args))}
    f.ins("push fp").ins("mov sp, fp").ins("sub $0x20, sp")
    for j in used:
        f.ins(f"mov [fp+{off[j]:#x}], r1")
        if sig.args[j] == "int":
            f.ins(f"cmp ${int(rng.integers(0, 64)):#x}, r1")
        else:
            f.ins("mov [r1], r2")
    f.ins(f"cmp $0x0, [fp+{off[used[0]]:#x}]" if used else "cmp $0x0, r3")
    f.ins("jl {tail}")
    f.ins("mov $0x0, r3")
    for j in used:
        if sig.args[j] == "int":
            f.ins(f"add [fp+{off[j]:#x}], r3")
        else:
            f.ins(f"mov [fp+{off[j]:#x}], r2").ins("mov [r2+0x4], r4")
    f.label("tail")
    for j in used:
        f.ins(f"mov [fp+{off[j]:#x}], r4")
    if sig.returns:
        f.ins("mov r3, r0" if rng.random() < 0.5 else f"mov ${int(rng.integers(0, 16)):#x}, r0")
    f.ins("ret")


def _emit_call(f: _Function, callee: str, sig: Signature, rng: np.random.Generator,
               slot: list[int], strings: Sequence[int], data: int,
               sink: Optional[str]) -> None:
    def local(size: int = 4) -> int:
        slot[0] += size
        return slot[0]

    # the call gets its own block so argument pushes are attributed to it
    f.label(f"c{slot[0]}")
    for t in reversed(sig.args):
        style = rng.random()
        if t == "int":
            if style < 0.3:
                f.ins(f"push ${int(rng.integers(0, 256)):#x}")
            else:
                x = local()
                f.ins(f"mov ${int(rng.integers(0, 256)):#x}, [fp-{x:#x}]")
                if style < 0.7:
                    f.ins(f"cmp $0x0, [fp-{x:#x}]")
                f.ins(f"push [fp-{x:#x}]")
        elif t == "char_ptr":
            if style < 0.3:
                f.ins(f"push ${int(rng.choice(strings)):#x}")
            else:
                buf = local(8)
                f.ins(f"mov [{int(rng.choice(strings)):#x}], r2").ins(f"mov r2, [fp-{buf:#x}]")
                f.ins(f"lea [fp-{buf:#x}], r0").ins("push r0")
        else:
            if style < 0.3:
                f.ins(f"push ${data:#x}")
            else:
                obj = local(8)
                f.ins(f"mov $0x0, [fp-{obj:#x}]")
                f.ins(f"lea [fp-{obj:#x}], r1").ins("push r1")
    f.ins(f"call {callee}")
    if sig.args:
        f.ins(f"add ${4 * len(sig.args):#x}, sp")
    if sig.returns and sink is not None and rng.random() < 0.85:
        z = local()
        f.ins(f"mov r0, [fp-{z:#x}]").ins(f"push [fp-{z:#x}]").ins(f"call {sink}")
        f.ins("add $0x4, sp")


def synthetic_program_text(rng: np.random.Generator, n_workers: int = 8, n_drivers: int = 3,
                           calls_per_driver: tuple[int, int] = (2, 6),
                           unused_prob: float = 0.1) -> str:
    asm = _Assembler()
    rodata, data = 0x8070000, 0x8071000
    asm.section(".rodata", rodata, [f"{s:#x}" for s in _STRINGS])
    asm.section(".data", data, ["0x0", "0x1", "0x2", "0x3"])
    strings = [rodata + 4 * i for i in range(len(_STRINGS))]

    sink_sig = Signature(("int",), False)
    _emit_worker(asm.function("sink"), sink_sig, rng)
    sigs = {f"w{i}": _random_signature(rng, unused_prob) for i in range(n_workers)}
    for name, sig in sigs.items():
        _emit_worker(asm.function(name), sig, rng)
    drivers = []
    for k in range(n_drivers):
        name = f"drv{k}"
        drivers.append(name)
        f = asm.function(name)
        f.ins("push fp").ins("mov sp, fp").ins("sub $0x80, sp")
        slot = [0]
        for _ in range(int(rng.integers(calls_per_driver[0], calls_per_driver[1] + 1))):
            callee = str(rng.choice(sorted(sigs)))
            _emit_call(f, callee, sigs[callee], rng, slot, strings, data, "sink")
        f.ins("ret")
    m = asm.function("main")
    for d in drivers:
        m.ins(f"call {d}")
    m.ins("mov $0x0, r0").ins("ret")
    return asm.render()


def synthetic_corpus(n_programs: int = 20, seed: int = 0, **kw) -> list[str]:
    rng = np.random.default_rng(seed)
    return [synthetic_program_text(rng, **kw) for _ in range(n_programs)]


# -- payload case study ---------------------------------------------------------

# table owner -> entries. Only main -> L1B -> L2C -> L3B -> L4B -> L5C -> L6P
# reaches the payload; every other dispatcher selects among decoys.
POC_TABLES: dict[str, tuple[str, ...]] = {
    "main": ("L1A", "L1B", "L1C"),
    "L1A": ("d0", "d1", "d2"),
    "L1B": ("L2A", "L2C", "L2B"),
    "L1C": ("d3", "d4", "d5"),
    "L2A": ("d6", "d7", "d0"),
    "L2B": ("d1", "d3", "d5"),
    "L2C": ("L3B", "L3A", "L3C"),
    "L3A": ("d2", "d4", "d6"),
    "L3B": ("L4A", "L4B"),
    "L3C": ("L4C", "d7", "d1"),
    "L4A": ("L5A", "d0", "d3"),
    "L4B": ("L5B", "L5C"),
    "L4C": ("d2", "d5", "d7"),
    "L5A": ("d4", "d6", "d0"),
    "L5B": ("d1", "d2", "d3"),
    "L5C": ("L6A", "L6B", "L6P"),
    "L6A": ("d5", "d6", "d7"),
    "L6B": ("d0", "d4", "d2"),
    "L6P": ("d1", "d2", "payload", "d3"),
}
POC_CHAIN = ("main", "L1B", "L2C", "L3B", "L4B", "L5C", "L6P", "payload")


@dataclass
class PocCase:
    text: str
    program: Program
    truth: TraceSet
    chain: tuple[tuple[int, int], ...]   # (callsite, callee) along the payload path
    icall_of: dict[str, int]             # dispatcher name -> its icall address


def _emit_dispatcher(f: _Function, table: int, n: int, aliasing: bool, string: int,
                     is_main: bool) -> None:
    f.ins("push fp").ins("mov sp, fp").ins("sub $0x40, sp")
    arg = f"${string:#x}" if is_main else "[fp+0x8]"
    if is_main:
        f.ins(f"push ${n - 1:#x}").ins(f"push {arg}").ins("call pick_index")
        f.ins("add $0x8, sp").ins(f"mov ${table:#x}, r1").ins("add r0, r1")
        f.ins(f"push {arg}").mark("icall").ins("icall [r1]")
        f.ins("add $0x4, sp").ins("mov $0x0, r0").ins("ret")
        return
    base = 0x30
    for i in range(n):
        f.ins(f"mov [{table + 4 * i:#x}], r1").ins(f"mov r1, [fp-{base - 4 * i:#x}]")
    if aliasing:
        # p = local; pp = &p; use = *pp
        f.ins(f"lea [fp-{base:#x}], r1").ins("mov r1, [fp-0x8]")
        f.ins("lea [fp-0x8], r2").ins("mov r2, [fp-0xc]")
        f.ins("mov [fp-0xc], r2").ins("mov [r2], r1").ins("mov r1, [fp-0x10]")
    else:
        f.ins(f"lea [fp-{base:#x}], r1").ins("mov r1, [fp-0x10]")
    f.ins(f"push ${n - 1:#x}").ins(f"push {arg}").ins("call pick_index")
    f.ins("add $0x8, sp").ins("mov [fp-0x10], r1").ins("add r0, r1")
    f.ins(f"push ${string:#x}")
    f.mark("icall").ins("icall [r1]")
    f.ins("add $0x4, sp").ins("ret")


def poc_case() -> PocCase:
    asm = _Assembler()
    rodata = 0x8070000
    asm.section(".rodata", rodata, ["0x626f6f66", "0x20616976", "0x54495243"])
    owners = sorted(POC_TABLES, key=lambda s: (s != "main", s))
    table_base = {o: 0x8072000 + 0x100 * i for i, o in enumerate(owners)}
    for o in owners:
        asm.section(f"{o}_TABLE", table_base[o], [f"&{t}" for t in POC_TABLES[o]])

    f = asm.function("puts")
    f.ins("mov [fp+0x8], r1").ins("mov $0x0, r0").ins("ret")
    # index selection: returns a byte offset below 4 * bound
    f = asm.function("pick_index")
    f.ins("push fp").ins("mov sp, fp").ins("mov [fp+0x8], r1").ins("mov [r1], r2")
    f.ins("cmp [fp+0xc], r2").ins("jl {ok}").ins("mov $0x0, r2")
    f.label("ok").ins("add r2, r2").ins("add r2, r2").ins("mov r2, r0").ins("ret")
    for i in range(8):
        asm.function(f"d{i}").ins("mov $0x0, r1").ins("ret")
    f = asm.function("payload")
    f.ins("push fp").ins("mov sp, fp").ins(f"push ${rodata + 8:#x}").ins("call puts")
    f.ins("add $0x4, sp").ins("ret")
    for o in owners:
        f = asm.function(o)
        _emit_dispatcher(f, table_base[o], len(POC_TABLES[o]), o in POC_CHAIN,
                         rodata + (0 if o == "main" else 4), o == "main")

    # marks are recorded per function in emission order; render once to resolve
    icall_of = {}
    text = _render_with_marks(asm, owners, icall_of)
    p = parse_microasm(text)
    starts = asm.starts
    truth = TraceSet(frozenset((icall_of[o], starts[t]) for o in owners for t in POC_TABLES[o]))
    chain = tuple((icall_of[a], starts[b]) for a, b in zip(POC_CHAIN, POC_CHAIN[1:]))
    return PocCase(text, p, truth, chain, icall_of)


def _render_with_marks(asm: _Assembler, owners: Sequence[str], icall_of: dict) -> str:
    # give each dispatcher's mark a unique key before rendering
    for f in asm.functions:
        f.body = [("mark", f"{f.name}.icall") if item == ("mark", "icall") else item
                  for item in f.body]
    text = asm.render()
    for o in owners:
        icall_of[o] = asm.marks[f"{o}.icall"]
    return text


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="python3 -m icresolve.synth",
                                 description="write synthetic micro-asm programs")
    ap.add_argument("outdir", type=Path)
    ap.add_argument("-n", "--programs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--poc", action="store_true",
                    help="also write the payload case study and its traces")
    args = ap.parse_args(argv)
    args.outdir.mkdir(parents=True, exist_ok=True)
    for i, text in enumerate(synthetic_corpus(args.programs, args.seed)):
        (args.outdir / f"prog{i:03d}.masm").write_text(text)
    if args.poc:
        case = poc_case()
        poc = args.outdir / "poc"
        poc.mkdir(exist_ok=True)
        (poc / "poc.masm").write_text(case.text)
        (poc / "poc.traces").write_text(format_traces(case.truth.pairs))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
