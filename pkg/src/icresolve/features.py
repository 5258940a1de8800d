"""Callsite and callee soft-signature features.

Callsite side: arguments are inferred from variables that die at the call and
are materialized into it (pushed), then annotated with origin, pointer
behaviour, nearby validation and a coarse type. Callee side: variables read
before being written are scored with additive heuristics and the survivors
are annotated the same way. A pair of the two is flattened into a
fixed-length vector for the scorer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional

import numpy as np

from .model import (
    CALLER_SAVED,
    FRAME_REGISTERS,
    RETURN_REGISTER,
    Callsite,
    Function,
    Instruction,
    Operand,
    Program,
    function_at,
)

ORIGINS = ("stack", "register", "global", "immediate", "unknown")
TYPE_HINTS = ("int", "char_ptr", "other_ptr", "unknown")
MAX_ARGS = 8
CALLSITE_ARG_WIDTH = len(ORIGINS) + 1 + 1 + len(TYPE_HINTS) + 1   # 12
CALLEE_ARG_WIDTH = len(ORIGINS) + 1 + len(TYPE_HINTS) + 1          # 11
CALLSITE_DIM = MAX_ARGS * CALLSITE_ARG_WIDTH + 2                   # 98
CALLEE_DIM = MAX_ARGS * CALLEE_ARG_WIDTH + 2                       # 90
PAIR_DIM = CALLSITE_DIM + CALLEE_DIM                               # 188

WINDOW_BEFORE = 8
WINDOW_AFTER = 8
EARLY_USE = 3
HIGH_FREQUENCY = 3
SMALL_IMMEDIATE = 0x10000

# Table of argument heuristic weights.
W_POSITIVE_STACK = 2.0
W_NEVER_WRITTEN = 1.5
W_EARLY_USE = 2.0
W_MULTI_BLOCK = 1.0
W_HIGH_FREQUENCY = 1.0
W_POSITIVE_MEMORY = 2.0
# Return-value (r0) weights.
W_RET_WRITTEN = 1.0
W_RET_FINAL_BLOCK = 1.5
W_RET_CONSTANT = 1.0


@dataclass(frozen=True, order=True)
class Variable:
    kind: str            # "register" | "stack" | "global"
    ident: object        # register name | fp offset | address

    def __str__(self) -> str:
        if self.kind == "register":
            return str(self.ident)
        if self.kind == "stack":
            off = self.ident
            return f"[fp{'-' if off < 0 else '+'}{abs(off):#x}]"
        return f"[{self.ident:#x}]"


def reg(name: str) -> Variable:
    return Variable("register", name)


def stack(offset: int) -> Variable:
    return Variable("stack", offset)


def glob(address: int) -> Variable:
    return Variable("global", address)


@dataclass(frozen=True)
class ArgDescriptor:
    origin: str
    pointer_likeness: bool
    validated: bool
    type_hint: str
    variable: Optional[Variable] = None


@dataclass(frozen=True)
class CallsiteFeatures:
    args: tuple[ArgDescriptor, ...]
    arg_count: int
    ret_used: bool
    tracked_window: tuple[int, ...] = ()
    dead_after: frozenset[Variable] = frozenset()


@dataclass(frozen=True)
class CalleeFeatures:
    args: tuple[ArgDescriptor, ...]
    arg_count: int
    ret_present: bool
    ret_score: float = 0.0


@dataclass
class FeaturePair:
    values: np.ndarray
    label: Optional[int] = None


# -- instruction semantics ---------------------------------------------------

def var_of(op: Operand) -> Optional[Variable]:
    if op.kind == "register":
        return None if op.reg in FRAME_REGISTERS else reg(op.reg)
    if op.kind == "stack":
        return stack(op.offset)
    if op.kind == "global":
        return glob(op.address)
    return None


def _bases(ops: Iterable[Operand]) -> set[Variable]:
    return {reg(o.reg) for o in ops if o.kind == "indirect" and o.reg not in FRAME_REGISTERS}


def uses_defs(ins: Instruction) -> tuple[set[Variable], set[Variable]]:
    ops = ins.operands
    m = ins.mnemonic
    uses = _bases(ops)
    defs: set[Variable] = set()
    vs = [var_of(o) for o in ops]
    if m == "mov":
        uses |= {vs[0]} - {None}
        defs |= {vs[1]} - {None}
    elif m == "lea":
        defs |= {vs[1]} - {None}
    elif m in ("push", "icall", "cmp", "test"):
        uses |= set(vs) - {None}
    elif m == "pop":
        defs |= {vs[0]} - {None}
    elif m in ("add", "sub"):
        uses |= set(vs) - {None}
        defs |= {vs[1]} - {None}
    if m in ("call", "icall"):
        defs |= {reg(r) for r in CALLER_SAVED}
    return uses, defs


def explicit_writes(ins: Instruction) -> set[Variable]:
    """Destinations named in the instruction (call clobbers excluded)."""
    if ins.mnemonic in ("mov", "lea", "add", "sub") and len(ins.operands) == 2:
        v = var_of(ins.operands[1])
        return {v} if v else set()
    if ins.mnemonic == "pop" and ins.operands:
        v = var_of(ins.operands[0])
        return {v} if v else set()
    return set()


def references(ins: Instruction) -> set[Variable]:
    """Every variable named by the instruction, including ``lea`` sources."""
    out = {var_of(o) for o in ins.operands} - {None}
    return out | _bases(ins.operands)


# -- intra-procedural structure ----------------------------------------------

def intra_successors(f: Function) -> dict[int, tuple[int, ...]]:
    starts = {b.start for b in f.blocks}
    out = {}
    for i, b in enumerate(f.blocks):
        nxt = f.blocks[i + 1].start if i + 1 < len(f.blocks) else None
        s = []
        if b.terminator in ("jump", "cond-jump") and b.last.target in starts:
            s.append(b.last.target)
        if b.terminator not in ("jump", "ret") and nxt is not None and nxt not in s:
            s.append(nxt)
        out[b.start] = tuple(s)
    return out


def regions(f: Function) -> dict[int, int]:
    """Map block start -> region id, where a region is a run of blocks only
    separated by direct/indirect calls (a call returns to the next block)."""
    succ = intra_successors(f)
    preds: dict[int, int] = {b.start: 0 for b in f.blocks}
    for ss in succ.values():
        for s in ss:
            preds[s] += 1
    out = {}
    rid = -1
    for i, b in enumerate(f.blocks):
        prev = f.blocks[i - 1] if i else None
        if prev is None or prev.terminator not in ("call", "icall") or preds[b.start] != 1:
            rid += 1
        out[b.start] = rid
    return out


def _block_use_def(f: Function) -> dict[int, tuple[set[Variable], set[Variable]]]:
    out = {}
    for b in f.blocks:
        use: set[Variable] = set()
        defined: set[Variable] = set()
        for ins in b.instructions:
            u, d = uses_defs(ins)
            use |= u - defined
            defined |= d
        out[b.start] = (use, defined)
    return out


def liveness(f: Function) -> tuple[dict[int, set[Variable]], dict[int, set[Variable]]]:
    """Live-in / live-out per block; nothing is live at function exit."""
    succ = intra_successors(f)
    preds: dict[int, list[int]] = {b.start: [] for b in f.blocks}
    for b, ss in succ.items():
        for s in ss:
            preds[s].append(b)
    ud = _block_use_def(f)
    live_in = {b.start: set() for b in f.blocks}
    live_out = {b.start: set() for b in f.blocks}
    work = deque(b.start for b in reversed(f.blocks))
    queued = set(work)
    while work:
        b = work.popleft()
        queued.discard(b)
        out = set().union(*(live_in[s] for s in succ[b])) if succ[b] else set()
        use, defined = ud[b]
        new_in = use | (out - defined)
        live_out[b] = out
        if new_in != live_in[b]:
            live_in[b] = new_in
            for pb in preds[b]:
                if pb not in queued:
                    queued.add(pb)
                    work.append(pb)
    return live_in, live_out


def _locate(p: Program, addr: int) -> tuple[Function, int, int]:
    f = function_at(p, addr)
    bstart = p.block_of_instruction[addr]
    block = p.blocks[bstart]
    idx = next(i for i, ins in enumerate(block.instructions) if ins.address == addr)
    return f, bstart, idx


def live_after(p: Program, addr: int) -> set[Variable]:
    f, bstart, idx = _locate(p, addr)
    _, live_out = liveness(f)
    live = set(live_out[bstart])
    for ins in reversed(p.blocks[bstart].instructions[idx + 1:]):
        u, d = uses_defs(ins)
        live = u | (live - d)
    return live


def dead_after_callsite(p: Program, c: Callsite | int) -> set[Variable]:
    addr = c if isinstance(c, int) else c.id
    f, bstart, idx = _locate(p, addr)
    succ = intra_successors(f)
    preds: dict[int, set[int]] = {b.start: set() for b in f.blocks}
    for b, ss in succ.items():
        for s in ss:
            preds[s].add(b)
    # blocks from which the call can be reached (backward closure)
    before = set()
    work = list(preds[bstart])
    while work:
        b = work.pop()
        if b not in before:
            before.add(b)
            work.extend(preds[b])
    accessed: set[Variable] = set()
    for b in f.blocks:
        if b.start in before:
            for ins in b.instructions:
                accessed |= references(ins)
    for ins in p.blocks[bstart].instructions[:idx + 1]:
        accessed |= references(ins)
    return accessed - live_after(p, addr)


# -- argument annotation -----------------------------------------------------

def _string_like(value: int) -> bool:
    if not 0 <= value < 1 << 32:
        return False
    bs = value.to_bytes(4, "little")
    printable = sum(0x20 <= x < 0x7F for x in bs)
    return printable >= 2 and all(0x20 <= x < 0x7F or x in (0, 9, 10) for x in bs)


def string_data(p: Program, addr: int) -> bool:
    """Whether ``addr`` points at a data slot holding byte-string-like bytes."""
    v = p.memory.slot_map.get(addr)
    return v is not None and v not in p.start_set and p.memory.section_of(v) is None \
        and _string_like(v)


def pointer_like(f: Function, v: Variable) -> bool:
    """Address taken (``lea``) or dereferenced, directly or through a register
    copy within a block."""
    for b in f.blocks:
        alias: set[str] = set()
        if v.kind == "register":
            alias.add(v.ident)
        for ins in b.instructions:
            if ins.mnemonic == "lea" and var_of(ins.operands[0]) == v:
                return True
            if any(o.kind == "indirect" and o.reg in alias for o in ins.operands):
                return True
            if ins.mnemonic == "mov" and var_of(ins.operands[0]) == v \
                    and ins.operands[1].kind == "register":
                alias.add(ins.operands[1].reg)
                continue
            for w in explicit_writes(ins):
                if w.kind == "register" and w != v:
                    alias.discard(w.ident)
            if ins.is_call:
                alias -= {r for r in CALLER_SAVED if v != reg(r)}
    return False


def _string_initialized(p: Program, f: Function, v: Variable) -> bool:
    """A stack buffer is string-like if some slot of it is written with bytes
    loaded from string data (a copied literal)."""
    if v.kind != "stack":
        return False
    lo, hi = v.ident, v.ident + 32
    for b in f.blocks:
        loaded: set[str] = set()
        for ins in b.instructions:
            ops = ins.operands
            if ins.mnemonic == "mov":
                src, dst = ops
                if dst.kind == "register":
                    if (src.kind == "global" and string_data(p, src.address)) or \
                            (src.kind == "immediate" and string_data(p, src.value)):
                        loaded.add(dst.reg)
                    else:
                        loaded.discard(dst.reg)
                    continue
                if dst.kind == "stack" and lo <= dst.offset < hi:
                    if (src.kind == "register" and src.reg in loaded) or \
                            (src.kind == "global" and string_data(p, src.address)):
                        return True
            for w in explicit_writes(ins):
                if w.kind == "register":
                    loaded.discard(w.ident)
    return False


def _int_like(f: Function, v: Variable) -> bool:
    """Compared or used in add/sub (directly or through a register copy), or
    written with a small immediate and compared."""
    compared = False
    for b in f.blocks:
        alias: set[str] = set()
        for ins in b.instructions:
            ops = ins.operands
            vs = [var_of(o) for o in ops]
            if ins.mnemonic in ("cmp", "test") and (v in vs or any(
                    o.kind == "register" and o.reg in alias for o in ops)):
                compared = True
            if ins.mnemonic in ("add", "sub") and (v in vs or any(
                    o.kind == "register" and o.reg in alias for o in ops)):
                return True
            if ins.mnemonic == "mov" and vs[0] == v and ops[1].kind == "register":
                alias.add(ops[1].reg)
                continue
            for w in explicit_writes(ins):
                if w.kind == "register":
                    alias.discard(w.ident)
    return compared


def infer_type(p: Program, f: Function, v: Optional[Variable], ptr: bool,
               via_lea: bool = False, imm: Optional[int] = None) -> str:
    if imm is not None:
        if string_data(p, imm):
            return "char_ptr"
        if imm in p.start_set or p.memory.section_of(imm) is not None:
            return "other_ptr"
        return "int" if abs(imm) < SMALL_IMMEDIATE else "unknown"
    if v is None:
        return "other_ptr" if ptr else "unknown"
    if via_lea and _string_initialized(p, f, v):
        return "char_ptr"
    if v.kind == "global" and string_data(p, v.ident):
        return "char_ptr"
    if ptr:
        return "other_ptr"
    if _int_like(f, v):
        return "int"
    return "unknown"


# -- callsite side -----------------------------------------------------------

def tracked_window(f: Function, addr: int) -> tuple[int, ...]:
    addrs = [i.address for i in f.instructions()]
    k = addrs.index(addr)
    return tuple(addrs[max(0, k - WINDOW_BEFORE):k + WINDOW_AFTER + 1])


@dataclass
class _Pushed:
    origin: str
    variable: Optional[Variable]
    via_lea: bool = False
    imm: Optional[int] = None
    register: Optional[str] = None


def _trace_push(block_insns: list[Instruction], k: int) -> _Pushed:
    """Resolve what the push at index ``k`` materializes."""
    op = block_insns[k].operands[0]
    if op.kind == "immediate":
        return _Pushed("immediate", None, imm=op.value)
    if op.kind in ("stack", "global"):
        return _Pushed(op.kind, var_of(op))
    if op.kind == "indirect":
        return _Pushed("unknown", None)
    r = op.reg
    for j in range(k - 1, -1, -1):
        ins = block_insns[j]
        if r not in {w.ident for w in explicit_writes(ins) if w.kind == "register"}:
            if ins.is_call and r in CALLER_SAVED:
                break
            continue
        src = ins.operands[0]
        if ins.mnemonic == "lea":
            if src.kind in ("stack", "global"):
                return _Pushed(src.kind, var_of(src), via_lea=True)
            return _Pushed("unknown", None, via_lea=True)
        if ins.mnemonic == "mov":
            if src.kind == "immediate":
                return _Pushed("immediate", None, imm=src.value)
            if src.kind in ("stack", "global"):
                return _Pushed(src.kind, var_of(src), register=r)
            if src.kind == "register" and src.reg not in FRAME_REGISTERS:
                r = src.reg
                continue
        break
    return _Pushed("register", reg(r), register=r)


def _pushes(p: Program, addr: int) -> list[tuple[int, Instruction]]:
    """Pushes feeding the call at ``addr``, nearest first (first argument first)."""
    _, bstart, idx = _locate(p, addr)
    insns = p.blocks[bstart].instructions
    out = []
    for j in range(idx - 1, -1, -1):
        ins = insns[j]
        if any(o.kind == "register" and o.reg == "sp" for o in ins.operands[1:2]):
            break
        if ins.mnemonic == "push":
            op = ins.operands[0]
            if op.kind == "register" and op.reg in FRAME_REGISTERS:
                break
            out.append((j, ins))
    return out


def extract_callsite_features(p: Program, c: Callsite | int) -> CallsiteFeatures:
    addr = c if isinstance(c, int) else c.id
    f, bstart, _ = _locate(p, addr)
    insns = list(p.blocks[bstart].instructions)
    window = tracked_window(f, addr)
    dead = dead_after_callsite(p, addr)
    after = live_after(p, addr)
    window_insns = [p.instruction_map[a] for a in window]

    args = []
    for j, _ in _pushes(p, addr):
        src = _trace_push(insns, j)
        v = src.variable
        if src.origin == "immediate":
            keep = True
        elif v is None:
            keep = True
        elif v.kind == "register":
            keep = v.ident in CALLER_SAVED or v not in after
        else:
            keep = v in dead
        if not keep:
            continue
        ptr = src.via_lea or (src.imm is not None and infer_type(
            p, f, None, False, imm=src.imm) in ("char_ptr", "other_ptr")) or (
            v is not None and pointer_like(f, v))
        touched = {v} if v is not None else set()
        if src.register:
            touched.add(reg(src.register))
        validated = bool(touched) and any(
            ins.mnemonic in ("cmp", "test") and touched & references(ins)
            for ins in window_insns)
        hint = infer_type(p, f, v, ptr, via_lea=src.via_lea, imm=src.imm)
        args.append(ArgDescriptor(src.origin, ptr, validated, hint, v))

    return CallsiteFeatures(
        args=tuple(args),
        arg_count=len(args),
        ret_used=reg(RETURN_REGISTER) in after,
        tracked_window=window,
        dead_after=frozenset(dead),
    )


# -- callee side -------------------------------------------------------------

def _prologue_length(f: Function) -> int:
    n = 0
    for ins in f.blocks[0].instructions:
        ops = ins.operands
        if ins.mnemonic == "push" and ops[0] == Operand.register("fp"):
            n += 1
        elif ins.mnemonic == "mov" and ops == (Operand.register("sp"), Operand.register("fp")):
            n += 1
        elif ins.mnemonic == "sub" and ops[0].kind == "immediate" \
                and ops[1] == Operand.register("sp"):
            n += 1
        else:
            break
    return n


def variables(f: Function) -> set[Variable]:
    out: set[Variable] = set()
    for ins in f.instructions():
        out |= references(ins)
    return out


def used_before_written(f: Function) -> set[Variable]:
    live_in, _ = liveness(f)
    return set(live_in[f.blocks[0].start])


def heuristic_terms(f: Function, v: Variable) -> dict[str, float]:
    """Individual heuristic contributions for variable ``v`` in ``f``."""
    position = {ins.address: i for i, ins in enumerate(f.instructions())}
    skip = _prologue_length(f)
    region = regions(f)
    hits = []          # (instruction index, block start)
    written = False
    positive_mem = False
    for b in f.blocks:
        for ins in b.instructions:
            if v in references(ins):
                hits.append((position[ins.address], b.start))
            if v in explicit_writes(ins):
                written = True
            for o in ins.operands:
                if o.kind == "stack" and v.kind == "stack" and o.offset == v.ident and o.offset > 0:
                    positive_mem = True
                if o.kind == "indirect" and v == reg(o.reg) and o.offset > 0:
                    positive_mem = True
    terms = {
        "positive_stack_offset": W_POSITIVE_STACK if v.kind == "stack" and v.ident > 0 else 0.0,
        "never_written": 0.0 if written else W_NEVER_WRITTEN,
        "early_use": W_EARLY_USE if hits and min(i for i, _ in hits) - skip < EARLY_USE else 0.0,
        "multi_block": W_MULTI_BLOCK if len({region[b] for _, b in hits}) >= 2 else 0.0,
        "high_frequency": W_HIGH_FREQUENCY if len(hits) >= HIGH_FREQUENCY else 0.0,
        "positive_memory_operand": W_POSITIVE_MEMORY if positive_mem else 0.0,
    }
    return terms


def arg_heuristic_score(p: Program, f: Function, v: Variable) -> float:
    return sum(heuristic_terms(f, v).values())


def return_score(f: Function) -> float:
    r0 = reg(RETURN_REGISTER)
    region = regions(f)
    final = {region[b.start] for b in f.blocks if b.terminator == "ret"}
    written = final_write = constant = False
    for b in f.blocks:
        in_final = region[b.start] in final
        for ins in b.instructions:
            if r0 in explicit_writes(ins):
                written = True
                if in_final:
                    final_write = True
                    if ins.mnemonic == "mov" and ins.operands[0].kind == "immediate":
                        constant = True
    return (W_RET_WRITTEN * written + W_RET_FINAL_BLOCK * final_write
            + W_RET_CONSTANT * constant)


def _arg_order(v: Variable) -> tuple:
    rank = {"stack": 0, "register": 1, "global": 2}[v.kind]
    return (rank, str(v.ident) if v.kind == "register" else v.ident)


def extract_callee_features(p: Program, f: Function, tau_arg: float = 6.0,
                            tau_ret: float = 2.0) -> CalleeFeatures:
    args = []
    for v in sorted(used_before_written(f), key=_arg_order):
        if arg_heuristic_score(p, f, v) >= tau_arg:
            ptr = pointer_like(f, v)
            args.append(ArgDescriptor(v.kind, ptr, False, infer_type(p, f, v, ptr), v))
    rs = return_score(f)
    return CalleeFeatures(tuple(args), len(args), rs >= tau_ret, rs)


# -- encoding ----------------------------------------------------------------

def _encode_arg(a: ArgDescriptor, with_validation: bool) -> list[float]:
    out = [0.0] * len(ORIGINS)
    out[ORIGINS.index(a.origin)] = 1.0
    out.append(float(a.pointer_likeness))
    if with_validation:
        out.append(float(a.validated))
    t = [0.0] * len(TYPE_HINTS)
    t[TYPE_HINTS.index(a.type_hint)] = 1.0
    return out + t + [1.0]


def encode_callsite(cs: CallsiteFeatures) -> np.ndarray:
    vec = np.zeros(CALLSITE_DIM)
    for i, a in enumerate(cs.args[:MAX_ARGS]):
        vec[i * CALLSITE_ARG_WIDTH:(i + 1) * CALLSITE_ARG_WIDTH] = _encode_arg(a, True)
    vec[-2] = cs.arg_count
    vec[-1] = float(cs.ret_used)
    return vec


def encode_callee(ce: CalleeFeatures) -> np.ndarray:
    vec = np.zeros(CALLEE_DIM)
    for i, a in enumerate(ce.args[:MAX_ARGS]):
        vec[i * CALLEE_ARG_WIDTH:(i + 1) * CALLEE_ARG_WIDTH] = _encode_arg(a, False)
    vec[-2] = ce.arg_count
    vec[-1] = float(ce.ret_present)
    return vec


def encode_pair(cs: CallsiteFeatures, ce: CalleeFeatures,
                label: Optional[int] = None) -> FeaturePair:
    return FeaturePair(np.concatenate([encode_callsite(cs), encode_callee(ce)]), label)


class FeatureCache:
    """Memoizes per-callsite and per-callee features for one program."""

    def __init__(self, p: Program, tau_arg: float = 6.0, tau_ret: float = 2.0):
        self.p = p
        self.tau_arg = tau_arg
        self.tau_ret = tau_ret
        self._site = lru_cache(maxsize=None)(self._callsite_vec)
        self._callee = lru_cache(maxsize=None)(self._callee_vec)

    def _callsite_vec(self, addr: int) -> np.ndarray:
        return encode_callsite(extract_callsite_features(self.p, addr))

    def _callee_vec(self, start: int) -> np.ndarray:
        f = self.p.by_start[start]
        return encode_callee(extract_callee_features(self.p, f, self.tau_arg, self.tau_ret))

    def pair(self, site: int, callee: int) -> np.ndarray:
        return np.concatenate([self._site(site), self._callee(callee)])
