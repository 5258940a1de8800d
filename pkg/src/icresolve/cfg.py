"""Direct control-flow graph, reachability, address-taken functions and the
conservative first-layer candidate map."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .model import Instruction, Operand, Program, Section


class CfgError(ValueError):
    pass


@dataclass(frozen=True)
class Dcfg:
    successors: Mapping[int, frozenset[int]]
    predecessors: Mapping[int, frozenset[int]]
    # call block -> callee start
    calls: Mapping[int, int] = field(default_factory=dict)
    # (callee ret block, caller post-call block) -> caller call block
    return_edges: Mapping[tuple[int, int], int] = field(default_factory=dict)

    @property
    def blocks(self) -> frozenset[int]:
        return frozenset(self.successors)

    def is_return_edge(self, src: int, dst: int) -> bool:
        return (src, dst) in self.return_edges


def dcfg_from_edges(edges: Mapping[int, Iterable[int]]) -> Dcfg:
    """Plain graph without call structure (tests, external tooling)."""
    succ = {b: frozenset(s) for b, s in edges.items()}
    for s in list(succ.values()):
        for t in s:
            succ.setdefault(t, frozenset())
    return Dcfg(succ, _invert(succ))


def _invert(succ: Mapping[int, Iterable[int]]) -> dict[int, frozenset[int]]:
    pred: dict[int, set[int]] = {b: set() for b in succ}
    for b, ss in succ.items():
        for s in ss:
            pred.setdefault(s, set()).add(b)
    return {b: frozenset(v) for b, v in pred.items()}


def build_dcfg(p: Program) -> Dcfg:
    succ: dict[int, set[int]] = {b: set() for b in p.blocks}
    calls: dict[int, int] = {}
    ret_blocks = {f.start: [b.start for b in f.blocks if b.terminator == "ret"]
                  for f in p.functions}
    post_call: list[tuple[int, int, int]] = []  # (call block, callee, post block)

    for f in p.functions:
        for i, b in enumerate(f.blocks):
            nxt = f.blocks[i + 1].start if i + 1 < len(f.blocks) else None
            term = b.terminator
            if term not in ("jump", "ret") and nxt is not None:
                succ[b.start].add(nxt)
            if term in ("jump", "cond-jump"):
                t = b.last.target
                if t not in p.blocks:
                    raise CfgError(f"jump target {t:#x} at {b.last.address:#x} is not a block")
                succ[b.start].add(t)
            elif term == "call":
                t = b.last.target
                if t not in p.start_set:
                    raise CfgError(f"call target {t:#x} at {b.last.address:#x} is not a function")
                succ[b.start].add(t)
                calls[b.start] = t
                if nxt is not None:
                    post_call.append((b.start, t, nxt))

    returns: dict[tuple[int, int], int] = {}
    for call_block, callee, post in post_call:
        for r in ret_blocks[callee]:
            succ[r].add(post)
            returns[(r, post)] = call_block

    frozen = {b: frozenset(s) for b, s in succ.items()}
    return Dcfg(frozen, _invert(frozen), calls, returns)


def reachable(d: Dcfg, entry: int | Iterable[int], follow_returns: bool = False) -> set[int]:
    """Forward closure from the entry block(s).

    Return edges are skipped by default: the call block's own fallthrough
    already models control coming back, and following callee returns would
    leak into every caller of a shared function, dead or not.
    """
    roots = [entry] if isinstance(entry, int) else list(entry)
    seen = {r for r in roots if r in d.successors}
    work = deque(sorted(seen))
    while work:
        b = work.popleft()
        for s in d.successors.get(b, ()):
            if s in seen:
                continue
            if not follow_returns and (b, s) in d.return_edges:
                continue
            seen.add(s)
            work.append(s)
    return seen


def _value_operands(ins: Instruction) -> tuple[Operand, ...]:
    # Branch targets are control flow, not materialized pointers.
    if ins.mnemonic == "call" or ins.target is not None:
        return ()
    return ins.operands


def referenced_section(p: Program, op: Operand) -> Optional[Section]:
    """Section touched by a global operand or by an immediate data address."""
    if op.kind == "global":
        return p.memory.section_of(op.address)
    if op.kind == "immediate" and op.value not in p.start_set:
        return p.memory.section_of(op.value)
    return None


def address_taken(p: Program) -> set[int]:
    out = set()
    for ins in p.instructions():
        for op in _value_operands(ins):
            if op.kind == "immediate" and op.value in p.start_set:
                out.add(op.value)
    for s in p.memory.sections:
        out.update(v for _, v in s.slots if v in p.start_set)
    return out


def build_xref_map(p: Program) -> dict[int, frozenset[int]]:
    xrefs: dict[int, set[int]] = defaultdict(set)
    for ins in p.instructions():
        if ins.mnemonic == "call":
            xrefs[ins.target].add(ins.address)
    return {k: frozenset(v) for k, v in xrefs.items()}


def live_code(p: Program, d: Dcfg) -> tuple[set[int], set[int]]:
    """Reachable blocks and functions, treating functions whose address is
    materialized by reachable code (directly, or through data reachable from
    it) as additional entry points. Iterated to a fixpoint."""
    if p.entry is None:
        return set(), set()
    roots = {p.entry}
    while True:
        blocks = reachable(d, roots)
        taken: set[int] = set()
        sections: dict[int, Section] = {}
        for b in blocks:
            for ins in p.blocks[b].instructions:
                for op in _value_operands(ins):
                    if op.kind == "immediate" and op.value in p.start_set:
                        taken.add(op.value)
                    s = referenced_section(p, op)
                    if s is not None:
                        sections[s.base] = s
        work = list(sections.values())
        while work:
            s = work.pop()
            for _, v in s.slots:
                if v in p.start_set:
                    taken.add(v)
                else:
                    t = p.memory.section_of(v)
                    if t is not None and t.base not in sections:
                        sections[t.base] = t
                        work.append(t)
        grown = roots | taken
        if grown == roots:
            funcs = {f for f in p.start_set if f in blocks}
            return blocks, funcs
        roots = grown


@dataclass(frozen=True)
class CandidateMap:
    targets: Mapping[int, frozenset[int]]
    provenance: str = "internal-L1"

    def pairs(self) -> set[tuple[int, int]]:
        return {(c, f) for c, fs in self.targets.items() for f in fs}

    def aict(self) -> float:
        if not self.targets:
            return 0.0
        return sum(len(v) for v in self.targets.values()) / len(self.targets)


def l1_candidates(p: Program, d: Dcfg,
                  external: Optional[Mapping[int, Iterable[int]]] = None) -> CandidateMap:
    if external is not None:
        targets = {}
        for site, callees in external.items():
            ins = p.instruction_map.get(site)
            if ins is None or ins.mnemonic != "icall":
                raise CfgError(f"external candidate key {site:#x} is not an icall")
            callees = frozenset(callees)
            bad = sorted(c for c in callees if c not in p.start_set)
            if bad:
                raise CfgError(f"external candidates of {site:#x} include "
                               f"non-function address {bad[0]:#x}")
            targets[site] = callees
        return CandidateMap(targets, "external")

    blocks, funcs = live_code(p, d)
    pool = frozenset(address_taken(p) & funcs)
    targets = {}
    for cs in p.icall_sites():
        targets[cs.id] = pool if cs.block in blocks else frozenset()
    return CandidateMap(targets, "internal-L1")
