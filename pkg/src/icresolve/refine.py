"""Selective backward inter-procedural refinement.

For each indirect callsite the resolver walks the direct CFG backwards up to a
block-height bound, collects function-start immediates, sweeps global memory
sections referenced along the way (chasing pointers between sections up to a
depth bound), and then follows direct callers of the enclosing function that
pass pointer- or memory-based arguments. Discovered targets only nudge
existing scores; they never add edges.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .cfg import Dcfg, _value_operands, referenced_section
from .features import _pushes, _trace_push
from .model import AnalysisConfig, Callsite, Program, function_at

STEPS_PER_SECOND = 10_000


@dataclass
class ResolvedTargets:
    targets: dict[int, frozenset[int]] = field(default_factory=dict)
    timed_out: dict[int, bool] = field(default_factory=dict)


def _step(d: Dcfg, b: int, pb: int, stack: tuple[int, ...]) -> Optional[tuple[int, ...]]:
    """Call-stack update for moving backwards from ``b`` to predecessor ``pb``.

    Entering a callee through its return edge remembers the call block, so
    that leaving the callee through its entry goes back to that caller only.
    Leaving a function with an empty stack may go to any caller.
    """
    call_block = d.return_edges.get((pb, b))
    if call_block is not None:
        return stack + (call_block,)
    if d.calls.get(pb) == b and stack:
        return stack[:-1] if stack[-1] == pb else None
    return stack


def extract_backward_paths(d: Dcfg, seed: int, height: int) -> list[tuple[int, ...]]:
    """All simple backward walks from ``seed`` with at most ``height`` blocks,
    sorted lexicographically by address sequence."""
    if seed not in d.predecessors and seed not in d.successors:
        raise KeyError(f"block {seed:#x} not in graph")
    out: list[tuple[int, ...]] = []

    def walk(path: list[int], on_path: set[int], stack: tuple[int, ...]) -> None:
        out.append(tuple(path))
        if len(path) >= height:
            return
        b = path[-1]
        for pb in sorted(d.predecessors.get(b, ())):
            if pb in on_path:
                continue
            ns = _step(d, b, pb, stack)
            if ns is None:
                continue
            path.append(pb)
            on_path.add(pb)
            walk(path, on_path, ns)
            path.pop()
            on_path.discard(pb)

    walk([seed], {seed}, ())
    return sorted(out)


def backward_region(d: Dcfg, seed: int, height: int) -> list[int]:
    """Blocks lying on some backward path of at most ``height`` blocks, nearest
    first. Equals the union of ``extract_backward_paths`` on call-free graphs
    without enumerating the (exponentially many) paths."""
    order = [seed]
    seen_blocks = {seed}
    seen_states = {(seed, ())}
    frontier = [(seed, ())]
    for _ in range(height - 1):
        nxt = []
        for b, stack in frontier:
            for pb in sorted(d.predecessors.get(b, ())):
                ns = _step(d, b, pb, stack)
                if ns is None or len(ns) > height or (pb, ns) in seen_states:
                    continue
                seen_states.add((pb, ns))
                nxt.append((pb, ns))
                if pb not in seen_blocks:
                    seen_blocks.add(pb)
                    order.append(pb)
        frontier = nxt
        if not frontier:
            break
    return order


def recursive_memory_sweep(p: Program, start: int, depth: int) -> set[int]:
    """Function starts stored in the section containing ``start`` and in
    sections reachable from it through at most ``depth`` pointer hops."""
    sec = p.memory.section_of(start)
    if sec is None:
        return set()
    found: set[int] = set()
    visited = {sec.base}
    frontier = [sec]
    level = 0
    while frontier:
        nxt = []
        for s in frontier:
            for _, v in s.slots:
                if v in p.start_set:
                    found.add(v)
                elif level < depth:
                    t = p.memory.section_of(v)
                    if t is not None and t.base not in visited:
                        visited.add(t.base)
                        nxt.append(t)
        frontier = nxt
        level += 1
    return found


class _Budget:
    def __init__(self, timeout: float, deterministic: bool):
        self.deterministic = deterministic
        self.limit = timeout * STEPS_PER_SECOND if deterministic else timeout
        self.steps = 0
        self.t0 = time.monotonic()
        self.expired = False

    def tick(self) -> bool:
        """Account one inspection; True once the budget is exhausted."""
        if self.expired:
            return True
        if self.deterministic:
            self.expired = self.steps >= self.limit
            self.steps += 1
        else:
            self.expired = time.monotonic() - self.t0 > self.limit
        return self.expired


def passes_pointer_argument(p: Program, call_addr: int) -> bool:
    """Whether the direct call at ``call_addr`` pushes a pointer-like or
    memory-based argument."""
    bstart = p.block_of_instruction[call_addr]
    insns = list(p.blocks[bstart].instructions)
    for j, ins in _pushes(p, call_addr):
        src = _trace_push(insns, j)
        if src.via_lea or src.origin in ("stack", "global", "unknown"):
            return True
        if src.imm is not None and (src.imm in p.start_set
                                    or p.memory.section_of(src.imm) is not None):
            return True
    return False


class _Resolver:
    def __init__(self, p: Program, d: Dcfg, xrefs: Mapping[int, Iterable[int]],
                 cfg: AnalysisConfig):
        self.p, self.d, self.xrefs, self.cfg = p, d, xrefs, cfg
        self._sweeps: dict[int, frozenset[int]] = {}

    def _sweep(self, addr: int) -> frozenset[int]:
        sec = self.p.memory.section_of(addr)
        if sec is None:
            return frozenset()
        if sec.base not in self._sweeps:
            self._sweeps[sec.base] = frozenset(
                recursive_memory_sweep(self.p, addr, self.cfg.sweep_depth))
        return self._sweeps[sec.base]

    def _inspect_block(self, b: int, found: set[int], budget: _Budget) -> bool:
        for ins in self.p.blocks[b].instructions:
            if budget.tick():
                return False
            for op in _value_operands(ins):
                if op.kind == "immediate" and op.value in self.p.start_set:
                    found.add(op.value)
                sec = referenced_section(self.p, op)
                if sec is not None:
                    found |= self._sweep(op.address if op.kind == "global" else op.value)
        return True

    def resolve(self, cs: Callsite) -> tuple[frozenset[int], bool]:
        budget = _Budget(self.cfg.timeout, self.cfg.deterministic_time)
        found: set[int] = set()
        for b in backward_region(self.d, cs.block, self.cfg.height):
            if not self._inspect_block(b, found, budget):
                return frozenset(found), True
        best_depth: dict[int, int] = {}
        work = deque([(cs.function, 0)])
        while work:
            f, depth = work.popleft()
            if depth >= self.cfg.xref_depth:
                continue
            for x in sorted(self.xrefs.get(f, ())):
                if not passes_pointer_argument(self.p, x):
                    continue
                if budget.expired:
                    return frozenset(found), True
                if not self._inspect_block(self.p.block_of_instruction[x], found, budget):
                    return frozenset(found), True
                caller = function_at(self.p, x).start
                if best_depth.get(caller, self.cfg.xref_depth) > depth + 1:
                    best_depth[caller] = depth + 1
                    work.append((caller, depth + 1))
        return frozenset(found), False


def resolve_callsite_targets(p: Program, d: Dcfg, xrefs: Mapping[int, Iterable[int]],
                             callsites: Iterable[Callsite],
                             cfg: AnalysisConfig) -> ResolvedTargets:
    r = _Resolver(p, d, xrefs, cfg)
    out = ResolvedTargets()
    for cs in callsites:
        out.targets[cs.id], out.timed_out[cs.id] = r.resolve(cs)
    return out


def adjust_scores(scores: Mapping[tuple[int, int], float], rt: ResolvedTargets,
                  delta: float) -> dict[tuple[int, int], float]:
    out = {}
    for (c, f), s in scores.items():
        s = s + delta if f in rt.targets.get(c, ()) else s - delta
        out[(c, f)] = min(1.0, max(0.0, s))
    return out
