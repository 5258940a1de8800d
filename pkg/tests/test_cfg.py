from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icresolve.cfg import (CfgError, address_taken, build_dcfg, build_xref_map, dcfg_from_edges,
                           l1_candidates, reachable)
from icresolve.frontend import parse_microasm
from icresolve.synth import POC_TABLES, poc_case

from conftest import random_function_text

CALL_RET = """
.func f 0x100
0x100: mov $0x1, r0
0x104: ret
.func main 0x200
0x200: call f
0x204: mov r0, r1
0x208: ret
"""


def test_single_ret_block_has_no_successors():
    d = build_dcfg(parse_microasm(".func main 0x100\n0x100: ret\n"))
    assert d.successors[0x100] == frozenset()


def test_conditional_jump_successors():
    p = parse_microasm(".func main 0x100\n0x100: je 0x108\n0x104: mov $0x1, r1\n0x108: ret\n")
    d = build_dcfg(p)
    assert d.successors[0x100] == {0x104, 0x108}


def test_call_and_return_edges():
    d = build_dcfg(parse_microasm(CALL_RET))
    assert 0x100 in d.successors[0x200]          # call edge
    assert 0x204 in d.successors[0x100]          # return edge to post-call block
    assert d.return_edges[(0x100, 0x204)] == 0x200


def test_unknown_jump_target_is_an_error():
    from icresolve.model import BasicBlock, Function, Instruction, MemoryImage, Operand, Program
    f = Function(0x100, (BasicBlock(0x100, (Instruction(0x100, "jmp", (Operand.imm(0x999),)),)),),
                 "main")
    with pytest.raises(CfgError):
        build_dcfg(Program((f,), MemoryImage(()), 0x100))


def _assert_inverse(d):
    for b, ss in d.successors.items():
        for s in ss:
            assert b in d.predecessors[s]
    for b, ps in d.predecessors.items():
        for q in ps:
            assert b in d.successors[q]


def test_predecessors_invert_successors(listing, fig2):
    for p in (listing, fig2, poc_case().program):
        _assert_inverse(build_dcfg(p))


def _bfs(succ, entry):
    seen, q = {entry}, deque([entry])
    while q:
        for s in succ.get(q.popleft(), ()):
            if s not in seen:
                seen.add(s)
                q.append(s)
    return seen


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_reachable_matches_bfs_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 51))
    edges = {b: set(int(x) for x in rng.choice(n, size=int(rng.integers(0, 3)))) for b in range(n)}
    d = dcfg_from_edges(edges)
    _assert_inverse(d)
    assert reachable(d, 0) == _bfs(edges, 0)


def test_reachable_cases():
    assert reachable(dcfg_from_edges({0: set()}), 0) == {0}
    assert reachable(dcfg_from_edges({0: {1}, 1: {2}, 2: set()}), 0) == {0, 1, 2}
    p = parse_microasm(CALL_RET + ".func orphan 0x300\n0x300: ret\n")
    assert 0x300 not in reachable(build_dcfg(p), p.entry)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_program_dcfg_inverse_random(seed):
    _assert_inverse(build_dcfg(parse_microasm(random_function_text(np.random.default_rng(seed)))))


def test_address_taken(listing):
    assert address_taken(listing) == {listing.by_name["target_func"].start}
    assert address_taken(parse_microasm(CALL_RET)) == set()
    case = poc_case()
    named = {t for ts in POC_TABLES.values() for t in ts}
    got = {case.program.by_start[a].name for a in address_taken(case.program)}
    assert named <= got and "payload" in got and {f"d{i}" for i in range(8)} <= got


def test_direct_call_target_is_not_address_taken():
    assert address_taken(parse_microasm(CALL_RET)) == set()


def test_xref_map():
    assert build_xref_map(parse_microasm(".func main 0x100\n0x100: ret\n")) == {}
    p = parse_microasm(""".func b 0x100
0x100: ret
.func a 0x200
0x200: call b
0x204: call b
0x208: ret
.func main 0x300
0x300: call a
0x304: ret
""")
    x = build_xref_map(p)
    assert x[0x100] == {0x200, 0x204} and x[0x200] == {0x300}


DEAD = """
.section t 0x804a000
.slot 0x804a000 &f1
.slot 0x804a004 &f2
.slot 0x804a008 &f3
.func f1 0x100
0x100: ret
.func f2 0x110
0x110: ret
.func f3 0x120
0x120: ret
.func dead 0x200
0x200: icall [0x804a000]
0x204: ret
.func main 0x300
0x300: mov [0x804a000], r1
0x304: icall r1
0x308: ret
"""


def test_l1_dead_callsite_and_aict():
    p = parse_microasm(DEAD)
    c = l1_candidates(p, build_dcfg(p))
    assert c.provenance == "internal-L1"
    assert c.targets[0x304] == {0x100, 0x110, 0x120}
    assert c.targets[0x200] == frozenset()
    assert c.aict() == 1.5


def test_l1_external_pass_through_and_validation():
    p = parse_microasm(DEAD)
    d = build_dcfg(p)
    ext = {0x304: frozenset({0x100}), 0x200: frozenset()}
    c = l1_candidates(p, d, ext)
    assert c.targets == ext and c.provenance == "external"
    with pytest.raises(CfgError):
        l1_candidates(p, d, {0x300: frozenset({0x100})})
    with pytest.raises(CfgError):
        l1_candidates(p, d, {0x304: frozenset({0x101})})


def test_l1_soundness_on_payload_case():
    case = poc_case()
    c = l1_candidates(case.program, build_dcfg(case.program))
    assert case.truth.pairs <= c.pairs()


def test_l1_soundness_on_listing(listing):
    c = l1_candidates(listing, build_dcfg(listing))
    assert c.targets == {0x8049213: {0x8049196}}
