from __future__ import annotations

from importlib import resources

import numpy as np
import pytest

from icresolve.frontend import parse_microasm
from icresolve.scorer import TrainConfig, generate_training_pairs, train_scorer
from icresolve.synth import synthetic_corpus

# Lines recorded by test_acceptance.py, echoed in the terminal summary so they
# appear in plain `pytest -v` output.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def data_text(name: str) -> str:
    return resources.files("icresolve").joinpath("data", name).read_text()


@pytest.fixture(scope="session")
def listing():
    return parse_microasm(data_text("listing.masm"))


@pytest.fixture(scope="session")
def fig2():
    return parse_microasm(data_text("fig2.masm"))


def corpus_model(n_programs: int = 20, seed: int = 0, max_epochs: int = 40):
    """The scorer trained on the synthetic direct-call corpus."""
    programs = [parse_microasm(t) for t in synthetic_corpus(n_programs, seed)]
    ts = generate_training_pairs(programs, 1.4, rng_seed=seed)
    return train_scorer(ts, cfg=TrainConfig(max_epochs=max_epochs, seed=seed))


@pytest.fixture(scope="session")
def trained_model():
    return corpus_model()


VARS = ("r0", "r1", "r2", "r3", "[fp-0x4]", "[fp-0x8]", "[fp+0x8]", "[0x804a000]")


def random_function_text(rng: np.random.Generator, max_blocks: int = 8,
                         with_icall: bool = True) -> str:
    """A random single-function program (plus a callee for direct calls)
    with branches, loops and, optionally, one icall."""
    n_blocks = int(rng.integers(1, max_blocks + 1))
    sizes = [int(rng.integers(1, 5)) for _ in range(n_blocks)]
    base = 0x1000
    starts = []
    a = base
    for s in sizes:
        starts.append(a)
        a += 4 * (s + 1)
    icall_block = int(rng.integers(0, n_blocks)) if with_icall else -1
    lines = [".section .data 0x804a000", ".slot 0x804a000 0x5", "",
             ".func leaf 0x100", "0x100: ret", f".func main {base:#x}"]
    for i, (start, size) in enumerate(zip(starts, sizes)):
        lines.append(f".block {start:#x}")
        addr = start
        for _ in range(size):
            m = str(rng.choice(["mov", "mov", "add", "cmp", "push", "lea", "call"]))
            src, dst = (str(v) for v in rng.choice(VARS, 2))
            if m == "push":
                text = f"push {src}"
            elif m == "call":
                text = "call leaf"
            elif m == "lea":
                text = f"lea {rng.choice(['[fp-0x4]', '[fp-0x8]'])}, {rng.choice(['r0', 'r1', 'r2'])}"
            elif src.startswith("[") and dst.startswith("["):
                text = f"{m} {src}, r3" if m != "cmp" else f"cmp {src}, r1"
            else:
                text = f"{m} {src}, {dst}"
            lines.append(f"{addr:#x}: {text}")
            addr += 4
        if i == icall_block:
            lines.append(f"{addr:#x}: icall {rng.choice(['r1', '[fp-0x4]', '[0x804a000]'])}")
        elif i == n_blocks - 1:
            lines.append(f"{addr:#x}: ret")
        else:
            kind = rng.random()
            tgt = starts[int(rng.integers(0, n_blocks))]
            if kind < 0.35:
                lines.append(f"{addr:#x}: je {tgt:#x}")
            elif kind < 0.5:
                lines.append(f"{addr:#x}: jmp {tgt:#x}")
            elif kind < 0.6:
                lines.append(f"{addr:#x}: ret")
            else:
                lines.append(f"{addr:#x}: add $0x1, r2")
    if icall_block == n_blocks - 1:
        # an icall cannot end the function: fall into a final ret block
        final = starts[-1] + 4 * (sizes[-1] + 1)
        lines += [f".block {final:#x}", f"{final:#x}: ret"]
    return "\n".join(lines) + "\n"


def random_icall_program_text(rng: np.random.Generator) -> str:
    """Several small functions, a table of function pointers and a main that
    makes indirect calls through the table, a register and a stack slot."""
    n_funcs = int(rng.integers(2, 7))
    lines = []
    table = [f"&f{int(rng.integers(0, n_funcs))}" for _ in range(int(rng.integers(1, 5)))]
    lines.append(".section .data 0x804a000")
    lines += [f".slot {0x804a000 + 4 * i:#x} {v}" for i, v in enumerate(table)]
    for i in range(n_funcs):
        a = 0x100 + 0x40 * i
        lines.append(f".func f{i} {a:#x}")
        body = ["push fp", "mov sp, fp"]
        for j in range(int(rng.integers(0, 3))):
            body.append(f"mov [fp+{8 + 4 * j:#x}], r1")
        if rng.random() < 0.5:
            body.append("mov $0x1, r0")
        body.append("ret")
        lines += [f"{a + 4 * k:#x}: {t}" for k, t in enumerate(body)]
    a = 0x1000
    lines.append(f".func main {a:#x}")
    body = []
    for _ in range(int(rng.integers(1, 5))):
        for _ in range(int(rng.integers(0, 3))):
            body.append(f"push ${int(rng.integers(0, 100)):#x}")
        kind = rng.random()
        if kind < 0.4:
            body.append(f"mov [{0x804a000 + 4 * int(rng.integers(0, len(table))):#x}], r1")
            body.append("icall r1")
        elif kind < 0.7:
            body.append(f"mov $f{int(rng.integers(0, n_funcs))}, [fp-0x4]")
            body.append("icall [fp-0x4]")
        else:
            body.append(f"icall [{0x804a000 + 4 * int(rng.integers(0, len(table))):#x}]")
        if rng.random() < 0.5:
            body.append("mov r0, [fp-0x8]")
            body.append("push [fp-0x8]")
    body += ["mov $0x0, r0", "ret"]
    lines += [f"{a + 4 * k:#x}: {t}" for k, t in enumerate(body)]
    return "\n".join(lines) + "\n"
