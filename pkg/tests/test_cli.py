import json
import subprocess
import sys

import pytest

from icresolve import cli
from icresolve.frontend import format_traces, parse_candidates
from icresolve.graph import deserialize_graph
from icresolve.synth import main as synth_main, poc_case


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A five-program corpus, a quickly trained model and the payload case."""
    d = tmp_path_factory.mktemp("cli")
    synth_main([str(d / "corpus"), "-n", "5", "--seed", "3", "--poc"])
    assert cli.main(["train", str(d / "corpus"), "--out", str(d / "model.bin"),
                     "--epochs", "3"]) == 0
    return d


def analyze(work, out, *extra):
    poc = work / "corpus" / "poc"
    return cli.main(["analyze", str(poc / "poc.masm"), "--model", str(work / "model.bin"),
                     "--out", str(work / out), *extra])


def test_train_is_deterministic(work, tmp_path):
    assert cli.main(["train", str(work / "corpus"), "--out", str(tmp_path / "again.bin"),
                     "--epochs", "3"]) == 0
    assert (tmp_path / "again.bin").read_bytes() == (work / "model.bin").read_bytes()


def test_train_errors(tmp_path, capsys):
    assert cli.main(["train", str(tmp_path), "--out", str(tmp_path / "m.bin")]) == 2
    assert str(tmp_path) in capsys.readouterr().err
    (tmp_path / "bad.masm").write_text(".func f 0x100\n0x100: jump 0x100\n")
    assert cli.main(["train", str(tmp_path), "--out", str(tmp_path / "m.bin")]) == 2
    assert "bad.masm:2" in capsys.readouterr().err


def test_analyze_threshold_zero_matches_l1(work):
    assert analyze(work, "plain", "--threshold", "0") == 0
    out = work / "plain"
    g = deserialize_graph((out / "graph.txt").read_text())
    pruned = parse_candidates((out / "pruned.txt").read_text())
    assert pruned == {c: frozenset(f for f, _ in es) for c, es in g.edges.items()}
    assert g.provenance["stages"] == "L1,L2a,L2b"
    assert not (out / "metrics.json").exists()
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["height"] == 40 and m["config"]["timeout"] == 250.0
    assert m["threshold"] == 0.0


def test_analyze_with_traces_and_mode(work, capsys):
    traces = work / "corpus" / "poc" / "poc.traces"
    assert analyze(work, "cr", "--mode", "C-R", "--traces", str(traces)) == 0
    assert "AICT" in capsys.readouterr().out
    m = json.loads((work / "cr" / "manifest.json").read_text())
    assert m["mode"] == "C-R" and m["config"]["delta"] == 0.1
    assert m["objective"] == "recall-preserving"
    metrics = json.loads((work / "cr" / "metrics.json").read_text())
    assert metrics["n"] == len(poc_case().icall_of)


def test_manifest_rerun_is_byte_identical(work):
    traces = work / "corpus" / "poc" / "poc.traces"
    assert analyze(work, "first", "--mode", "A-F", "--traces", str(traces), "--seed", "5") == 0
    assert cli.main(["analyze", "--manifest", str(work / "first" / "manifest.json"),
                     "--out", str(work / "second")]) == 0
    for name in ("graph.txt", "pruned.txt", "metrics.json"):
        assert (work / "first" / name).read_bytes() == (work / "second" / name).read_bytes()
    a, b = (json.loads((work / d / "manifest.json").read_text()) for d in ("first", "second"))
    assert cli.comparable_manifest(a) == cli.comparable_manifest(b)


def test_manifest_detects_changed_inputs(work, tmp_path):
    prog = tmp_path / "p.masm"
    prog.write_text(poc_case().text)
    assert cli.main(["analyze", str(prog), "--skip-l2a", "--out", str(tmp_path / "o")]) == 0
    prog.write_text(poc_case().text + "\n# edited\n")
    code = cli.main(["analyze", "--manifest", str(tmp_path / "o" / "manifest.json"),
                     "--out", str(tmp_path / "o2")])
    assert code == 4


def test_exit_codes(work, tmp_path):
    prog = work / "corpus" / "poc" / "poc.masm"
    assert cli.main(["analyze", str(prog), "--out", str(tmp_path)]) == 4        # no model
    assert cli.main(["analyze", str(prog), "--skip-l2a", "--height", "0",
                     "--out", str(tmp_path)]) == 4
    bad = tmp_path / "bad.masm"
    bad.write_text(".func f 0x100\n0x100: ret\n0x100: ret\n")
    assert cli.main(["analyze", str(bad), "--skip-l2a", "--out", str(tmp_path)]) == 2
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"not a model")
    assert cli.main(["analyze", str(prog), "--model", str(junk), "--out", str(tmp_path)]) == 3
    assert cli.main(["analyze", str(prog), "--skip-l2a", "--candidates",
                     str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    cands = tmp_path / "c.txt"
    cands.write_text("0x1: 0x2\n")                           # not an icall
    assert cli.main(["analyze", str(prog), "--skip-l2a", "--candidates", str(cands),
                     "--out", str(tmp_path)]) == 2


def test_config_precedence(tmp_path, monkeypatch):
    conf = tmp_path / "exp.conf"
    conf.write_text("# recipe\nheight = 12\ndelta = 0.3\nsweep-depth = 2\n")
    ap = cli.build_parser()

    def resolve(*argv):
        return cli.resolve_config(ap.parse_args(["calibrate", "g", "--traces", "t", *argv]))

    cfg, obj, _, _ = resolve("--config", str(conf))
    assert (cfg.height, cfg.delta, cfg.sweep_depth, cfg.xref_depth) == (12, 0.3, 2, 3)
    cfg, obj, _, _ = resolve("--config", str(conf), "--mode", "A-F")
    assert cfg.delta == 0.5 and obj == "f1-preserving" and cfg.height == 12
    cfg, _, _, _ = resolve("--config", str(conf), "--mode", "A-F", "--delta", "0.2",
                           "--height", "3")
    assert (cfg.delta, cfg.height) == (0.2, 3)
    monkeypatch.setenv(cli.CONFIG_ENV, str(conf))
    assert resolve()[0].height == 12
    conf.write_text("bogus = 1\n")
    with pytest.raises(cli.ConfigError):
        resolve()


def test_prune_calibrate_eval_refine(work, tmp_path, capsys):
    assert analyze(work, "tools", "--threshold", "0") == 0
    graph = work / "tools" / "graph.txt"
    traces = work / "corpus" / "poc" / "poc.traces"
    assert cli.main(["prune", str(graph), "--threshold", "0.5", "--out",
                     str(tmp_path / "p.txt")]) == 0
    assert cli.main(["prune", str(graph), "--threshold", "2"]) == 4
    capsys.readouterr()
    assert cli.main(["calibrate", str(graph), "--traces", str(traces)]) == 0
    t = float(capsys.readouterr().out)
    assert 0.0 <= t <= 1.0
    assert cli.main(["eval", str(tmp_path / "p.txt"), str(traces),
                     "--out", str(tmp_path / "m.json")]) == 0
    assert "aict" in json.loads((tmp_path / "m.json").read_text())
    prog = work / "corpus" / "poc" / "poc.masm"
    assert cli.main(["refine", str(prog), str(graph), "--out", str(tmp_path / "r.txt")]) == 0
    r = deserialize_graph((tmp_path / "r.txt").read_text())
    assert r.pairs() == deserialize_graph(graph.read_text()).pairs()
    (tmp_path / "empty.traces").write_text(format_traces([]))
    assert cli.main(["calibrate", str(graph), "--traces", str(tmp_path / "empty.traces")]) == 2


def test_console_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "icresolve.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "icresolve" in out.stdout
