"""Command-line interface.

Exit codes: 0 success, 2 input/parse error, 3 model error, 4 configuration
error, 5 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Optional, Sequence

from . import __version__
from .cfg import CandidateMap, CfgError, build_dcfg
from .frontend import (ParseError, format_candidates, parse_candidates, parse_microasm,
                       parse_traces)
from .graph import (build_graph, calibrate_threshold, compute_metrics, deserialize_graph, prune,
                    serialize_graph)
from .model import AnalysisConfig
from .pipeline import MODES, StageError, provenance, refine, run_pipeline
from .scorer import ModelError, ScorerModel, TrainConfig, generate_training_pairs, train_scorer

log = logging.getLogger("icresolve")

EXIT_OK, EXIT_PARSE, EXIT_MODEL, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3, 4, 5
CONFIG_ENV = "ICRESOLVE_CONFIG"
# manifest keys that legitimately differ between otherwise identical runs
VOLATILE_KEYS = ("wall_clock_seconds",)


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

_FLAG_FIELDS = {
    "height": "height", "sweep_depth": "sweep_depth", "xref_depth": "xref_depth",
    "timeout": "timeout", "delta": "delta", "threshold": "prune_threshold",
    "sample": "trace_sample_fraction", "seed": "rng_seed",
}
_EXTRA_KEYS = {"mode", "objective", "target_recall"}


def _coerce(key: str, raw: str) -> Any:
    fields = {f.name: f for f in dataclasses.fields(AnalysisConfig)}
    if key in _EXTRA_KEYS:
        return float(raw) if key == "target_recall" else raw
    if key not in fields:
        raise ConfigError(f"unknown configuration key {key!r}")
    default = getattr(AnalysisConfig(), key)
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{no}: expected key=value")
        key = key.strip().replace("-", "_")
        out[key] = _coerce(key, val.strip())
    return out


def resolve_config(args: argparse.Namespace) -> tuple[AnalysisConfig, str, float, Optional[str]]:
    """Layer defaults, config file, mode preset and explicit flags (in that
    order of increasing precedence)."""
    values: dict[str, Any] = {}
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        values.update(read_config_file(Path(path)))
    mode = args.mode or values.pop("mode", None)
    objective = values.pop("objective", "recall-preserving")
    target_recall = values.pop("target_recall", 1.0)
    if mode is not None:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        values["delta"] = MODES[mode].delta
        objective = MODES[mode].objective
    for flag, field in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    if getattr(args, "deterministic_time", False):
        values["deterministic_time"] = True
    if getattr(args, "objective", None):
        objective = args.objective
    if getattr(args, "target_recall", None) is not None:
        target_recall = args.target_recall
    try:
        cfg = AnalysisConfig(**values).validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if objective not in ("recall-preserving", "f1-preserving"):
        raise ConfigError(f"unknown objective {objective!r}")
    if not 0.0 <= target_recall <= 1.0:
        raise ConfigError("target_recall must lie in [0, 1]")
    return cfg, objective, target_recall, mode


# -- helpers -------------------------------------------------------------------

def _read(path: str | Path) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read {path}: {e}") from None


def _parse(path: str, fn):
    try:
        return fn(_read(path))
    except ParseError as e:
        where = f"{path}:{e.line}" if e.line else str(path)
        raise ParseError(None, f"{where}: {e.message}") from None


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def comparable_manifest(m: dict) -> dict:
    return {k: v for k, v in m.items() if k not in VOLATILE_KEYS}


# -- subcommands ---------------------------------------------------------------

def cmd_analyze(args: argparse.Namespace) -> int:
    if args.manifest:
        _load_manifest_into(args)
    if not args.program:
        raise ConfigError("analyze needs a program file (or --manifest)")
    if args.model is None and not args.skip_l2a:
        raise ConfigError("analyze needs --model unless --skip-l2a is given")
    cfg, objective, target_recall, mode = resolve_config(args)
    t0 = time.monotonic()
    p = _parse(args.program, parse_microasm)
    external = _parse(args.candidates, parse_candidates) if args.candidates else None
    traces = _parse(args.traces, parse_traces) if args.traces else None
    model = None if args.skip_l2a else ScorerModel.load(args.model)
    res = run_pipeline(p, cfg, model, external, traces, objective, target_recall)

    out = Path(args.out)
    graph_text = serialize_graph(res.graph)
    _write(out / "graph.txt", graph_text)
    _write(out / "pruned.txt", format_candidates(res.pruned))
    if res.metrics is not None:
        _write(out / "metrics.json", json.dumps(res.metrics.as_dict(), indent=2) + "\n")
    timed_out = {f"{c:#x}": v for c, v in sorted(res.resolved.timed_out.items())} \
        if res.resolved else {}
    for c, v in timed_out.items():
        if v:
            log.warning("L2b budget exhausted at callsite %s; partial targets kept", c)
    inputs = {"program": args.program, "candidates": args.candidates, "model": args.model,
              "traces": args.traces}
    manifest = {
        "tool": "icresolve",
        "version": __version__,
        "command": "analyze",
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": _sha256(v)}
                   for k, v in inputs.items() if v},
        "config": dataclasses.asdict(cfg),
        "mode": mode,
        "objective": objective,
        "target_recall": target_recall,
        "skip_l2a": bool(args.skip_l2a),
        "stages": res.graph.provenance["stages"],
        "threshold": res.threshold,
        "timed_out": timed_out,
        "outputs": {"graph.txt": hashlib.sha256(graph_text.encode()).hexdigest()},
        "wall_clock_seconds": round(time.monotonic() - t0, 3),
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if res.metrics is not None:
        m = res.metrics
        print(f"threshold {res.threshold:.6f}  AICT {m.aict:.3f}  "
              f"AICT-recall {m.aict_recall:.3f}  AICT-precision {m.aict_precision:.3f}")
    else:
        print(f"threshold {res.threshold:.6f}  callsites {len(res.pruned)}  "
              f"edges {sum(len(v) for v in res.pruned.values())}")
    return EXIT_OK


def _load_manifest_into(args: argparse.Namespace) -> None:
    try:
        m = json.loads(_read(args.manifest))
        inputs, config = m["inputs"], m["config"]
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"malformed manifest {args.manifest}: {e}") from None
    for key in ("program", "candidates", "model", "traces"):
        if key in inputs:
            path = inputs[key]["path"]
            if Path(path).exists() and _sha256(path) != inputs[key]["sha256"]:
                raise ConfigError(f"{key} input {path} changed since the manifest was written")
            setattr(args, key, path)
    for flag, field in _FLAG_FIELDS.items():
        setattr(args, flag, config[field])
    args.deterministic_time = bool(config.get("deterministic_time", False))
    args.skip_l2a = bool(m.get("skip_l2a", False))
    args.mode = m.get("mode")
    args.objective = m.get("objective")
    args.target_recall = m.get("target_recall")
    # the manifest is the complete recipe: ignore config files
    args.config = None
    os.environ.pop(CONFIG_ENV, None)
    for k in ("tau_arg", "tau_ret"):
        if config.get(k) != getattr(AnalysisConfig(), k):
            raise ConfigError(f"manifest sets non-default {k}; not reproducible from flags")


def cmd_train(args: argparse.Namespace) -> int:
    corpus_dir = Path(args.corpus)
    files = sorted(corpus_dir.glob("*.masm")) if corpus_dir.is_dir() else []
    if not files:
        raise InputError(f"no .masm programs in corpus directory {corpus_dir}")
    programs = [_parse(str(f), parse_microasm) for f in files]
    if not any(i.mnemonic == "call" for p in programs for i in p.instructions()):
        raise InputError(f"corpus {corpus_dir} has no direct calls")
    ts = generate_training_pairs(programs, args.negatives, args.seed)
    tc = TrainConfig(seed=args.seed, max_epochs=args.epochs)
    try:
        model = train_scorer(ts, cfg=tc)
    except ValueError as e:
        raise ModelError(str(e)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    h = model.history[-1]
    print(f"pairs {len(ts)}  epochs {len(model.history)}  loss {h['loss']:.4f}  "
          f"accuracy {h['accuracy']:.4f}  val_loss {h['val_loss']:.4f}  "
          f"val_accuracy {h['val_accuracy']:.4f}")
    return EXIT_OK


def cmd_refine(args: argparse.Namespace) -> int:
    cfg, _, _, _ = resolve_config(args)
    p = _parse(args.program, parse_microasm)
    g = _parse(args.graph, deserialize_graph)
    d = build_dcfg(p)
    cands = {c: frozenset(f for f, _ in es) for c, es in g.edges.items()}
    cm = CandidateMap(cands, g.provenance.get("candidates", "graph"))
    scores, rt = refine(p, d, cm, g.scores(), cfg)
    stages = [s for s in g.provenance.get("stages", "").split(",") if s]
    prov = {**g.provenance, **provenance(cfg, stages + ["L2b"])}
    _write(Path(args.out), serialize_graph(build_graph(cm, scores, prov)))
    for c, v in sorted(rt.timed_out.items()):
        if v:
            log.warning("L2b budget exhausted at callsite %#x; partial targets kept", c)
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    if args.threshold is None:
        raise ConfigError("prune needs --threshold")
    if not 0.0 <= args.threshold <= 1.0:
        raise ConfigError("threshold must lie in [0, 1]")
    g = _parse(args.graph, deserialize_graph)
    text = format_candidates(prune(g, args.threshold))
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace) -> int:
    cfg, objective, target_recall, _ = resolve_config(args)
    g = _parse(args.graph, deserialize_graph)
    traces = _parse(args.traces, parse_traces)
    if not len(traces):
        raise InputError(f"trace file {args.traces} is empty")
    t = calibrate_threshold(g, traces, objective, target_recall, cfg.trace_sample_fraction,
                            cfg.rng_seed)
    print(f"{t:.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    pred = _parse(args.prediction, parse_candidates)
    traces = _parse(args.traces, parse_traces)
    text = json.dumps(compute_metrics(pred, traces).as_dict(), indent=2) + "\n"
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def _analysis_flags(ap: argparse.ArgumentParser) -> None:
    g = ap.add_argument_group("analysis parameters (defaults: height 40, sweep depth 1, "
                              "xref depth 3, timeout 250 s, delta 0.1, sample 0.3)")
    g.add_argument("--height", type=int, help="backward path bound in basic blocks")
    g.add_argument("--sweep-depth", dest="sweep_depth", type=int,
                   help="pointer-chasing depth of the memory sweep")
    g.add_argument("--xref-depth", dest="xref_depth", type=int,
                   help="caller levels followed through direct calls")
    g.add_argument("--timeout", type=float, help="per-callsite refinement budget in seconds")
    g.add_argument("--deterministic-time", dest="deterministic_time", action="store_true",
                   help="count the budget in inspection steps instead of wall time")
    g.add_argument("--delta", type=float, help="score adjustment applied by refinement")
    g.add_argument("--threshold", type=float, help="pruning threshold used without traces")
    g.add_argument("--mode", choices=sorted(MODES), help="preset for delta and objective")
    g.add_argument("--objective", choices=("recall-preserving", "f1-preserving"))
    g.add_argument("--target-recall", dest="target_recall", type=float)
    g.add_argument("--sample", type=float, help="fraction of traces used for calibration")
    g.add_argument("--seed", type=int, help="seed for trace sampling")
    g.add_argument("--config", help=f"key=value config file (default: ${CONFIG_ENV})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icresolve",
                                 description="layered indirect-call target resolution")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="run the full pipeline")
    a.add_argument("program", nargs="?")
    a.add_argument("--candidates", help="external L1 candidate file")
    a.add_argument("--model", help="trained scorer model")
    a.add_argument("--skip-l2a", dest="skip_l2a", action="store_true",
                   help="do not score with the learned model (scores start at 0)")
    a.add_argument("--traces", help="observed edges for calibration and metrics")
    a.add_argument("--manifest", help="re-run using the inputs and config of a manifest")
    a.add_argument("--out", required=True, help="output directory")
    _analysis_flags(a)
    a.set_defaults(fn=cmd_analyze)

    t = sub.add_parser("train", help="train the scorer on a corpus directory")
    t.add_argument("corpus")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--negatives", type=float, default=1.4, help="negatives per positive")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("refine", help="apply backward refinement to an existing graph")
    r.add_argument("program")
    r.add_argument("graph")
    r.add_argument("--out", required=True)
    _analysis_flags(r)
    r.set_defaults(fn=cmd_refine)

    pr = sub.add_parser("prune", help="threshold a graph")
    pr.add_argument("graph")
    pr.add_argument("--threshold", type=float)
    pr.add_argument("--out")
    pr.set_defaults(fn=cmd_prune)

    c = sub.add_parser("calibrate", help="choose a threshold from sampled traces")
    c.add_argument("graph")
    c.add_argument("--traces", required=True)
    _analysis_flags(c)
    c.set_defaults(fn=cmd_calibrate)

    e = sub.add_parser("eval", help="metrics of a prediction against traces")
    e.add_argument("prediction")
    e.add_argument("traces")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)
    return ap


def exit_code_for(e: BaseException) -> int:
    if isinstance(e, StageError):
        e = e.cause
    if isinstance(e, ConfigError):
        return EXIT_CONFIG
    if isinstance(e, ModelError):
        return EXIT_MODEL
    if isinstance(e, (ParseError, InputError, CfgError)):
        return EXIT_PARSE
    return EXIT_INVARIANT


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as e:  # every failure maps to a documented exit code
        code = exit_code_for(e)
        if code == EXIT_INVARIANT:
            log.debug("internal error", exc_info=True)
        print(f"icresolve {args.command}: error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
