"""Confidence-annotated indirect call graph, threshold pruning, trace-guided
threshold calibration and precision/recall/AICT metrics."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .cfg import CandidateMap
from .frontend import ParseError, TraceSet

Prediction = dict[int, frozenset[int]]
SCORE_DECIMALS = 6


@dataclass
class ScoredGraph:
    edges: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def scores(self) -> dict[tuple[int, int], float]:
        return {(c, f): s for c, es in self.edges.items() for f, s in es}

    def pairs(self) -> set[tuple[int, int]]:
        return {(c, f) for c, es in self.edges.items() for f, _ in es}

    def __eq__(self, other) -> bool:
        return isinstance(other, ScoredGraph) and self.edges == other.edges \
            and self.provenance == other.provenance


def build_graph(candidates: CandidateMap | Mapping[int, Iterable[int]],
                scores: Mapping[tuple[int, int], float],
                provenance: Optional[Mapping[str, str]] = None) -> ScoredGraph:
    targets = candidates.targets if isinstance(candidates, CandidateMap) else candidates
    allowed = {(c, f) for c, fs in targets.items() for f in fs}
    extra = sorted(set(scores) - allowed)
    if extra:
        c, f = extra[0]
        raise ValueError(f"score for non-candidate pair {c:#x} -> {f:#x}")
    edges = {}
    for c in sorted(targets):
        es = []
        for f in sorted(targets[c]):
            s = float(scores.get((c, f), 0.0))
            if not 0.0 <= s <= 1.0:
                raise ValueError(f"score {s} outside [0, 1] for {c:#x} -> {f:#x}")
            # stored at the serialized precision so files and memory agree
            es.append((f, round(s, SCORE_DECIMALS)))
        edges[c] = es
    prov = dict(provenance or {})
    if isinstance(candidates, CandidateMap):
        prov.setdefault("candidates", candidates.provenance)
    return ScoredGraph(edges, prov)


def prune(g: ScoredGraph, threshold: float) -> Prediction:
    return {c: frozenset(f for f, s in es if s >= threshold) for c, es in g.edges.items()}


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class CallsiteCounts:
    callsite: int
    tp: int
    fp: int
    fn: int


@dataclass
class MetricsReport:
    n: int
    aict: Optional[float]
    global_precision: Optional[float]
    global_recall: Optional[float]
    global_f1: Optional[float]
    aict_precision: Optional[float]
    aict_recall: Optional[float]
    aict_f1: Optional[float]
    counts: list[CallsiteCounts] = field(default_factory=list)
    # callsites whose per-callsite precision/recall used the empty-set convention
    zero_denominator: dict[str, list[int]] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "aict": self.aict,
            "global": {"precision": self.global_precision, "recall": self.global_recall,
                       "f1": self.global_f1},
            "aict_metrics": {"precision": self.aict_precision, "recall": self.aict_recall,
                             "f1": self.aict_f1},
            "zero_denominator": {k: [f"{c:#x}" for c in v]
                                 for k, v in self.zero_denominator.items()},
            "callsites": [{"callsite": f"{c.callsite:#x}", "tp": c.tp, "fp": c.fp, "fn": c.fn}
                          for c in self.counts],
        }


def _f1(p: Optional[float], r: Optional[float]) -> Optional[float]:
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _ratio(num: int, den: int, both_empty: bool) -> tuple[float, bool]:
    if den:
        return num / den, False
    return (1.0 if both_empty else 0.0), True


def compute_metrics(pred: Mapping[int, Iterable[int]],
                    truth: TraceSet | Iterable[tuple[int, int]]) -> MetricsReport:
    pairs = truth.pairs if isinstance(truth, TraceSet) else set(truth)
    by_site: dict[int, set[int]] = {}
    for c, f in pairs:
        by_site.setdefault(c, set()).add(f)
    counts = []
    precisions, recalls = [], []
    zero = {"precision": [], "recall": []}
    total = 0
    for c in sorted(pred):
        p_i = set(pred[c])
        t_i = by_site.get(c, set())
        tp, fp, fn = len(p_i & t_i), len(p_i - t_i), len(t_i - p_i)
        counts.append(CallsiteCounts(c, tp, fp, fn))
        total += len(p_i)
        empty = not p_i and not t_i
        prec, z = _ratio(tp, tp + fp, empty)
        if z:
            zero["precision"].append(c)
        rec, z = _ratio(tp, tp + fn, empty)
        if z:
            zero["recall"].append(c)
        precisions.append(prec)
        recalls.append(rec)
    n = len(counts)
    stp = sum(c.tp for c in counts)
    sfp = sum(c.fp for c in counts)
    sfn = sum(c.fn for c in counts)
    gp = stp / (stp + sfp) if stp + sfp else None
    gr = stp / (stp + sfn) if stp + sfn else None
    ap = sum(precisions) / n if n else None
    ar = sum(recalls) / n if n else None
    return MetricsReport(
        n=n,
        aict=total / n if n else None,
        global_precision=gp, global_recall=gr, global_f1=_f1(gp, gr),
        aict_precision=ap, aict_recall=ar, aict_f1=_f1(ap, ar),
        counts=counts,
        zero_denominator={k: v for k, v in zero.items() if v},
    )


# -- calibration -------------------------------------------------------------

def sample_traces(traces: TraceSet, fraction: float, rng_seed: int) -> TraceSet:
    if not 0.0 < fraction <= 1.0:
        raise ValueError("sample fraction must lie in (0, 1]")
    ordered = sorted(traces.pairs)
    k = math.ceil(fraction * len(ordered))
    rng = np.random.default_rng(rng_seed)
    idx = sorted(rng.choice(len(ordered), size=k, replace=False))
    return TraceSet(frozenset(ordered[i] for i in idx))


def candidate_thresholds(g: ScoredGraph) -> list[float]:
    return sorted({0.0} | {s for es in g.edges.values() for _, s in es})


def calibrate_threshold(g: ScoredGraph, traces: TraceSet, objective: str = "recall-preserving",
                        target_recall: float = 1.0, sample_fraction: float = 0.3,
                        rng_seed: int = 0) -> float:
    """Pick a pruning threshold from a seeded sample of observed edges.

    Metrics are evaluated only on callsites that occur in the sample. Recall-
    preserving returns the largest threshold whose averaged recall reaches
    ``target_recall`` (0 if none does); F1-preserving returns the threshold
    with the best averaged F1, preferring the smaller on ties.
    """
    if not len(traces):
        raise ValueError("empty trace set")
    if objective not in ("recall-preserving", "f1-preserving"):
        raise ValueError(f"unknown objective {objective!r}")
    sample = sample_traces(traces, sample_fraction, rng_seed)
    sites = {c for c, _ in sample.pairs}
    sub = ScoredGraph({c: es for c, es in g.edges.items() if c in sites})
    for c in sites - set(sub.edges):
        sub.edges[c] = []
    best_t, best_v = 0.0, -1.0
    for t in candidate_thresholds(g):
        rep = compute_metrics(prune(sub, t), sample)
        if objective == "recall-preserving":
            if rep.aict_recall is not None and rep.aict_recall >= target_recall:
                best_t = t
        else:
            v = rep.aict_f1 if rep.aict_f1 is not None else 0.0
            if v > best_v:
                best_t, best_v = t, v
    return best_t


# -- serialization -----------------------------------------------------------

_RECORD = re.compile(r"^(0x[0-9a-f]+):((?:\s+0x[0-9a-f]+@\d+\.\d{6})*)\s*$")


def serialize_graph(g: ScoredGraph) -> str:
    lines = [f"# {k}={g.provenance[k]}" for k in sorted(g.provenance)]
    for c in sorted(g.edges):
        recs = "".join(f" {f:#x}@{s:.6f}" for f, s in sorted(g.edges[c]))
        lines.append(f"{c:#x}:{recs}")
    return "".join(line + "\n" for line in lines)


def deserialize_graph(text: str) -> ScoredGraph:
    g = ScoredGraph()
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].strip().partition("=")
            if sep:
                g.provenance[key.strip()] = val.strip()
            continue
        m = _RECORD.match(line)
        if not m:
            raise ParseError(no, f"malformed graph record {line!r}")
        c = int(m.group(1), 16)
        if c in g.edges:
            raise ParseError(no, f"duplicate callsite {c:#x}")
        es = []
        for tok in m.group(2).split():
            f, s = tok.split("@")
            score = float(s)
            if not 0.0 <= score <= 1.0:
                raise ParseError(no, f"score {s} outside [0, 1]")
            es.append((int(f, 16), score))
        if len({f for f, _ in es}) != len(es):
            raise ParseError(no, f"duplicate callee for {c:#x}")
        g.edges[c] = sorted(es)
    return g
