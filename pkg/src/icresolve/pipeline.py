"""End-to-end orchestration: parse, L1 candidates, learned scoring, backward
refinement, graph construction, threshold selection, pruning and metrics."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .cfg import CandidateMap, Dcfg, build_dcfg, build_xref_map, l1_candidates
from .features import FeatureCache
from .frontend import TraceSet
from .graph import (MetricsReport, Prediction, ScoredGraph, build_graph, calibrate_threshold,
                    compute_metrics, prune)
from .model import AnalysisConfig, Program, callsite_at
from .refine import ResolvedTargets, adjust_scores, resolve_callsite_targets
from .scorer import ScorerModel


@dataclass(frozen=True)
class ModePreset:
    name: str
    delta: float
    objective: str


MODES = {
    "C-R": ModePreset("C-R", 0.1, "recall-preserving"),
    "C-F": ModePreset("C-F", 0.1, "f1-preserving"),
    "A-R": ModePreset("A-R", 0.5, "recall-preserving"),
    "A-F": ModePreset("A-F", 0.5, "f1-preserving"),
}


class StageError(Exception):
    """An error raised by one pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    candidates: CandidateMap
    l2a_scores: dict[tuple[int, int], float]
    resolved: Optional[ResolvedTargets]
    graph: ScoredGraph
    threshold: float
    pruned: Prediction
    metrics: Optional[MetricsReport]


def l2a_scores(p: Program, cands: CandidateMap, model: ScorerModel,
               cfg: AnalysisConfig) -> dict[tuple[int, int], float]:
    pairs = sorted(cands.pairs())
    if not pairs:
        return {}
    cache = FeatureCache(p, cfg.tau_arg, cfg.tau_ret)
    X = np.stack([cache.pair(c, f) for c, f in pairs])
    s = model.score(X)
    return {pair: float(v) for pair, v in zip(pairs, s)}


def refine(p: Program, d: Dcfg, cands: CandidateMap, scores: Mapping[tuple[int, int], float],
           cfg: AnalysisConfig) -> tuple[dict[tuple[int, int], float], ResolvedTargets]:
    # callsites with no candidates cannot change any score
    sites = [callsite_at(p, c) for c in sorted(cands.targets) if cands.targets[c]]
    rt = resolve_callsite_targets(p, d, build_xref_map(p), sites, cfg)
    full = {pair: scores.get(pair, 0.0) for pair in cands.pairs()}
    return adjust_scores(full, rt, cfg.delta), rt


def provenance(cfg: AnalysisConfig, stages: list[str]) -> dict[str, str]:
    out = {"stages": ",".join(stages)}
    for k, v in sorted(dataclasses.asdict(cfg).items()):
        out[f"config.{k}"] = str(v)
    return out


def run_pipeline(p: Program, cfg: AnalysisConfig, model: Optional[ScorerModel] = None,
                 external: Optional[Mapping[int, frozenset[int]]] = None,
                 traces: Optional[TraceSet] = None, objective: str = "recall-preserving",
                 target_recall: float = 1.0, skip_l2b: bool = False) -> PipelineResult:
    """Run every stage. Without traces the configured ``prune_threshold`` is
    used; with traces the threshold is calibrated on a seeded sample and the
    metrics are computed against the full trace set."""
    cfg.validate()

    def stage(name, fn, *a, **kw):
        try:
            return fn(*a, **kw)
        except StageError:
            raise
        except (ValueError, KeyError) as e:
            raise StageError(name, e) from e

    d = stage("dcfg", build_dcfg, p)
    cands = stage("L1", l1_candidates, p, d, external)
    stages = ["L1"]
    scores: dict[tuple[int, int], float] = {}
    if model is not None:
        scores = stage("L2a", l2a_scores, p, cands, model, cfg)
        stages.append("L2a")
    rt = None
    final = scores
    if not skip_l2b:
        final, rt = stage("L2b", refine, p, d, cands, scores, cfg)
        stages.append("L2b")
    g = stage("graph", build_graph, cands, final, provenance(cfg, stages))
    if traces is not None:
        t = stage("calibrate", calibrate_threshold, g, traces, objective, target_recall,
                  cfg.trace_sample_fraction, cfg.rng_seed)
    else:
        t = cfg.prune_threshold
    pruned = prune(g, t)
    metrics = compute_metrics(pruned, traces) if traces is not None else None
    return PipelineResult(cands, scores, rt, g, t, pruned, metrics)
