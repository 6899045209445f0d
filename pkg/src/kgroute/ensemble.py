"""Routed ensembling: top-k pruning, probability-weighted tag voting, baselines."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .agents import AgentAnswer
from .hgnn import RouteDistribution
from .train import PerformanceRecord

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class VoteConfig:
    k: int | None = None  # None means the whole pool
    theta: float = 0.5
    missing: str = "redistribute"  # redistribute | empty

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.missing not in ("redistribute", "empty"):
            raise ValueError("missing must be redistribute|empty")


def prune_topk(dist: RouteDistribution, k: int) -> RouteDistribution:
    """Keep the k most probable agents (ties go to the lexically smaller id) and renormalize."""
    n = len(dist.agent_ids)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if k == n:
        return dist
    order = sorted(range(n), key=lambda i: (-dist.probs[i], dist.agent_ids[i]))
    kept = sorted(order[:k])
    p = dist.probs[kept]
    return RouteDistribution(tuple(dist.agent_ids[i] for i in kept), p / p.sum(), dict(dist.provenance))


@dataclass(frozen=True)
class VoteTrace:
    query_id: str
    scores: dict[str, float]
    selected: frozenset[str]
    weights: dict[str, float]
    missing: tuple[str, ...] = ()

    def rows(self) -> list[dict]:
        return [{"query_id": self.query_id, "tag": t, "score": s, "included": t in self.selected}
                for t, s in sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))]


def weighted_vote_trace(answers: Mapping[str, AgentAnswer], dist: RouteDistribution,
                        config: VoteConfig = VoteConfig()) -> VoteTrace:
    if config.k is not None and config.k < len(dist.agent_ids):
        dist = prune_topk(dist, config.k)
    weights = dict(zip(dist.agent_ids, dist.probs.tolist()))
    missing = tuple(a for a in dist.agent_ids if a not in answers)
    if missing:
        logger.warning("query %s: no answer from %d routed agents", dist.provenance.get("query_id", "?"),
                       len(missing))
        if config.missing == "redistribute":
            present = {a: w for a, w in weights.items() if a in answers}
            total = sum(present.values())
            weights = {a: w / total for a, w in present.items()} if total > 0 else {}
        else:
            weights = {a: w for a, w in weights.items() if a in answers}
    scores: dict[str, float] = {}
    for a, w in weights.items():
        for t in answers[a].tags:
            scores[t] = scores.get(t, 0.0) + w
    selected = frozenset(t for t, s in scores.items() if s >= config.theta - TIE_TOL)
    qid = next(iter(answers.values())).query_id if answers else ""
    return VoteTrace(qid, scores, selected, weights, missing)


def weighted_vote(answers: Mapping[str, AgentAnswer], dist: RouteDistribution,
                  config: VoteConfig = VoteConfig()) -> frozenset[str]:
    """Tags whose routed probability mass reaches theta (ties included)."""
    return weighted_vote_trace(answers, dist, config).selected


def majority_vote(answers: Mapping[str, AgentAnswer] | Sequence[AgentAnswer]) -> frozenset[str]:
    """Tags predicted by at least half of the agents, counted exactly."""
    items = list(answers.values()) if isinstance(answers, Mapping) else list(answers)
    n = len(items)
    counts: dict[str, int] = {}
    for a in items:
        for t in a.tags:
            counts[t] = counts.get(t, 0) + 1
    return frozenset(t for t, c in counts.items() if Fraction(c, n) >= Fraction(1, 2))


def uniform_distribution(agent_ids: Sequence[str]) -> RouteDistribution:
    n = len(agent_ids)
    return RouteDistribution(tuple(agent_ids), np.full(n, 1.0 / n))


@dataclass(frozen=True)
class OracleResult:
    scope: str
    selection: dict[str, str]  # query-id -> agent-id (a single agent for every query when per-setting)
    f1: float


def best_agent_oracle(perf: PerformanceRecord, scope: str = "per-setting",
                      queries: Sequence[str] | None = None) -> OracleResult:
    """Per-setting: one agent maximizing mean F1. Per-query: the best agent for each query."""
    qids = sorted(queries if queries is not None else perf)
    if not qids:
        raise ValueError("no queries")
    agents = sorted(perf[qids[0]])
    F = np.array([[perf[q][a] for a in agents] for q in qids])
    if scope == "per-setting":
        j = int(np.argmax(F.mean(axis=0)))
        return OracleResult(scope, {q: agents[j] for q in qids}, float(F[:, j].mean()))
    if scope == "per-query":
        js = F.argmax(axis=1)
        return OracleResult(scope, {q: agents[j] for q, j in zip(qids, js)}, float(F.max(axis=1).mean()))
    raise ValueError(f"unknown oracle scope {scope!r}")
