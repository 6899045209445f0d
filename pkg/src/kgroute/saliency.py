"""Gradient-norm entity salience and thresholded subgraph retrieval."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import QUERY_MENTIONS, GraphStats, RoutedGraph, graph_stats, induced_subgraph
from .hgnn import CompiledGraph, ParamStore, forward
from .metrics import RetrievalRow, retrieval_row
from .train import target_distribution

logger = logging.getLogger(__name__)

# Which entity representation the loss is differentiated against.
#   final:     h^(L). Only query/agent states feed the scorer, so this is zero for
#              every entity; kept for completeness and reported as degenerate.
#   projected: h^(0) = relu(Proj x), the deepest entity state that still reaches
#              the scorer for entities within L hops.
#   embedding: the raw input vector x.
SALIENCE_LAYERS = ("final", "projected", "embedding")


@dataclass(frozen=True)
class RetrievalConfig:
    tau: float = 0.01
    mode: str = "auto"  # oracle | self | auto (oracle when labels are given)
    keep_mentions: bool = True
    layer: str = "projected"

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.mode not in ("oracle", "self", "auto"):
            raise ValueError(f"unknown salience mode {self.mode!r}")
        if self.layer not in SALIENCE_LAYERS:
            raise ValueError(f"salience layer must be one of {SALIENCE_LAYERS}")


@dataclass
class SalienceMap:
    query_id: str
    values: dict[str, float]
    raw: dict[str, float] = field(default_factory=dict)
    mode: str = "oracle"
    degenerate: bool = False

    def __post_init__(self):
        if self.values:
            total = sum(self.values.values())
            if abs(total - 1.0) > 1e-9 or min(self.values.values()) < 0:
                raise ValueError("normalized salience must be a probability vector over entities")

    def ranked(self) -> list[tuple[str, float]]:
        return sorted(self.values.items(), key=lambda kv: (-kv[1], kv[0]))

    def dump(self) -> list[dict]:
        return [{"query_id": self.query_id, "entity": e, "raw": self.raw.get(e), "alpha": a,
                 "mode": self.mode} for e, a in self.ranked()]


def normalize_salience(raw: Mapping[str, float], query_id: str = "", mode: str = "oracle") -> SalienceMap:
    raw = {k: float(v) for k, v in raw.items()}
    total = sum(raw.values())
    if not raw:
        return SalienceMap(query_id, {}, raw, mode)
    if total <= 0 or not np.isfinite(total):
        logger.warning("query %s: all-zero salience; falling back to uniform", query_id)
        u = 1.0 / len(raw)
        return SalienceMap(query_id, {k: u for k in raw}, raw, mode, degenerate=True)
    return SalienceMap(query_id, {k: v / total for k, v in raw.items()}, raw, mode)


def entity_salience(cg: CompiledGraph, params: ParamStore, mode: str = "oracle",
                    f1: Sequence[float] | None = None, temperature: float = 0.1,
                    layer: str = "projected", loss_scale: float = 1.0) -> SalienceMap:
    """alpha_i = ||d loss / d h_i|| for every entity i, normalized to sum 1.

    ``oracle`` differentiates KL(p* || p) and needs per-agent F1 labels;
    ``self`` differentiates -log p(argmax p) and needs none.
    """
    if layer not in SALIENCE_LAYERS:
        raise ValueError(f"salience layer must be one of {SALIENCE_LAYERS}")
    res = forward(cg, params, input_grad=(layer == "embedding"))
    tape = res.tape
    if mode == "oracle":
        if f1 is None:
            raise ValueError("oracle salience needs per-agent F1 labels")
        loss = tape.kl_div(target_distribution(f1, temperature).reshape(1, -1), res.probs)
    elif mode == "self":
        loss = tape.neg_log_pick(res.probs, int(np.argmax(res.probs.value[0])))
    else:
        raise ValueError(f"unknown salience mode {mode!r}")
    if loss_scale != 1.0:
        loss = tape.mul_const(loss, loss_scale)
    target = {"final": res.states[-1], "projected": res.states[0], "embedding": res.x}[layer]
    grad = tape.backward(loss, wrt=[target])[target.index]
    norms = np.linalg.norm(grad[cg.entity_rows], axis=1)
    ids = [cg.node_ids[i] for i in cg.entity_rows]
    return normalize_salience(dict(zip(ids, norms.tolist())), cg.graph.query_id, mode)


def mentioned_entities(g: RoutedGraph) -> set[str]:
    return {e.dst for e in g.edges if e.relation.variant == QUERY_MENTIONS and not e.relation.reverse}


def retained_entities(g: RoutedGraph, salience: SalienceMap, config: RetrievalConfig) -> set[str]:
    missing = set(g.entity_ids) - set(salience.values)
    if missing:
        raise ValueError(f"salience map lacks entities {sorted(missing)[:3]}")
    keep = {e for e, a in salience.values.items() if a > config.tau}
    if config.keep_mentions:
        keep |= mentioned_entities(g)
    if not keep and g.entity_ids:
        top = salience.ranked()[0][0]
        logger.warning("query %s: no entity above tau=%g; keeping top entity %s", g.query_id, config.tau, top)
        keep = {top}
    return keep


@dataclass(frozen=True)
class Retrieval:
    graph: RoutedGraph
    before: GraphStats
    after: GraphStats


def retrieve_subgraph(g: RoutedGraph, salience: SalienceMap, config: RetrievalConfig = RetrievalConfig(),
                      signal: Iterable[str] | None = None) -> Retrieval:
    keep = retained_entities(g, salience, config)
    sub = induced_subgraph(g, keep)
    signal = None if signal is None else set(signal)
    return Retrieval(sub, graph_stats(g, signal), graph_stats(sub, signal))


def retrieval_report(before: Sequence[GraphStats], after: Sequence[GraphStats]) -> RetrievalRow:
    """Mean sizes and SNR before/after, with drop and raise percentages."""
    if len(before) != len(after) or not before:
        raise ValueError("need matching, non-empty before/after stats")

    def mean(xs):
        return float(np.mean(xs))

    snr_b = [s.node_snr for s in before]
    snr_a = [s.node_snr for s in after]
    have = all(v is not None for v in snr_b + snr_a)
    return retrieval_row(
        mean([s.entity_nodes for s in before]), mean([s.entity_nodes for s in after]),
        mean([s.entity_edges for s in before]), mean([s.entity_edges for s in after]),
        mean(snr_b) if have else None, mean(snr_a) if have else None,
    )


def write_salience_dump(path, maps: Iterable[SalienceMap]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in maps:
            for rec in m.dump():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
