"""Heterogeneous QA graphs: context graphs, query instances, and routed graphs.

A ``ContextGraph`` is the raw triple-list knowledge graph attached to one
question. ``extend_graph`` adds the query node, one node per agent, and the
typed query/agent edges (with explicit reverse variants) to produce a
``RoutedGraph``, which is what the router consumes.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

logger = logging.getLogger(__name__)

ENTITY, QUERY, AGENT = "entity", "query", "agent"
STRATEGIES = ("raw", "cot", "sc", "mad", "react_reflect", "summary")

QUERY_MENTIONS = "query_mentions"
AGENT_ATTENDS = "agent_attends"
QUERY_AGENT = "query_agent"
REVERSE_SUFFIX = "~rev"


class GraphError(ValueError):
    """Base class for graph construction problems."""


class ParseError(GraphError):
    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"triple {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class ValidationError(GraphError):
    pass


@dataclass(frozen=True, order=True)
class NodeKind:
    kind: str
    subkind: str | None = None

    def __post_init__(self):
        if self.kind not in (ENTITY, QUERY, AGENT):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind != ENTITY and self.subkind is not None:
            raise ValueError("only entity nodes carry a subkind")

    @property
    def type_key(self) -> str:
        return f"{ENTITY}:{self.subkind or 'entity'}" if self.kind == ENTITY else self.kind


@dataclass(frozen=True, order=True)
class EdgeRelation:
    """Relation type ψ. ``label`` is set only for domain relations."""

    variant: str
    label: str | None = None
    reverse: bool = False

    def __post_init__(self):
        if self.variant not in ("domain", QUERY_MENTIONS, AGENT_ATTENDS, QUERY_AGENT):
            raise ValueError(f"unknown relation variant {self.variant!r}")
        if (self.variant == "domain") != (self.label is not None):
            raise ValueError("domain relations need a label; typed relations must not have one")

    @property
    def key(self) -> str:
        base = f"dom:{self.label}" if self.variant == "domain" else self.variant
        return base + (REVERSE_SUFFIX if self.reverse else "")

    def reversed(self) -> "EdgeRelation":
        return EdgeRelation(self.variant, self.label, not self.reverse)

    @classmethod
    def domain(cls, label: str) -> "EdgeRelation":
        return cls("domain", label)


@dataclass(frozen=True)
class GraphNode:
    id: str
    kind: NodeKind
    text: str


@dataclass(frozen=True)
class ContextGraph:
    nodes: tuple[GraphNode, ...]
    edges: tuple[tuple[str, str, str], ...]
    source_record_id: str = ""

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate node ids in context graph")
        known = set(ids)
        for n in self.nodes:
            if n.kind.kind != ENTITY:
                raise ValidationError(f"context graphs hold entity nodes only, got {n.kind.kind}")
        for s, _, d in self.edges:
            if s not in known or d not in known:
                raise ValidationError(f"edge endpoint not in graph: ({s!r}, {d!r})")
        if len(set(self.edges)) != len(self.edges):
            raise ValidationError("repeated (src, label, dst) triple")

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)


@dataclass(frozen=True)
class QueryInstance:
    id: str
    question: str
    gold: frozenset[str]
    context: ContextGraph
    mentions: tuple[str, ...] = ()
    signal: frozenset[str] | None = None
    family: str | None = None
    split: str | None = None

    def __post_init__(self):
        ids = set(self.context.node_ids)
        missing = [m for m in self.mentions if m not in ids]
        if missing:
            raise ValidationError(f"query {self.id}: mentioned entities not in context: {missing}")
        if self.signal is not None and not self.signal <= ids:
            raise ValidationError(
                f"query {self.id}: relevant entities not in context: {sorted(self.signal - ids)}"
            )

    @property
    def degenerate(self) -> bool:
        return not self.context.nodes or not self.mentions


@dataclass(frozen=True)
class AgentSpec:
    backbone: str
    strategy: str
    description: str = ""
    attends: Mapping[str, tuple[str, ...]] | None = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")

    @property
    def id(self) -> str:
        return f"{self.backbone}::AGENT::{self.strategy}"

    def attended(self, query_id: str) -> tuple[str, ...]:
        if not self.attends:
            return ()
        return tuple(self.attends.get(query_id, ()))


def check_pool(pool: Sequence[AgentSpec]) -> None:
    if not pool:
        raise ValueError("agent pool is empty")
    seen = set()
    for a in pool:
        if (a.backbone, a.strategy) in seen:
            raise ValueError(f"duplicate agent {a.id}")
        seen.add((a.backbone, a.strategy))


@dataclass(frozen=True)
class TypedEdge:
    src: str
    relation: EdgeRelation
    dst: str


@dataclass(frozen=True)
class RoutedGraph:
    base: ContextGraph
    query_node: str
    agent_nodes: tuple[str, ...]
    nodes: tuple[GraphNode, ...]
    edges: tuple[TypedEdge, ...]
    query_id: str = ""
    agent_ids: tuple[str, ...] = ()

    @property
    def entity_ids(self) -> tuple[str, ...]:
        return self.base.node_ids

    @property
    def degenerate(self) -> bool:
        return not any(
            e.relation.variant == QUERY_MENTIONS and not e.relation.reverse for e in self.edges
        )

    def node(self, node_id: str) -> GraphNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def relations(self) -> list[EdgeRelation]:
        return sorted({e.relation for e in self.edges}, key=lambda r: r.key)


def query_node_id(query_id: str) -> str:
    return f"query::{query_id}"


def agent_node_id(agent_id: str) -> str:
    return f"agent::{agent_id}"


def _with_reverse(edges: Iterable[TypedEdge]) -> list[TypedEdge]:
    out = []
    for e in edges:
        out.append(e)
        out.append(TypedEdge(e.dst, e.relation.reversed(), e.src))
    return out


def extend_graph(q: QueryInstance, pool: Sequence[AgentSpec]) -> RoutedGraph:
    """Add the query node, agent nodes and typed query/agent edges to ``q.context``."""
    check_pool(pool)
    ctx = q.context
    entity_ids = set(ctx.node_ids)
    qid = query_node_id(q.id)
    aids = tuple(agent_node_id(a.id) for a in pool)
    clash = entity_ids & ({qid} | set(aids))
    if clash:
        raise ValidationError(f"entity ids collide with generated node ids: {sorted(clash)}")

    nodes = list(ctx.nodes)
    nodes.append(GraphNode(qid, NodeKind(QUERY), q.question))
    for a, nid in zip(pool, aids):
        nodes.append(GraphNode(nid, NodeKind(AGENT), agent_surface_text(a)))

    forward: list[TypedEdge] = [TypedEdge(s, EdgeRelation.domain(r), d) for s, r, d in ctx.edges]
    for m in q.mentions:
        forward.append(TypedEdge(qid, EdgeRelation(QUERY_MENTIONS), m))
    for a, nid in zip(pool, aids):
        for ent in a.attended(q.id):
            if ent not in entity_ids:
                logger.warning("agent %s attends %r, which is not in graph %s; skipped", a.id, ent, q.id)
                continue
            forward.append(TypedEdge(nid, EdgeRelation(AGENT_ATTENDS), ent))
    for nid in aids:
        forward.append(TypedEdge(qid, EdgeRelation(QUERY_AGENT), nid))

    g = RoutedGraph(
        base=ctx,
        query_node=qid,
        agent_nodes=aids,
        nodes=tuple(nodes),
        edges=tuple(_with_reverse(forward)),
        query_id=q.id,
        agent_ids=tuple(a.id for a in pool),
    )
    if g.degenerate:
        logger.warning("query %s mentions no entity; routed graph is degenerate", q.id)
    return g


# Fixed template; agent node text is what gets embedded.
AGENT_TEXT_TEMPLATE = "agent backbone {backbone} strategy {strategy} . {description}"


def agent_surface_text(a: AgentSpec) -> str:
    return AGENT_TEXT_TEMPLATE.format(backbone=a.backbone, strategy=a.strategy, description=a.description)


def induced_subgraph(g: RoutedGraph, keep: Iterable[str]) -> RoutedGraph:
    """Keep the given entities plus the query and all agents; drop edges with a removed endpoint."""
    keep = set(keep)
    kept_entities = [n for n in g.base.nodes if n.id in keep]
    kept_ids = {n.id for n in kept_entities} | {g.query_node} | set(g.agent_nodes)
    base = ContextGraph(
        nodes=tuple(kept_entities),
        edges=tuple(e for e in g.base.edges if e[0] in kept_ids and e[2] in kept_ids),
        source_record_id=g.base.source_record_id,
    )
    return RoutedGraph(
        base=base,
        query_node=g.query_node,
        agent_nodes=g.agent_nodes,
        nodes=tuple(n for n in g.nodes if n.id in kept_ids),
        edges=tuple(e for e in g.edges if e.src in kept_ids and e.dst in kept_ids),
        query_id=g.query_id,
        agent_ids=g.agent_ids,
    )


@dataclass(frozen=True)
class GraphStats:
    entity_nodes: int
    entity_edges: int
    node_snr: float | None  # percentage; None when no signal set is known


def graph_stats(g: RoutedGraph | ContextGraph, signal: Iterable[str] | None = None) -> GraphStats:
    base = g.base if isinstance(g, RoutedGraph) else g
    ids = set(base.node_ids)
    snr = None
    if signal is not None:
        signal = set(signal)
        snr = 100.0 * len(signal & ids) / len(ids) if ids else 0.0
    return GraphStats(len(ids), len(base.edges), snr)


# --- corpus records -------------------------------------------------------

DEFAULT_TAGS = (
    "low_carb", "high_carb", "low_sugar", "high_sugar", "low_sodium", "high_sodium",
    "low_calorie", "high_calorie", "low_protein", "high_protein", "low_cholesterol",
    "low_saturated_fat", "high_fiber", "low_fat",
)


@dataclass
class Lexicon:
    """Entity subkind inference: explicit names, tag vocabulary, relation-position rules."""

    names: dict[str, str] = field(default_factory=lambda: {"user": "user"})
    tags: frozenset[str] = frozenset(DEFAULT_TAGS)
    # (relation label, position, subkind of the other endpoint or None) -> subkind
    subject_rules: dict[str, str] = field(
        default_factory=lambda: {"belongs to": "food", "match": "condition", "contradict": "condition",
                                 "need": "condition"}
    )
    has_object_rules: dict[str, str] = field(
        default_factory=lambda: {"food": "ingredient", "user": "habit"}
    )
    fallback: str = "entity"

    def infer(self, names: Sequence[str], triples: Sequence[tuple[str, str, str]],
              explicit: Mapping[str, str] | None = None) -> dict[str, str]:
        out: dict[str, str] = {}
        tag_keys = {_tag_key(t) for t in self.tags}
        for n in names:
            if explicit and n in explicit:
                out[n] = explicit[n]
            elif n in self.names:
                out[n] = self.names[n]
            elif _tag_key(n) in tag_keys:
                out[n] = "nutrition_tag"
        for s, r, d in triples:
            if s not in out and r in self.subject_rules:
                out[s] = self.subject_rules[r]
        for s, r, d in triples:
            if r == "has" and d not in out and out.get(s) in self.has_object_rules:
                out[d] = self.has_object_rules[out[s]]
        for n in names:
            out.setdefault(n, self.fallback)
        return out


def _tag_key(s: str) -> str:
    return re.sub(r"[\s_\\]+", "_", s.strip().lower())


def parse_context_graph(record: str | Mapping, line: int | None = None,
                        lexicon: Lexicon | None = None) -> QueryInstance:
    """Parse one corpus record (a JSON line or an already-decoded mapping)."""
    lexicon = lexicon or Lexicon()
    if isinstance(record, str):
        try:
            record = json.loads(record)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=line) from exc
    if not isinstance(record, Mapping):
        raise ParseError("record must be an object", line=line)
    try:
        qid = str(record["id"])
        question = str(record["question"])
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", line=line) from exc

    triples: list[tuple[str, str, str]] = []
    seen = set()
    for i, t in enumerate(record.get("triples") or []):
        if not isinstance(t, (list, tuple)) or len(t) != 3:
            raise ParseError(f"malformed triple {t!r}: arity must be 3", line=line, offset=i)
        t = tuple(str(x) for x in t)
        if t not in seen:
            seen.add(t)
            triples.append(t)

    names: list[str] = []
    known = set()
    for n in list(record.get("nodes") or []) + [x for t in triples for x in (t[0], t[2])]:
        n = str(n)
        if n not in known:
            known.add(n)
            names.append(n)

    subkinds = lexicon.infer(names, triples, record.get("subkinds"))
    ctx = ContextGraph(
        nodes=tuple(GraphNode(n, NodeKind(ENTITY, subkinds[n]), n) for n in names),
        edges=tuple(triples),
        source_record_id=qid,
    )
    signal = record.get("signal")
    try:
        q = QueryInstance(
            id=qid,
            question=question,
            gold=frozenset(str(x) for x in record.get("gold") or ()),
            context=ctx,
            mentions=tuple(str(m) for m in record.get("mentions") or ()),
            signal=None if signal is None else frozenset(str(x) for x in signal),
            family=record.get("family"),
            split=record.get("split"),
        )
    except ValidationError as exc:
        raise ValidationError(f"{exc} (line {line})" if line is not None else str(exc)) from exc
    if q.degenerate:
        logger.warning("record %s is degenerate (no triples or no mentioned entities)", qid)
    return q


def serialize_query(q: QueryInstance) -> dict:
    rec = {
        "id": q.id,
        "question": q.question,
        "triples": [list(t) for t in q.context.edges],
        "nodes": list(q.context.node_ids),
        "subkinds": {n.id: n.kind.subkind for n in q.context.nodes},
        "gold": sorted(q.gold),
        "mentions": list(q.mentions),
    }
    if q.signal is not None:
        rec["signal"] = sorted(q.signal)
    if q.family is not None:
        rec["family"] = q.family
    if q.split is not None:
        rec["split"] = q.split
    return rec


def read_corpus(path, lexicon: Lexicon | None = None) -> list[QueryInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, raw in enumerate(fh, start=1):
            if raw.strip():
                out.append(parse_context_graph(raw, line=i, lexicon=lexicon))
    return out


def write_corpus(path, queries: Iterable[QueryInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(serialize_query(q), sort_keys=True, ensure_ascii=False) + "\n")


def iter_domain_triples(g: RoutedGraph | ContextGraph) -> Iterator[tuple[str, str, str]]:
    base = g.base if isinstance(g, RoutedGraph) else g
    yield from base.edges


def dump_routed_graph(g: RoutedGraph) -> dict:
    """Plain-dict dump of a routed graph, used for test fixtures."""
    return {
        "query_id": g.query_id,
        "query_node": g.query_node,
        "agent_ids": list(g.agent_ids),
        "agent_nodes": list(g.agent_nodes),
        "nodes": [[n.id, n.kind.kind, n.kind.subkind, n.text] for n in g.nodes],
        "base_edges": [list(e) for e in g.base.edges],
        "edges": [[e.src, e.relation.variant, e.relation.label, e.relation.reverse, e.dst] for e in g.edges],
        "source_record_id": g.base.source_record_id,
    }


def load_routed_graph(d: Mapping) -> RoutedGraph:
    nodes = tuple(GraphNode(i, NodeKind(k, s), t) for i, k, s, t in d["nodes"])
    base = ContextGraph(
        nodes=tuple(n for n in nodes if n.kind.kind == ENTITY),
        edges=tuple(tuple(e) for e in d["base_edges"]),
        source_record_id=d.get("source_record_id", ""),
    )
    edges = tuple(TypedEdge(s, EdgeRelation(v, lab, rev), t) for s, v, lab, rev, t in d["edges"])
    return RoutedGraph(base, d["query_node"], tuple(d["agent_nodes"]), nodes, edges,
                       d["query_id"], tuple(d["agent_ids"]))
