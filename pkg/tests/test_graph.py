from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgroute.graph import (
    AGENT_ATTENDS, QUERY_AGENT, QUERY_MENTIONS, AgentSpec, ContextGraph, EdgeRelation, GraphNode, Lexicon, NodeKind,
    ParseError, QueryInstance, ValidationError, dump_routed_graph, extend_graph, graph_stats, induced_subgraph,
    load_routed_graph, parse_context_graph, read_corpus, serialize_query, write_corpus, ENTITY,
)


def record(**kw):
    base = {"id": "q1", "question": "Is soup fine?",
            "triples": [["Soup", "belongs to", "low_sugar"], ["user", "has", "diabetes"],
                        ["diabetes", "match", "low_sugar"]],
            "gold": ["low_sugar"], "mentions": ["Soup", "user"]}
    base.update(kw)
    return base


def test_bruschetta_fixture_sizes(bruschetta_query):
    assert len(bruschetta_query.context.nodes) == 25
    assert len(bruschetta_query.context.edges) == 30


def test_bruschetta_first_triples_match_the_figure(bruschetta_query):
    assert bruschetta_query.context.edges[:5] == (
        ("Bruschetta", "belongs to", "high_sodium"),
        ("Bruschetta", "has", "Salt, table, iodized"),
        ("Bruschetta", "has", "Olive oil"),
        ("user", "has", "hypertension"),
        ("hypertension", "contradict", "high_sodium"),
    )


def test_bruschetta_induced_edges(bruschetta_graph):
    keep = {"user", "Bruschetta", "hypertension", "high_sodium"}
    sub = induced_subgraph(bruschetta_graph, keep)
    expected = {e for e in bruschetta_graph.base.edges if e[0] in keep and e[2] in keep}
    assert set(sub.base.edges) == expected == {
        ("Bruschetta", "belongs to", "high_sodium"), ("user", "has", "hypertension"),
        ("hypertension", "contradict", "high_sodium"),
    }
    assert set(sub.entity_ids) == keep
    assert sub.agent_nodes == bruschetta_graph.agent_nodes


def test_parse_dedupes_triples_and_infers_subkinds():
    q = parse_context_graph(record(triples=[["Soup", "belongs to", "low_sugar"]] * 2 + [["Soup", "has", "Salt"]],
                                   mentions=["Soup"]))
    assert len(q.context.edges) == 2
    kinds = {n.id: n.kind.subkind for n in q.context.nodes}
    assert kinds == {"Soup": "food", "low_sugar": "nutrition_tag", "Salt": "ingredient"}


def test_parse_errors_carry_location():
    with pytest.raises(ParseError, match="line 7"):
        parse_context_graph("{not json", line=7)
    with pytest.raises(ParseError, match="arity"):
        parse_context_graph(record(triples=[["a", "b"]]), line=2)
    with pytest.raises(ParseError, match="missing field 'question'"):
        parse_context_graph({"id": "x"})
    with pytest.raises(ValidationError, match="mentioned"):
        parse_context_graph(record(mentions=["Nope"]))


def test_degenerate_record_is_kept_with_warning(caplog):
    q = parse_context_graph(record(triples=[], mentions=[]))
    assert q.degenerate
    assert "degenerate" in caplog.text


def test_corpus_round_trip(tmp_path):
    qs = [parse_context_graph(record(id=f"q{i}", family="sugar", split="train", signal=["Soup"])) for i in range(3)]
    path = tmp_path / "c.jsonl"
    write_corpus(path, qs)
    assert read_corpus(path) == qs
    assert json.loads(path.read_text().splitlines()[0]) == serialize_query(qs[0])


def test_extend_graph_structure(bruschetta_query, pool):
    g = extend_graph(bruschetta_query, pool)
    assert len(g.nodes) == 25 + 1 + 24
    forward = [e for e in g.edges if not e.relation.reverse]
    reverse = [e for e in g.edges if e.relation.reverse]
    assert len(forward) == len(reverse)
    assert {(e.dst, e.relation.reversed(), e.src) for e in reverse} == {(e.src, e.relation, e.dst) for e in forward}
    variants = {e.relation.variant for e in forward}
    assert variants == {"domain", QUERY_MENTIONS, QUERY_AGENT}
    assert sum(e.relation.variant == QUERY_AGENT for e in forward) == 24


def test_attends_edges_and_unknown_entities(bruschetta_query, caplog):
    a = AgentSpec("x", "cot", attends={bruschetta_query.id: ("Bruschetta", "Ghost")})
    g = extend_graph(bruschetta_query, [a])
    att = [e for e in g.edges if e.relation.variant == AGENT_ATTENDS and not e.relation.reverse]
    assert [(e.src, e.dst) for e in att] == [("agent::x::AGENT::cot", "Bruschetta")]
    assert "Ghost" in caplog.text


def test_pool_and_id_validation(bruschetta_query):
    with pytest.raises(ValueError, match="duplicate"):
        extend_graph(bruschetta_query, [AgentSpec("a", "raw"), AgentSpec("a", "raw")])
    with pytest.raises(ValueError):
        AgentSpec("a", "telepathy")
    with pytest.raises(ValueError):
        EdgeRelation("domain")
    with pytest.raises(ValueError):
        NodeKind("agent", "food")
    with pytest.raises(ValidationError):
        ContextGraph((GraphNode("a", NodeKind(ENTITY), "a"),), (("a", "r", "b"),))


def test_routed_graph_dump_round_trip(bruschetta_graph):
    d = json.loads(json.dumps(dump_routed_graph(bruschetta_graph)))
    assert load_routed_graph(d) == bruschetta_graph


def test_graph_stats_snr(bruschetta_query):
    s = graph_stats(bruschetta_query.context, bruschetta_query.signal)
    assert (s.entity_nodes, s.entity_edges) == (25, 30)
    assert s.node_snr == pytest.approx(100 * 4 / 25)


def test_lexicon_explicit_wins():
    kinds = Lexicon().infer(["Soup", "x"], [("Soup", "belongs to", "x")], {"Soup": "dish"})
    assert kinds == {"Soup": "dish", "x": "entity"}


@settings(max_examples=60, deadline=None)
@given(st.sets(st.integers(0, 24)))
def test_induced_subgraph_keeps_only_edges_among_kept(bruschetta_graph, picks):
    ids = bruschetta_graph.entity_ids
    keep = {ids[i] for i in picks}
    sub = induced_subgraph(bruschetta_graph, keep)
    allowed = keep | {bruschetta_graph.query_node} | set(bruschetta_graph.agent_nodes)
    assert set(sub.entity_ids) == keep
    assert all(e.src in allowed and e.dst in allowed for e in sub.edges)
    assert all(s in keep and d in keep for s, _, d in sub.base.edges)
    # induced: every original edge among kept nodes survives
    assert len(sub.edges) == sum(e.src in allowed and e.dst in allowed for e in bruschetta_graph.edges)


def test_query_validation_of_signal():
    ctx = ContextGraph((GraphNode("a", NodeKind(ENTITY), "a"),), ())
    with pytest.raises(ValidationError):
        QueryInstance("q", "?", frozenset(), ctx, signal=frozenset({"b"}))
