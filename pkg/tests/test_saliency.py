from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgroute.embed import HashEmbedder, embed_graph
from kgroute.hgnn import ModelConfig, compile_graph, init_params, schema_of
from kgroute.saliency import (
    RetrievalConfig, SalienceMap, entity_salience, normalize_salience, retained_entities, retrieval_report,
    retrieve_subgraph, write_salience_dump,
)

RETAINED = {"user", "Bruschetta", "hypertension", "high_sodium"}


@pytest.fixture(scope="module")
def bruschetta_salience(bruschetta_data):
    return SalienceMap("bruschetta", dict(bruschetta_data["salience"]))


@pytest.fixture(scope="module")
def router(bruschetta_graph):
    cg = compile_graph(bruschetta_graph, embed_graph(bruschetta_graph, HashEmbedder(32)))
    rels, types = schema_of([bruschetta_graph])
    return cg, init_params(ModelConfig(hidden=64, input_dim=32), rels, types, 0)


def test_transcribed_salience_is_normalized(bruschetta_salience):
    assert sum(bruschetta_salience.values.values()) == pytest.approx(1.0, abs=1e-12)
    assert len(bruschetta_salience.values) == 25
    top = [e for e, _ in bruschetta_salience.ranked()[:4]]
    assert top == ["user", "Bruschetta", "hypertension", "high_sodium"]


@pytest.mark.parametrize("keep_mentions", [True, False])
def test_bruschetta_retrieval(bruschetta_graph, bruschetta_salience, keep_mentions):
    r = retrieve_subgraph(bruschetta_graph, bruschetta_salience, RetrievalConfig(0.01, keep_mentions=keep_mentions),
                          RETAINED)
    assert set(r.graph.entity_ids) == RETAINED
    assert (r.before.entity_nodes, r.before.entity_edges) == (25, 30)
    assert (r.after.entity_nodes, r.after.entity_edges) == (4, 3)
    assert r.after.node_snr == 100.0


def test_mentions_survive_a_high_threshold(bruschetta_graph, bruschetta_salience):
    keep = retained_entities(bruschetta_graph, bruschetta_salience, RetrievalConfig(0.5))
    assert keep == {"Bruschetta", "user"}


def test_empty_selection_falls_back_to_top_entity(bruschetta_graph, bruschetta_salience, caplog):
    keep = retained_entities(bruschetta_graph, bruschetta_salience, RetrievalConfig(0.5, keep_mentions=False))
    assert keep == {"user"}
    assert "keeping top entity" in caplog.text


def test_missing_entities_rejected(bruschetta_graph):
    with pytest.raises(ValueError, match="lacks"):
        retained_entities(bruschetta_graph, SalienceMap("x", {"user": 1.0}), RetrievalConfig())


def test_normalize_all_zero_is_uniform_and_flagged(caplog):
    m = normalize_salience({"a": 0.0, "b": 0.0}, "q")
    assert m.degenerate and m.values == {"a": 0.5, "b": 0.5}
    with pytest.raises(ValueError):
        SalienceMap("q", {"a": 0.7})


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.floats(0, 1e6), min_size=1, max_size=30))
def test_normalize_property(raw):
    m = normalize_salience(raw)
    assert abs(sum(m.values.values()) - 1.0) <= 1e-9
    assert min(m.values.values()) >= 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.001, 0.2), st.floats(0.001, 0.2))
def test_threshold_monotone(bruschetta_graph, bruschetta_salience, t1, t2):
    lo, hi = sorted((t1, t2))
    a = retained_entities(bruschetta_graph, bruschetta_salience, RetrievalConfig(lo, keep_mentions=False))
    b = retained_entities(bruschetta_graph, bruschetta_salience, RetrievalConfig(hi, keep_mentions=False))
    assert b <= a


@pytest.mark.parametrize("layer", ["projected", "embedding"])
def test_router_salience_covers_entities(router, layer):
    cg, params = router
    f1 = np.linspace(0, 1, len(cg.agent_rows))
    m = entity_salience(cg, params, "oracle", f1, 0.1, layer)
    assert set(m.values) == set(cg.graph.entity_ids)
    assert sum(m.values.values()) == pytest.approx(1.0)
    assert not m.degenerate
    # normalized salience ignores a constant loss scale
    scaled = entity_salience(cg, params, "oracle", f1, 0.1, layer, loss_scale=1000.0)
    for k in m.values:
        assert scaled.values[k] == pytest.approx(m.values[k], rel=1e-9)


def test_final_layer_salience_is_degenerate(router):
    cg, params = router
    m = entity_salience(cg, params, "self", layer="final")
    assert m.degenerate


def test_oracle_mode_needs_labels(router):
    cg, params = router
    with pytest.raises(ValueError):
        entity_salience(cg, params, "oracle")
    with pytest.raises(ValueError):
        RetrievalConfig(tau=0.0)
    with pytest.raises(ValueError):
        RetrievalConfig(layer="deepest")


def test_salience_dump_format(tmp_path, bruschetta_salience):
    path = tmp_path / "s.jsonl"
    write_salience_dump(path, [bruschetta_salience])
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 25
    assert rows[0]["entity"] == "user" and rows[0]["alpha"] == 0.283775
    assert set(rows[0]) == {"query_id", "entity", "raw", "alpha", "mode"}


def test_retrieval_report_percentages(bruschetta_graph, bruschetta_salience):
    r = retrieve_subgraph(bruschetta_graph, bruschetta_salience, RetrievalConfig(), RETAINED)
    row = retrieval_report([r.before], [r.after])
    assert row.node_drop == pytest.approx(100 * 21 / 25)
    assert row.snr_raise == pytest.approx(100 * (100 - 16) / 16)
