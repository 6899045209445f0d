from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgroute.agents import AgentAnswer
from kgroute.ensemble import (
    VoteConfig, best_agent_oracle, majority_vote, prune_topk, uniform_distribution, weighted_vote,
    weighted_vote_trace,
)
from kgroute.hgnn import RouteDistribution
from kgroute.train import PerformanceRecord

GOLD = frozenset({"low_sugar", "low_sodium"})
SEVEN = frozenset({"low_carb", "low_sugar", "low_calorie", "low_protein", "low_cholesterol", "low_saturated_fat",
                   "low_sodium"})
# (agent, answer, routed probability) for a Borscht question; the rest of the pool is left out
BORSCHT = [
    ("qwen::AGENT::raw", GOLD, "0.095538996"),
    ("qwen::AGENT::cot", GOLD, "0.086759798"),
    ("qwen::AGENT::summary", GOLD, "0.061009243"),
    ("mistral::AGENT::mad", GOLD, "0.051758543"),
    ("llama::AGENT::cot", GOLD, "0.020628655"),
    ("gpt::AGENT::mad", SEVEN, "0.019520836"),
    ("gpt::AGENT::sc", SEVEN, "0.018208018"),
    ("gpt::AGENT::cot", SEVEN, "0.011033830"),
]


def answers_for(rows, qid="q"):
    return {a: AgentAnswer(a, qid, tags) for a, tags, _ in rows}


def test_borscht_vote_recovers_gold():
    ids = tuple(a for a, _, _ in BORSCHT)
    w = np.array([float(p) for _, _, p in BORSCHT])
    dist = RouteDistribution(ids, w / w.sum())
    trace = weighted_vote_trace(answers_for(BORSCHT), dist)
    assert trace.selected == GOLD
    # independent exact recomputation
    total = sum(Fraction(p) for _, _, p in BORSCHT)
    seven_only = sum(Fraction(p) for _, t, p in BORSCHT if t == SEVEN) / total
    assert trace.scores["low_sugar"] == pytest.approx(1.0, abs=1e-12)
    assert trace.scores["low_carb"] == pytest.approx(float(seven_only), abs=1e-12)
    assert float(seven_only) == pytest.approx(0.1337951, abs=1e-7)


def test_prune_topk_examples():
    d = RouteDistribution(("a", "b", "c", "d"), np.array([0.4, 0.3, 0.2, 0.1]))
    p = prune_topk(d, 2)
    assert p.agent_ids == ("a", "b")
    np.testing.assert_allclose(p.probs, [4 / 7, 3 / 7], atol=1e-15)
    assert prune_topk(d, 4) is d
    with pytest.raises(ValueError):
        prune_topk(d, 0)
    tie = RouteDistribution(("z", "y", "x"), np.array([0.25, 0.25, 0.5]))
    assert prune_topk(tie, 2).agent_ids == ("y", "x")


prob_vectors = st.lists(st.floats(0.001, 1.0), min_size=1, max_size=24).map(
    lambda xs: np.array(xs) / np.sum(xs))


@settings(max_examples=200, deadline=None)
@given(prob_vectors, st.data())
def test_prune_renormalizes_exactly(p, data):
    ids = tuple(f"a{i:02d}" for i in range(len(p)))
    d = RouteDistribution(ids, p)
    k = data.draw(st.integers(1, len(p)))
    q = prune_topk(d, k)
    assert len(q.agent_ids) == k
    assert abs(q.probs.sum() - 1.0) <= 1e-12
    kept = set(q.agent_ids)
    dropped = [x for a, x in zip(ids, p) if a not in kept]
    assert not dropped or min(p[ids.index(a)] for a in kept) >= max(dropped)


tag_sets = st.frozensets(st.sampled_from(["t0", "t1", "t2", "t3", "t4"]), max_size=5)


@settings(max_examples=300, deadline=None)
@given(st.lists(tag_sets, min_size=1, max_size=24))
def test_majority_equals_uniform_weighted_vote(answers):
    ans = {f"a{i:02d}": AgentAnswer(f"a{i:02d}", "q", t) for i, t in enumerate(answers)}
    assert majority_vote(ans) == weighted_vote(ans, uniform_distribution(tuple(ans)))


def test_tie_is_included():
    ans = {"a": AgentAnswer("a", "q", frozenset({"x"})), "b": AgentAnswer("b", "q", frozenset({"y"}))}
    assert weighted_vote(ans, uniform_distribution(("a", "b"))) == {"x", "y"}
    assert majority_vote(ans) == {"x", "y"}


def test_missing_answers_redistribute_or_drop(caplog):
    dist = RouteDistribution(("a", "b", "c"), np.array([0.3, 0.3, 0.4]))
    ans = {"a": AgentAnswer("a", "q", frozenset({"x"})), "b": AgentAnswer("b", "q", frozenset({"y"}))}
    assert weighted_vote(ans, dist) == {"x", "y"}
    assert weighted_vote(ans, dist, VoteConfig(missing="empty")) == frozenset()
    assert "no answer" in caplog.text


def test_topk_vote_uses_pruned_weights():
    dist = RouteDistribution(("a", "b", "c"), np.array([0.45, 0.3, 0.25]))
    ans = {"a": AgentAnswer("a", "q", frozenset({"x"})), "b": AgentAnswer("b", "q", frozenset({"y"})),
           "c": AgentAnswer("c", "q", frozenset({"y"}))}
    assert weighted_vote(ans, dist) == {"y"}
    assert weighted_vote(ans, dist, VoteConfig(k=1)) == {"x"}


def test_vote_config_validation():
    with pytest.raises(ValueError):
        VoteConfig(theta=0.0)
    with pytest.raises(ValueError):
        VoteConfig(k=0)
    with pytest.raises(ValueError):
        VoteConfig(missing="ignore")


def test_oracles():
    perf = PerformanceRecord({"q1": {"a": 1.0, "b": 0.0}, "q2": {"a": 0.2, "b": 0.6}, "q3": {"a": 0.5, "b": 0.5}})
    per_setting = best_agent_oracle(perf, "per-setting")
    per_query = best_agent_oracle(perf, "per-query")
    assert set(per_setting.selection.values()) == {"a"}
    assert per_setting.f1 == pytest.approx(1.7 / 3)
    assert per_query.f1 == pytest.approx(2.1 / 3)
    assert per_query.selection["q2"] == "b"
    with pytest.raises(ValueError):
        best_agent_oracle(perf, "per-galaxy")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.sampled_from([0.0, 0.25, 0.5, 2 / 3, 1.0]), min_size=3, max_size=3),
                min_size=1, max_size=12))
def test_oracle_ordering(rows):
    perf = PerformanceRecord({f"q{i}": {f"a{j}": f for j, f in enumerate(r)} for i, r in enumerate(rows)})
    assert best_agent_oracle(perf, "per-query").f1 >= best_agent_oracle(perf, "per-setting").f1 - 1e-12
