from __future__ import annotations

import pytest

from kgroute.graph import DEFAULT_TAGS, STRATEGIES
from kgroute.synthetic import ScenarioConfig, generate_scenario

SMALL = ScenarioConfig(train_per_family=10, val_per_family=2, test_per_family=4, seed=3)


@pytest.fixture(scope="module")
def scenario():
    return generate_scenario(SMALL)


def test_pool_is_four_by_six(scenario):
    assert len(scenario.pool) == 24 == 4 * len(STRATEGIES)
    assert len({a.id for a in scenario.pool}) == 24


def test_split_sizes(scenario):
    assert len(scenario.split("train")) == 20
    assert len(scenario.split("val")) == 4
    assert len(scenario.split("test")) == 8


def test_queries_are_well_formed(scenario):
    for q in scenario.queries:
        assert set(q.gold) <= set(DEFAULT_TAGS)
        assert 3 <= len(q.gold) <= 5
        assert set(q.mentions) <= q.signal <= set(q.context.node_ids)
        noise = len(q.context.node_ids) - len(q.signal)
        assert SMALL.noise_min <= noise <= SMALL.noise_max


def test_generation_is_deterministic(scenario):
    again = generate_scenario(SMALL)
    assert [q.id for q in again.queries] == [q.id for q in scenario.queries]
    assert [q.gold for q in again.queries] == [q.gold for q in scenario.queries]
    assert [a.attends for a in again.pool] == [a.attends for a in scenario.pool]


def test_attention_covers_signal_only(scenario):
    q = scenario.queries[0]
    for a in scenario.pool:
        assert set(a.attended(q.id)) == set(q.signal)


def test_experts_and_noisy_agents():
    sc = generate_scenario(ScenarioConfig(train_per_family=1, val_per_family=0, test_per_family=1, noisy_agents=6))
    noisy = [a for a, p in sc.profiles.items() if p.flip == sc.config.noisy_flip]
    assert len(noisy) == 6
    assert not set(noisy) & set(sc.experts.values())
    assert sc.profiles["birch::AGENT::cot"].competence["sugar"] == 0.9


@pytest.mark.parametrize("kw", [
    {"families": ("fat",)}, {"noise_min": 5, "noise_max": 2}, {"extra_gold_min": 3, "extra_gold_max": 1},
    {"noise_max": 999},
])
def test_invalid_scenarios(kw):
    with pytest.raises(ValueError):
        ScenarioConfig(**kw)


def test_expert_must_be_pooled():
    with pytest.raises(ValueError):
        generate_scenario(ScenarioConfig(experts=(("sugar", "nobody::AGENT::cot"), ("sodium", "cedar::AGENT::mad"))))
