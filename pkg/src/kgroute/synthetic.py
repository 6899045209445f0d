"""Planted-expert synthetic scenario.

Each query asks about one food for one user. The signal entities are the
food, the user, the user's condition and the food's nutrition tag; the
condition/tag pair decides the query family. Noise entities (habits of the
user, ingredients of the food, nutrients of the ingredients) carry nothing
about the family. One agent per family is planted as the expert.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .agents import SyntheticAgentProfile
from .graph import DEFAULT_TAGS, STRATEGIES, AgentSpec, ContextGraph, GraphNode, NodeKind, QueryInstance, ENTITY

FAMILIES = {
    "sugar": {"conditions": ("diabetes", "prediabetes"), "low": "low_sugar", "high": "high_sugar"},
    "sodium": {"conditions": ("hypertension", "chronic kidney disease"), "low": "low_sodium", "high": "high_sodium"},
}

FOODS = (
    "Borscht", "Bruschetta", "Pancakes", "Lentil soup", "Fried rice", "Caesar salad", "Beef stew", "Oatmeal",
    "Pad thai", "Tomato soup", "Granola bar", "Chicken curry", "Veggie burger", "Fruit yogurt", "Minestrone",
    "Burrito", "Pho", "Ramen", "Muffin", "Pizza", "Sushi roll", "Quiche", "Falafel wrap", "Cornbread",
    "Chili con carne", "Tuna sandwich", "Pasta salad", "Banana bread", "Cobb salad", "Fish tacos",
)
HABITS = (
    "Drinks alcohol less than average", "Takes more supplements", "Sleeps under six hours", "Walks daily",
    "Skips breakfast", "Smokes occasionally", "Eats late at night", "Drinks two coffees a day",
    "Exercises on weekends", "Works night shifts", "Cooks at home", "Eats out often", "Drinks soda daily",
    "Snacks between meals", "Meditates", "Cycles to work", "Watches TV for hours", "Drinks herbal tea",
    "Follows a vegetarian diet", "Rarely drinks water",
)
INGREDIENTS = (
    "Salt, table, iodized", "Olive oil", "Wheat flour", "Tomatoes, raw", "Garlic", "Beets, boiled", "Cabbage",
    "Onions", "Carrots", "Butter", "Eggs", "Milk, whole", "Rice, white", "Soy sauce", "Chicken breast",
    "Beef, ground", "Black beans", "Cheddar cheese", "Basil", "Potatoes", "Corn", "Lettuce", "Lemon juice",
    "Ginger", "Peanuts", "Oats", "Honey", "Yeast", "Celery", "Bell pepper", "Mushrooms", "Spinach",
)
NUTRIENTS = (
    "Vitamin C", "Vitamin A", "Iron", "Calcium", "Potassium", "Magnesium", "Zinc", "Folate", "Vitamin B12",
    "Vitamin K", "Fiber", "Protein", "Saturated fat", "Cholesterol", "Phosphorus", "Selenium", "Niacin",
    "Riboflavin", "Thiamin", "Vitamin E", "Copper", "Manganese", "Omega-3", "Choline", "Vitamin D",
)
BACKBONES = ("atlas", "birch", "cedar", "delta")
STRATEGY_TEXT = {
    "raw": "answers directly from the question and context",
    "cot": "reasons step by step before answering",
    "sc": "samples several candidate answers and keeps the majority",
    "mad": "runs a debate between two debaters and a judge",
    "react_reflect": "plans a reasoning chain then reflects on it",
    "summary": "merges two independent reasoning paths",
}


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    families: tuple[str, ...] = ("sugar", "sodium")
    train_per_family: int = 200
    val_per_family: int = 20
    test_per_family: int = 100
    noise_min: int = 15
    noise_max: int = 25
    extra_gold_min: int = 2
    extra_gold_max: int = 4
    experts: tuple[tuple[str, str], ...] = (("sugar", "birch::AGENT::cot"), ("sodium", "cedar::AGENT::mad"))
    expert_hit: float = 0.9
    base_hit: float = 0.4
    flip: float = 0.02
    noisy_agents: int = 0
    noisy_flip: float = 0.3
    sensitivity: float = 0.0
    budget: int = 6
    # simulated agents cite (attend to) the mentioned entities, each other
    # signal entity with prob attend_signal, each noise entity with attend_noise
    attend_signal: float = 1.0
    attend_noise: float = 0.0

    def __post_init__(self):
        unknown = [f for f in self.families if f not in FAMILIES]
        if unknown:
            raise ValueError(f"unknown families {unknown}; known: {sorted(FAMILIES)}")
        if not 0 <= self.noise_min <= self.noise_max:
            raise ValueError("need 0 <= noise_min <= noise_max")
        if not 0 <= self.extra_gold_min <= self.extra_gold_max:
            raise ValueError("need 0 <= extra_gold_min <= extra_gold_max")
        if self.noise_max > len(HABITS) + len(INGREDIENTS) + len(NUTRIENTS):
            raise ValueError("noise_max exceeds the noise vocabulary")


@dataclass
class Scenario:
    config: ScenarioConfig
    queries: list[QueryInstance]
    pool: list[AgentSpec]
    profiles: dict[str, SyntheticAgentProfile]
    vocabulary: tuple[str, ...] = DEFAULT_TAGS
    experts: dict[str, str] = field(default_factory=dict)

    def split(self, name: str) -> list[QueryInstance]:
        return [q for q in self.queries if q.split == name]


def agent_pool() -> list[AgentSpec]:
    return [AgentSpec(b, s, STRATEGY_TEXT[s]) for b in BACKBONES for s in STRATEGIES]


def _make_query(rng: np.random.Generator, qid: str, family: str, cfg: ScenarioConfig, split: str) -> QueryInstance:
    fam = FAMILIES[family]
    food = str(rng.choice(FOODS))
    condition = str(rng.choice(fam["conditions"]))
    high = bool(rng.random() < 0.5)
    tag = fam["high"] if high else fam["low"]

    triples = [
        (food, "belongs to", tag),
        ("user", "has", condition),
        (condition, "contradict" if high else "match", tag),
    ]
    subkinds = {food: "food", "user": "user", condition: "condition", tag: "nutrition_tag"}

    n_noise = int(rng.integers(cfg.noise_min, cfg.noise_max + 1))
    n_hab = min(n_noise, int(rng.integers(3, 8)))
    n_ing = min(n_noise - n_hab, int(rng.integers(3, 8)))
    n_nut = n_noise - n_hab - n_ing
    if n_nut and not n_ing:
        n_ing, n_nut = 1, n_nut - 1
    habits = [str(x) for x in rng.choice(HABITS, n_hab, replace=False)]
    ingredients = [str(x) for x in rng.choice(INGREDIENTS, n_ing, replace=False)]
    nutrients = [str(x) for x in rng.choice(NUTRIENTS, n_nut, replace=False)]
    for h in habits:
        triples.append(("user", "does", h))
        subkinds[h] = "habit"
    for i in ingredients:
        triples.append((food, "has", i))
        subkinds[i] = "ingredient"
    for n in nutrients:
        triples.append((str(rng.choice(ingredients)), "contains", n))
        subkinds[n] = "nutrient"

    others = [t for t in DEFAULT_TAGS if t not in (fam["low"], fam["high"])
              and not any(t in (FAMILIES[f]["low"], FAMILIES[f]["high"]) for f in cfg.families)]
    k = min(len(others), int(rng.integers(cfg.extra_gold_min, cfg.extra_gold_max + 1)))
    gold = {fam["low"]} | {str(x) for x in rng.choice(others, k, replace=False)}

    names = list(dict.fromkeys([x for t in triples for x in (t[0], t[2])]))
    ctx = ContextGraph(
        nodes=tuple(GraphNode(n, NodeKind(ENTITY, subkinds[n]), n) for n in names),
        edges=tuple(triples),
        source_record_id=qid,
    )
    return QueryInstance(
        id=qid,
        question=f"Is {food} a suitable choice for the user, and which nutrition tags should guide it?",
        gold=frozenset(gold),
        context=ctx,
        mentions=(food, "user"),
        signal=frozenset({food, "user", condition, tag}),
        family=family,
        split=split,
    )


def generate_scenario(cfg: ScenarioConfig = ScenarioConfig()) -> Scenario:
    rng = np.random.default_rng(cfg.seed)
    pool = agent_pool()
    ids = [a.id for a in pool]
    experts = dict(cfg.experts)
    missing = [a for a in experts.values() if a not in ids]
    if missing or set(experts) != set(cfg.families):
        raise ValueError(f"experts must name one pooled agent per family (bad: {missing})")

    non_experts = [a for a in ids if a not in experts.values()]
    noisy = set(rng.choice(non_experts, cfg.noisy_agents, replace=False)) if cfg.noisy_agents else set()
    profiles = {}
    for aid in ids:
        comp = {f: (cfg.expert_hit if experts[f] == aid else cfg.base_hit) for f in cfg.families}
        profiles[aid] = SyntheticAgentProfile(aid, comp, cfg.noisy_flip if aid in noisy else cfg.flip,
                                              cfg.sensitivity, cfg.budget)

    queries = []
    for split, n in (("train", cfg.train_per_family), ("val", cfg.val_per_family), ("test", cfg.test_per_family)):
        for fam in cfg.families:
            for i in range(n):
                queries.append(_make_query(rng, f"{split}-{fam}-{i:04d}", fam, cfg, split))

    attends: dict[str, dict[str, tuple[str, ...]]] = {a.id: {} for a in pool}
    for q in queries:
        signal = q.signal or frozenset()
        for a in pool:
            u = rng.random(len(q.context.nodes))
            cited = []
            for n, x in zip(q.context.node_ids, u):
                if n in q.mentions or x < (cfg.attend_signal if n in signal else cfg.attend_noise):
                    cited.append(n)
            attends[a.id][q.id] = tuple(cited)
    pool = [AgentSpec(a.backbone, a.strategy, a.description, attends[a.id]) for a in pool]
    return Scenario(cfg, queries, pool, profiles, DEFAULT_TAGS, experts)
