"""Agent answers: a seeded synthetic simulator and an optional chat-completion client."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import DEFAULT_TAGS, AgentSpec, ContextGraph, QueryInstance, RoutedGraph, iter_domain_triples
from .metrics import example_f1
from .train import PerformanceRecord

logger = logging.getLogger(__name__)


class AgentConfigError(ValueError):
    pass


class LLMError(RuntimeError):
    pass


@dataclass(frozen=True)
class AgentAnswer:
    agent_id: str
    query_id: str
    tags: frozenset[str]
    context: str = "full"  # full | retrieved
    text: str | None = None
    oov: frozenset[str] = frozenset()
    unparseable: bool = False
    latency: float | None = None

    def to_record(self) -> dict:
        rec = {"agent_id": self.agent_id, "query_id": self.query_id, "tags": sorted(self.tags),
               "context": self.context}
        if self.text is not None:
            rec["text"] = self.text
        if self.oov:
            rec["oov"] = sorted(self.oov)
        if self.unparseable:
            rec["unparseable"] = True
        return rec

    @classmethod
    def from_record(cls, rec: Mapping) -> "AgentAnswer":
        return cls(rec["agent_id"], rec["query_id"], frozenset(rec.get("tags", ())), rec.get("context", "full"),
                   rec.get("text"), frozenset(rec.get("oov", ())), bool(rec.get("unparseable", False)))


def write_answers(path, answers: Iterable[AgentAnswer]) -> None:
    recs = sorted((a.to_record() for a in answers), key=lambda r: (r["query_id"], r["agent_id"]))
    with open(path, "w", encoding="utf-8") as fh:
        for r in recs:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_answers(path) -> list[AgentAnswer]:
    with open(path, encoding="utf-8") as fh:
        return [AgentAnswer.from_record(json.loads(line)) for line in fh if line.strip()]


def group_answers(answers: Iterable[AgentAnswer]) -> dict[str, dict[str, AgentAnswer]]:
    out: dict[str, dict[str, AgentAnswer]] = {}
    for a in answers:
        out.setdefault(a.query_id, {})[a.agent_id] = a
    return out


# --- graph linearization ---------------------------------------------------

def linearize_graph(g: RoutedGraph | ContextGraph) -> str:
    """Domain triples only, one ``['src', 'rel', 'dst']`` per line, sorted."""
    triples = sorted(iter_domain_triples(g))
    return "\n".join(f"[{s!r}, {r!r}, {d!r}]" for s, r, d in triples)


# --- synthetic agents --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticAgentProfile:
    agent_id: str
    competence: Mapping[str, float]
    flip: float = 0.02
    sensitivity: float = 0.05  # hit-rate penalty per irrelevant entity beyond the budget
    budget: int = 6

    def effective_hit(self, family: str, noise_entities: int) -> float:
        if family not in self.competence:
            raise AgentConfigError(f"agent {self.agent_id} has no competence for family {family!r}")
        hit = self.competence[family] - self.sensitivity * max(0, noise_entities - self.budget)
        return min(1.0, max(0.0, hit))


def _stream(seed: int, agent_id: str, query_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}\0{agent_id}\0{query_id}".encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype="<u4").tolist())


def noise_count(q: QueryInstance, graph: RoutedGraph | ContextGraph) -> int:
    base = graph.base if isinstance(graph, RoutedGraph) else graph
    signal = q.signal or frozenset()
    return sum(1 for n in base.node_ids if n not in signal)


def simulate_answer(profile: SyntheticAgentProfile, q: QueryInstance, graph: RoutedGraph | ContextGraph,
                    seed: int, vocabulary: Sequence[str] = DEFAULT_TAGS, context: str = "full") -> AgentAnswer:
    """Each gold tag is emitted with the effective hit rate, each other tag with the flip rate.

    One uniform per vocabulary tag is drawn from a stream keyed on
    (seed, agent, query), so the graph only moves the hit threshold: a
    cleaner graph can add gold tags to the answer but never remove them.
    """
    if q.family is None:
        raise AgentConfigError(f"query {q.id} has no family label")
    hit = profile.effective_hit(q.family, noise_count(q, graph))
    vocab = sorted(set(vocabulary) | set(q.gold))
    u = _stream(seed, profile.agent_id, q.id).random(len(vocab))
    tags = frozenset(t for t, x in zip(vocab, u) if x < (hit if t in q.gold else profile.flip))
    return AgentAnswer(profile.agent_id, q.id, tags, context)


def score_agent_answers(answers: Iterable[AgentAnswer], queries: Sequence[QueryInstance],
                        agent_ids: Sequence[str]) -> PerformanceRecord:
    """Per-query, per-agent example F1; a missing or unparseable answer scores 0 with a flag."""
    by_q = group_answers(answers)
    perf = PerformanceRecord()
    for q in queries:
        row = by_q.get(q.id, {})
        for aid in agent_ids:
            ans = row.get(aid)
            if ans is None:
                perf.set(q.id, aid, 0.0, flag="missing")
            elif ans.unparseable:
                perf.set(q.id, aid, 0.0, flag="unparseable")
            else:
                perf.set(q.id, aid, example_f1(ans.tags, q.gold))
    return perf


# --- prompt suite -------------------------------------------------------------

ANSWER_CONTRACT = 'Reply with exactly one JSON object: {"answer": "<short factual answer>"}.'

PROMPT_TEMPLATES: dict[str, str] = {
    "raw": (
        "Answer the question directly from the question and the graph context.\n"
        "Keep only the shortest exact entity or tag list.\n" + ANSWER_CONTRACT
    ),
    "cot": (
        "You answer questions that need several reasoning hops.\n"
        "Work through the question and the graph context step by step, then answer.\n"
        "Keep only the shortest exact entity or tag list.\n" + ANSWER_CONTRACT
    ),
    "sc": (
        "Draft several independent candidate answers for the question and graph context,\n"
        "then keep whatever most candidates agree on.\n" + ANSWER_CONTRACT
    ),
    "mad": (
        "Play three parts in one reply: debater_a, debater_b and judge.\n"
        "  debater_a: propose the best-supported answer, citing 1-3 short pieces of the context.\n"
        "  debater_b: challenge that proposal and repair it if it is weak or incomplete.\n"
        "  judge: settle on the final answer using the context only, in its shortest exact form.\n"
        + ANSWER_CONTRACT
    ),
    "react_reflect": (
        "Play two parts in one reply: react and reflect.\n"
        "  react: chain the relevant facts into a plan and derive a brief answer.\n"
        "  reflect: check that answer, suggest fixes if needed, then give its shortest exact form.\n"
        + ANSWER_CONTRACT
    ),
    "summary": (
        "Play three parts in one reply: think_a, think_b and summarize.\n"
        "  think_a and think_b: reason separately and each propose an answer.\n"
        "  summarize: return the shared answer if they agree, otherwise pick the better one,\n"
        "  in its shortest exact form.\n" + ANSWER_CONTRACT
    ),
}


def render_prompt(strategy: str, question: str, graph: RoutedGraph | ContextGraph) -> str:
    if strategy not in PROMPT_TEMPLATES:
        raise AgentConfigError(f"no prompt template for strategy {strategy!r}")
    return f"{PROMPT_TEMPLATES[strategy]}\n\nQuestion: {question}\n\nGraph Context:\n{linearize_graph(graph)}\n"


_OBJ_RE = re.compile(r"\{[^{}]*\"answer\"[^{}]*\}", re.DOTALL)


def extract_answer(text: str):
    """Last parseable ``{"answer": ...}`` object in ``text``; None when absent."""
    for m in reversed(list(_OBJ_RE.finditer(text))):
        try:
            obj = json.loads(m.group(0))
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and "answer" in obj:
            return obj["answer"]
    return None


def _norm_tag(s: str) -> str:
    return re.sub(r"[\s_\\-]+", "_", str(s).strip().lower()).strip("_")


def map_tags(answer, vocabulary: Sequence[str] = DEFAULT_TAGS) -> tuple[frozenset[str], frozenset[str]]:
    """Map an answer string or list onto (in-vocabulary tags, out-of-vocabulary strings)."""
    parts = answer if isinstance(answer, (list, tuple)) else re.split(r"[,;\n]", str(answer))
    lookup = {_norm_tag(t): t for t in vocabulary}
    tags, oov = set(), set()
    for p in parts:
        key = _norm_tag(p)
        if not key:
            continue
        if key in lookup:
            tags.add(lookup[key])
        else:
            oov.add(str(p).strip())
    return frozenset(tags), frozenset(oov)


@dataclass
class LLMConfig:
    endpoint: str
    model: str
    api_key_env: str = "KGROUTE_LLM_API_KEY"
    cache_dir: str = ".kgroute-cache/llm"
    max_attempts: int = 3
    temperature: float = 0.0
    timeout: float = 60.0


@dataclass
class LLMClient:
    """Chat-completion client with an on-disk response cache keyed by (model, prompt)."""

    config: LLMConfig
    client: object | None = None
    vocabulary: Sequence[str] = DEFAULT_TAGS
    upstream_calls: int = field(default=0, init=False)

    def __post_init__(self):
        if self.client is None:
            import httpx

            self.client = httpx.Client(timeout=self.config.timeout)
        Path(self.config.cache_dir).mkdir(parents=True, exist_ok=True)

    def _cache_path(self, prompt: str) -> Path:
        h = hashlib.sha256(f"{self.config.model}\0{prompt}".encode("utf-8")).hexdigest()
        return Path(self.config.cache_dir) / f"{h}.json"

    def complete(self, prompt: str) -> str:
        path = self._cache_path(prompt)
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["content"]
        import httpx

        headers = {}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = {"model": self.config.model, "temperature": self.config.temperature,
                "messages": [{"role": "user", "content": prompt}]}
        delay = 1.0
        for attempt in range(1, self.config.max_attempts + 1):
            self.upstream_calls += 1
            try:
                resp = self.client.post(self.config.endpoint, json=body, headers=headers)
            except httpx.TransportError as exc:
                err = f"transport failure: {exc}"
            else:
                if resp.status_code in (401, 403):
                    raise LLMError(f"auth failed ({resp.status_code}): {resp.text[:200]}")
                if resp.status_code < 400:
                    content = resp.json()["choices"][0]["message"]["content"]
                    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
                    with os.fdopen(fd, "w", encoding="utf-8") as fh:
                        json.dump({"model": self.config.model, "content": content}, fh)
                    os.replace(tmp, path)
                    return content
                err = f"HTTP {resp.status_code}: {resp.text[:200]}"
            if attempt == self.config.max_attempts:
                raise LLMError(f"giving up after {attempt} attempts: {err}")
            logger.warning("%s; retrying in %.1fs", err, delay)
            time.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def call(self, agent: AgentSpec, q: QueryInstance, graph: RoutedGraph | ContextGraph,
             context: str = "full") -> AgentAnswer:
        prompt = render_prompt(agent.strategy, q.question, graph)
        t0 = time.perf_counter()
        text = self.complete(prompt)
        answer = extract_answer(text)
        if answer is None:
            # one retry with the contract restated, bypassing nothing: it is a new prompt
            text = self.complete(prompt + "\n" + ANSWER_CONTRACT)
            answer = extract_answer(text)
        latency = time.perf_counter() - t0
        if answer is None:
            return AgentAnswer(agent.id, q.id, frozenset(), context, text, unparseable=True, latency=latency)
        tags, oov = map_tags(answer, self.vocabulary)
        return AgentAnswer(agent.id, q.id, tags, context, str(answer), oov, latency=latency)
