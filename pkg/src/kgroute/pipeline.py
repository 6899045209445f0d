"""Stage functions over a run directory.

simulate/ingest -> label -> train -> route -> retrieve -> answer -> vote -> eval

Every stage reads its inputs from the run directory, writes its outputs
there, and is deterministic given the resolved config. Missing inputs raise
``MissingArtifact`` naming the stage that produces them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .agents import (
    AgentAnswer, LLMClient, LLMConfig, SyntheticAgentProfile, group_answers, read_answers, score_agent_answers,
    simulate_answer, write_answers,
)
from .config import RunConfig
from .embed import embed_graph, make_embedder
from .ensemble import VoteConfig, best_agent_oracle, majority_vote, uniform_distribution, weighted_vote
from .graph import (
    DEFAULT_TAGS, AgentSpec, QueryInstance, RoutedGraph, dump_routed_graph, extend_graph, read_corpus, write_corpus,
)
from .hgnn import CompiledGraph, RouteDistribution, compile_graph, init_params, predict_many, schema_of
from .metrics import (
    MetricsRow, compare_methods, format_retrieval_table, format_table, rows_to_jsonl,
)
from .saliency import SalienceMap, entity_salience, retrieval_report, retrieve_subgraph, write_salience_dump
from .synthetic import generate_scenario
from .train import (
    Checkpoint, PerformanceRecord, TrainResult, load_checkpoint, save_checkpoint, target_distribution, train,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class MissingArtifact(FileNotFoundError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `kgroute {producer}` first")
        self.path = path
        self.producer = producer


class DataError(ValueError):
    """Inputs are present but inconsistent (unknown agents, bad splits, ...)."""


# --- small io helpers -----------------------------------------------------------

def write_text(path: Path, text: str) -> None:
    """Atomic write: readers never see a half-written artifact."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_jsonl(path: Path, records: Iterable[Mapping]) -> None:
    write_text(path, "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records))


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def stable_split(query_id: str) -> str:
    """70/10/20 split from a hash of the id, for corpora without split labels."""
    u = int(hashlib.sha256(query_id.encode("utf-8")).hexdigest()[:8], 16) / 0xFFFFFFFF
    return "train" if u < 0.7 else ("val" if u < 0.8 else "test")


# --- agent pool file -------------------------------------------------------------

@dataclass
class Pool:
    agents: list[AgentSpec]
    profiles: dict[str, SyntheticAgentProfile]
    vocabulary: tuple[str, ...] = DEFAULT_TAGS
    experts: dict[str, str] | None = None

    @property
    def ids(self) -> list[str]:
        return [a.id for a in self.agents]

    def to_json(self) -> str:
        doc = {
            "agents": [{"backbone": a.backbone, "strategy": a.strategy, "description": a.description,
                        "attends": {q: list(v) for q, v in sorted((a.attends or {}).items())}}
                       for a in self.agents],
            "profiles": {aid: {"competence": dict(sorted(p.competence.items())), "flip": p.flip,
                               "sensitivity": p.sensitivity, "budget": p.budget}
                         for aid, p in sorted(self.profiles.items())},
            "vocabulary": list(self.vocabulary),
            "experts": self.experts,
        }
        return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Pool":
        doc = json.loads(text)
        agents = [AgentSpec(a["backbone"], a["strategy"], a.get("description", ""),
                            {q: tuple(v) for q, v in (a.get("attends") or {}).items()} or None)
                  for a in doc["agents"]]
        profiles = {aid: SyntheticAgentProfile(aid, p["competence"], p["flip"], p["sensitivity"], p["budget"])
                    for aid, p in (doc.get("profiles") or {}).items()}
        return cls(agents, profiles, tuple(doc.get("vocabulary") or DEFAULT_TAGS), doc.get("experts"))


# --- workspace -------------------------------------------------------------------

class Workspace:
    """Typed access to one run directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = cfg.run_dir()

    def path(self, name: str) -> Path:
        return self.cfg.path(name)

    def file(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def ensure(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        snap = self.file("config.resolved.yaml")
        text = self.cfg.snapshot()
        if not snap.exists() or snap.read_text(encoding="utf-8") != text:
            write_text(snap, text)

    @staticmethod
    def require(path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path, producer)
        return path

    # artifacts
    @cached_property
    def queries(self) -> list[QueryInstance]:
        path = self.require(self.path("corpus"), "simulate` or `kgroute ingest")
        qs = read_corpus(path)
        return [q if q.split else replace(q, split=stable_split(q.id)) for q in qs]

    def split(self, name: str) -> list[QueryInstance]:
        return [q for q in self.queries if q.split == name]

    @cached_property
    def query_by_id(self) -> dict[str, QueryInstance]:
        return {q.id: q for q in self.queries}

    @cached_property
    def pool(self) -> Pool:
        path = self.require(self.path("pool"), "simulate` or `kgroute ingest")
        return Pool.from_json(path.read_text(encoding="utf-8"))

    @cached_property
    def graphs(self) -> dict[str, RoutedGraph]:
        return {q.id: extend_graph(q, self.pool.agents) for q in self.queries}

    @cached_property
    def embedder(self):
        cfg = self.cfg.embedder
        if cfg.mode == "external" and cfg.cache_dir is None:
            cfg = replace(cfg, cache_dir=str(self.path("cache") / "embeddings"))
        return make_embedder(cfg)

    def compile(self, g: RoutedGraph) -> CompiledGraph:
        return compile_graph(g, embed_graph(g, self.embedder))

    @cached_property
    def compiled(self) -> dict[str, CompiledGraph]:
        return {qid: self.compile(g) for qid, g in self.graphs.items()}

    @property
    def labels(self) -> PerformanceRecord:
        return PerformanceRecord.read(self.require(self.path("labels"), "label"))

    def answers(self, context: str) -> list[AgentAnswer]:
        producer = "label" if context == "full" else "answer --context retrieved"
        return read_answers(self.require(self.path("answers") / f"{context}.jsonl", producer))

    @property
    def checkpoint_dir(self) -> Path:
        return self.path("checkpoints") / "router"

    def checkpoint(self) -> Checkpoint:
        return load_checkpoint(self.require(self.checkpoint_dir / "manifest.json", "train").parent)

    def routes(self) -> dict[str, RouteDistribution]:
        recs = read_jsonl(self.require(self.file("routes.jsonl"), "route"))
        return {r["query_id"]: RouteDistribution(tuple(r["agents"]), np.array(r["probs"]), {"query_id": r["query_id"]})
                for r in recs}

    def subgraphs(self) -> dict[str, RoutedGraph]:
        from .graph import load_routed_graph

        recs = read_jsonl(self.require(self.file("retrieval", "subgraphs.jsonl"), "retrieve"))
        return {r["query_id"]: load_routed_graph(r) for r in recs}

    def report(self, name: str) -> Path:
        return self.path("reports") / name


# --- stages ----------------------------------------------------------------------

def stage_simulate(ws: Workspace) -> dict:
    """Generate the synthetic scenario and label it (agents answer on full graphs)."""
    ws.ensure()
    sc = generate_scenario(ws.cfg.scenario)
    corpus = ws.path("corpus")
    corpus.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, sc.queries)
    write_text(ws.path("pool"), Pool(sc.pool, sc.profiles, sc.vocabulary, sc.experts).to_json())
    for k in ("queries", "query_by_id", "pool", "graphs", "compiled"):
        ws.__dict__.pop(k, None)
    return {"queries": len(sc.queries), "agents": len(sc.pool), **stage_label(ws)}


def stage_ingest(ws: Workspace, source: Path, pool_file: Path | None = None) -> dict:
    """Validate and normalize an external corpus into the run directory."""
    ws.ensure()
    queries = read_corpus(source)
    if not queries:
        raise DataError(f"{source} holds no records")
    queries = [q if q.split else replace(q, split=stable_split(q.id)) for q in queries]
    write_corpus(ws.path("corpus"), queries)
    if pool_file is not None:
        pool = Pool.from_json(Path(pool_file).read_text(encoding="utf-8"))
    else:
        from .synthetic import agent_pool

        pool = Pool(agent_pool(), {})
    write_text(ws.path("pool"), pool.to_json())
    return {"queries": len(queries), "agents": len(pool.agents), "settings": corpus_stats(queries)}


def corpus_stats(queries: Sequence[QueryInstance]) -> dict[str, dict]:
    """Per-setting counts and mean graph sizes (setting = family label, else "all")."""
    groups: dict[str, list[QueryInstance]] = {}
    for q in queries:
        groups.setdefault(q.family or "all", []).append(q)
    out = {}
    for name in sorted(groups):
        qs = groups[name]
        out[name] = {
            "queries": len(qs),
            "splits": {s: sum(q.split == s for q in qs) for s in SPLITS},
            "mean_nodes": round(float(np.mean([len(q.context.nodes) for q in qs])), 2),
            "mean_edges": round(float(np.mean([len(q.context.edges) for q in qs])), 2),
            "degenerate": sum(q.degenerate for q in qs),
            "unlabelled": sum(not q.gold for q in qs),
        }
    return out


def _run_agents(ws: Workspace, queries: Sequence[QueryInstance], graphs: Mapping[str, RoutedGraph],
                context: str) -> list[AgentAnswer]:
    cfg, pool = ws.cfg, ws.pool
    if cfg.agents.mode == "synthetic":
        missing = [a for a in pool.ids if a not in pool.profiles]
        if missing:
            raise DataError(f"synthetic agents need profiles in {ws.path('pool')}; none for {missing[:3]}")
        return [simulate_answer(pool.profiles[a.id], q, graphs[q.id], cfg.seed, pool.vocabulary, context)
                for q in queries for a in pool.agents]
    llm = LLMClient(LLMConfig(cfg.agents.endpoint, cfg.agents.model, cfg.agents.api_key_env,
                              str(ws.path("cache") / "llm"), cfg.agents.max_attempts, 0.0, cfg.agents.timeout),
                    vocabulary=pool.vocabulary)
    jobs = [(a, q) for q in queries for a in pool.agents]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as ex:
        return list(ex.map(lambda aq: llm.call(aq[0], aq[1], graphs[aq[1].id], context), jobs))


def stage_label(ws: Workspace) -> dict:
    """Every agent answers every query on the full graph; per-agent F1 becomes the label."""
    ws.ensure()
    answers = _run_agents(ws, ws.queries, ws.graphs, "full")
    ws.path("answers").mkdir(parents=True, exist_ok=True)
    write_answers(ws.path("answers") / "full.jsonl", answers)
    perf = score_agent_answers(answers, ws.queries, ws.pool.ids)
    ws.path("labels").parent.mkdir(parents=True, exist_ok=True)
    perf.write(ws.path("labels"))
    return {"answers": len(answers), "labelled_queries": len(perf)}


def build_router(ws: Workspace):
    # schema covers every graph in the corpus (structure only, no labels)
    rels, types = schema_of(ws.graphs.values())
    return init_params(ws.cfg.model, rels, types)


def stage_train(ws: Workspace, resume: bool = False, stop_after: int | None = None) -> TrainResult:
    ws.ensure()
    perf = ws.labels
    train_set = [ws.compiled[q.id] for q in ws.split("train")]
    val_set = [ws.compiled[q.id] for q in ws.split("val")]
    if not train_set:
        raise DataError("no training queries")
    ck = None
    if resume and (ws.checkpoint_dir / "manifest.json").exists():
        ck = ws.checkpoint()
        if ck.train_config != ws.cfg.train:
            raise DataError("checkpoint was written under a different train config")
    history_path = ws.report("train_history.jsonl")

    def on_epoch(record: dict, ckpt: Checkpoint) -> None:
        save_checkpoint(ckpt, ws.checkpoint_dir)

    result = train(train_set, perf, build_router(ws), ws.cfg.train, val=val_set, resume=ck,
                   stop_after=stop_after, on_epoch=on_epoch)
    save_checkpoint(result.last, ws.checkpoint_dir)
    write_jsonl(history_path, result.history)
    return result


def _eval_queries(ws: Workspace) -> list[QueryInstance]:
    qs = ws.split("test")
    if not qs:
        raise DataError("no test queries")
    return qs


def stage_route(ws: Workspace) -> dict[str, RouteDistribution]:
    params = ws.checkpoint().best_params()
    qs = _eval_queries(ws)
    dists = predict_many([ws.compiled[q.id] for q in qs], params)
    write_jsonl(ws.file("routes.jsonl"),
                [{"query_id": q.id, "agents": list(d.agent_ids), "probs": d.probs.tolist()} for q, d in zip(qs, dists)])
    return {q.id: d for q, d in zip(qs, dists)}


def salience_mode(ws: Workspace) -> str:
    # labels of evaluation queries are for scoring only, so "auto" means self here
    mode = ws.cfg.retrieval.mode
    return "self" if mode == "auto" else mode


def stage_retrieve(ws: Workspace) -> dict:
    cfg = ws.cfg
    params = ws.checkpoint().best_params()
    qs = _eval_queries(ws)
    mode = salience_mode(ws)
    perf = ws.labels if mode == "oracle" else None
    maps: list[SalienceMap] = []
    subgraphs, before, after = [], [], []
    for q in qs:
        f1 = perf.vector(q.id, ws.pool.ids) if perf is not None else None
        sal = entity_salience(ws.compiled[q.id], params, mode, f1, cfg.train.temperature, cfg.retrieval.layer)
        r = retrieve_subgraph(ws.graphs[q.id], sal, cfg.retrieval, q.signal)
        maps.append(sal)
        subgraphs.append(dump_routed_graph(r.graph))
        before.append(r.before)
        after.append(r.after)
    out = ws.file("retrieval")
    out.mkdir(parents=True, exist_ok=True)
    write_salience_dump(out / "salience.jsonl", maps)
    write_jsonl(out / "subgraphs.jsonl", subgraphs)
    write_jsonl(out / "stats.jsonl", [
        {"query_id": q.id, "nodes_before": b.entity_nodes, "nodes_after": a.entity_nodes,
         "edges_before": b.entity_edges, "edges_after": a.entity_edges, "snr_before": b.node_snr,
         "snr_after": a.node_snr}
        for q, b, a in zip(qs, before, after)])
    row = retrieval_report(before, after)
    write_text(ws.report("retrieval.txt"), format_retrieval_table({"synthetic" if ws.pool.experts else "corpus": row}))
    write_text(ws.report("retrieval.json"), json.dumps(row.record(), sort_keys=True, indent=1) + "\n")
    return row.record()


def stage_answer(ws: Workspace, context: str = "retrieved") -> dict:
    if context == "full":
        return stage_label(ws)
    qs = _eval_queries(ws)
    sub = ws.subgraphs()
    answers = _run_agents(ws, qs, sub, "retrieved")
    ws.path("answers").mkdir(parents=True, exist_ok=True)
    write_answers(ws.path("answers") / "retrieved.jsonl", answers)
    return {"answers": len(answers)}


def _subset(answers: Iterable[AgentAnswer], qids: set[str]) -> dict[str, dict[str, AgentAnswer]]:
    return {q: row for q, row in group_answers(answers).items() if q in qids}


def router_predictions(answers: Mapping[str, Mapping[str, AgentAnswer]], routes: Mapping[str, RouteDistribution],
                       vote: VoteConfig) -> dict[str, frozenset[str]]:
    return {qid: weighted_vote(answers.get(qid, {}), routes[qid], vote) for qid in sorted(routes)}


def method_predictions(ws: Workspace, k: int | None = None) -> dict[str, dict[str, frozenset[str]]]:
    """Predictions of every compared method on the evaluation queries."""
    qs = _eval_queries(ws)
    qids = {q.id for q in qs}
    routes = ws.routes()
    vote = ws.cfg.vote if k is None else replace(ws.cfg.vote, k=k)
    full = _subset(ws.answers("full"), qids)
    methods: dict[str, dict[str, frozenset[str]]] = {
        "router": router_predictions(full, routes, vote),
        "majority_vote": {q: majority_vote(full.get(q, {})) for q in sorted(qids)},
    }
    retrieved_path = ws.path("answers") / "retrieved.jsonl"
    if retrieved_path.exists():
        methods["router+retrieval"] = router_predictions(_subset(ws.answers("retrieved"), qids), routes, vote)
    for aid in ws.pool.ids:
        methods[f"agent:{aid}"] = {q: (full[q][aid].tags if aid in full.get(q, {}) else frozenset())
                                   for q in sorted(qids)}
    perf = ws.labels
    per_query = best_agent_oracle(perf, "per-query", sorted(qids))
    methods["oracle:per-query"] = {q: full[q][a].tags for q, a in per_query.selection.items()}
    return methods


def stage_vote(ws: Workspace) -> dict:
    methods = method_predictions(ws)
    write_jsonl(ws.file("votes.jsonl"),
                [{"method": m, "query_id": q, "tags": sorted(tags)}
                 for m in sorted(methods) for q, tags in sorted(methods[m].items())])
    return {"methods": len(methods)}


def read_votes(ws: Workspace) -> dict[str, dict[str, frozenset[str]]]:
    out: dict[str, dict[str, frozenset[str]]] = {}
    for r in read_jsonl(ws.require(ws.file("votes.jsonl"), "vote")):
        out.setdefault(r["method"], {})[r["query_id"]] = frozenset(r["tags"])
    return out


def best_single_agent(rows: Sequence[MetricsRow]) -> MetricsRow:
    singles = [r for r in rows if r.method.startswith("agent:")]
    return max(singles, key=lambda r: (r.f1, r.method))


def expert_agreement(ws: Workspace, routes: Mapping[str, RouteDistribution]) -> float | None:
    experts = ws.pool.experts
    if not experts:
        return None
    hits = [routes[q].argmax() == experts[ws.query_by_id[q].family] for q in routes
            if ws.query_by_id[q].family in experts]
    return float(np.mean(hits)) if hits else None


def stage_eval(ws: Workspace, setting: str = "synthetic") -> dict:
    """Score every method on the evaluation queries; runs any missing downstream stage."""
    ws.checkpoint()  # fail early with the right message when untrained
    if not ws.file("routes.jsonl").exists():
        stage_route(ws)
    if not ws.file("retrieval", "subgraphs.jsonl").exists():
        stage_retrieve(ws)
    if not (ws.path("answers") / "retrieved.jsonl").exists():
        stage_answer(ws, "retrieved")
    if not ws.file("votes.jsonl").exists():
        stage_vote(ws)
    methods = read_votes(ws)
    gold = {q.id: q.gold for q in _eval_queries(ws)}
    rows = compare_methods(methods, gold, setting)
    best = best_single_agent(rows)
    oracle = best_agent_oracle(ws.labels, "per-setting", sorted(gold))
    uniform_f1 = _uniform_f1(ws, gold)
    by_name = {r.method: r for r in rows}
    summary = {
        "queries": len(gold),
        "router_f1": by_name["router"].f1,
        "router_retrieval_f1": by_name["router+retrieval"].f1 if "router+retrieval" in by_name else None,
        "majority_vote_f1": by_name["majority_vote"].f1,
        "best_single_agent": best.method.split(":", 1)[1],
        "best_single_agent_f1": best.f1,
        "oracle_per_setting_f1": 100.0 * oracle.f1,
        "oracle_per_query_f1": by_name["oracle:per-query"].f1,
        "uniform_ensemble_f1": uniform_f1,
        "expert_agreement": expert_agreement(ws, ws.routes()),
    }
    shown = [r for r in rows if not r.method.startswith("agent:")] + sorted(
        (r for r in rows if r.method.startswith("agent:")), key=lambda r: r.method)
    write_text(ws.report("metrics.txt"), format_table(shown))
    write_text(ws.report("metrics.jsonl"), rows_to_jsonl(shown))
    write_text(ws.report("summary.json"), json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary


def _uniform_f1(ws: Workspace, gold: Mapping[str, frozenset[str]]) -> float:
    from .metrics import score_predictions

    full = _subset(ws.answers("full"), set(gold))
    dist = uniform_distribution(ws.pool.ids)
    preds = {q: weighted_vote(full.get(q, {}), replace(dist, provenance={"query_id": q}), VoteConfig())
             for q in sorted(gold)}
    return score_predictions(preds, gold).f1


def sweep_k(ws: Workspace, ks: Sequence[int]) -> list[dict]:
    from .metrics import score_predictions

    gold = {q.id: q.gold for q in _eval_queries(ws)}
    if not ws.file("routes.jsonl").exists():
        stage_route(ws)
    out = []
    for k in ks:
        preds = method_predictions(ws, k=k)["router"]
        row = score_predictions(preds, gold, "k-sweep", f"k={k}")
        out.append({"k": k, "f1": row.f1, "accuracy": row.accuracy})
    write_jsonl(ws.report("sweep_k.jsonl"), out)
    return out


def run_all(ws: Workspace, synthetic: bool = True) -> dict:
    """simulate -> train -> eval in one call (what the acceptance runs use)."""
    if synthetic and not ws.path("labels").exists():
        stage_simulate(ws)
    if not (ws.checkpoint_dir / "manifest.json").exists():
        stage_train(ws)
    return stage_eval(ws)


def clean(ws: Workspace) -> None:
    if ws.root.exists():
        shutil.rmtree(ws.root)
