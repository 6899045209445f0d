"""Example-based multi-label metrics, aggregation, and comparison tables.

Per query: precision = |P∩G|/|P| (0 for empty P), recall = |P∩G|/|G|, F1 their
harmonic mean (0 when both are 0), accuracy = exact set match. Means are taken
over queries; queries with empty gold are excluded and counted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

METRICS = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class QueryMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


def multilabel_metrics(pred: Iterable[str], gold: Iterable[str]) -> QueryMetrics:
    """Per-query metrics in [0, 1]."""
    pred, gold = set(pred), set(gold)
    inter = len(pred & gold)
    p = inter / len(pred) if pred else 0.0
    r = inter / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return QueryMetrics(float(pred == gold and bool(gold)), p, r, f)


def example_f1(pred: Iterable[str], gold: Iterable[str]) -> float:
    return multilabel_metrics(pred, gold).f1


@dataclass(frozen=True)
class MetricsRow:
    setting: str
    method: str
    n: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    std: Mapping[str, float] | None = None
    excluded: int = 0

    def record(self) -> dict:
        d = asdict(self)
        for k in METRICS:
            d[k] = round(d[k], 2)
        if self.std is not None:
            d["std"] = {k: round(v, 2) for k, v in self.std.items()}
        return d


def score_predictions(preds: Mapping[str, Iterable[str]], gold: Mapping[str, Iterable[str]],
                      setting: str = "synthetic", method: str = "") -> MetricsRow:
    """Mean per-query metrics (percent) over queries with non-empty gold."""
    rows, excluded = [], 0
    for qid in sorted(gold):
        if not set(gold[qid]):
            excluded += 1
            continue
        rows.append(multilabel_metrics(preds.get(qid, ()), gold[qid]))
    if not rows:
        raise ValueError(f"no scorable queries for {method or setting}")
    mean = {k: 100.0 * float(np.mean([getattr(r, k) for r in rows])) for k in METRICS}
    return MetricsRow(setting, method, len(rows), excluded=excluded, **mean)


def aggregate(runs: Sequence[MetricsRow]) -> MetricsRow:
    """Mean and population std over repeated runs of the same (setting, method)."""
    if not runs:
        raise ValueError("nothing to aggregate")
    keys = {(r.setting, r.method) for r in runs}
    if len(keys) != 1:
        raise ValueError(f"aggregate expects a single (setting, method), got {sorted(keys)}")
    mean = {k: float(np.mean([getattr(r, k) for r in runs])) for k in METRICS}
    std = {k: float(np.std([getattr(r, k) for r in runs])) for k in METRICS} if len(runs) > 1 else None
    return MetricsRow(runs[0].setting, runs[0].method, runs[0].n, std=std, excluded=runs[0].excluded, **mean)


def group_rows(rows: Iterable[MetricsRow]) -> list[MetricsRow]:
    groups: dict[tuple[str, str], list[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.setting, r.method), []).append(r)
    return [aggregate(groups[k]) for k in sorted(groups)]


def format_table(rows: Sequence[MetricsRow], flag_best: bool = True) -> str:
    """Aligned text table; the best F1 per setting is marked with ``*``."""
    best: dict[str, float] = {}
    for r in rows:
        best[r.setting] = max(best.get(r.setting, -1.0), r.f1)
    header = ["setting", "method", "n"] + list(METRICS)
    body = []
    for r in rows:
        cells = [r.setting, r.method, str(r.n)]
        for k in METRICS:
            v = f"{getattr(r, k):.2f}"
            if r.std is not None:
                v += f"±{r.std[k]:.2f}"
            if flag_best and k == "f1" and getattr(r, k) == best[r.setting]:
                v += "*"
            cells.append(v)
        body.append(cells)
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip() for cells in body]
    return "\n".join(lines) + "\n"


def rows_to_jsonl(rows: Iterable[MetricsRow]) -> str:
    return "".join(json.dumps(r.record(), sort_keys=True, ensure_ascii=False) + "\n" for r in rows)


def compare_methods(methods: Mapping[str, Mapping[str, Iterable[str]]], gold: Mapping[str, Iterable[str]],
                    setting: str = "synthetic") -> list[MetricsRow]:
    """Score each method's predictions on the same query set.

    Every method must cover exactly the gold query ids; no silent intersection.
    """
    expected = set(gold)
    rows = []
    for name in methods:
        got = set(methods[name])
        if got != expected:
            raise ValueError(f"method {name!r} covers a different query set "
                             f"({len(got - expected)} extra, {len(expected - got)} missing)")
        rows.append(score_predictions(methods[name], gold, setting, name))
    return rows


# --- retrieval impact ---------------------------------------------------------

def pct_change(before: float, after: float) -> float:
    if before == 0:
        return 0.0 if after == 0 else float("inf")
    return 100.0 * (after - before) / before


@dataclass(frozen=True)
class RetrievalRow:
    nodes_before: float
    nodes_after: float
    edges_before: float
    edges_after: float
    node_drop: float
    edge_drop: float
    snr_before: float | None
    snr_after: float | None
    snr_raise: float | None

    def record(self) -> dict:
        return {k: (None if v is None else round(v, 2)) for k, v in asdict(self).items()}


def retrieval_row(nodes_before: float, nodes_after: float, edges_before: float, edges_after: float,
                  snr_before: float | None = None, snr_after: float | None = None) -> RetrievalRow:
    have_snr = snr_before is not None and snr_after is not None
    return RetrievalRow(
        nodes_before, nodes_after, edges_before, edges_after,
        -pct_change(nodes_before, nodes_after), -pct_change(edges_before, edges_after),
        snr_before, snr_after, pct_change(snr_before, snr_after) if have_snr else None,
    )


def format_retrieval_table(rows: Mapping[str, RetrievalRow]) -> str:
    header = ["setting", "nodes", "after", "drop%", "edges", "after", "drop%", "snr", "after", "raise%"]

    def f(v):
        return "n/a" if v is None else f"{v:.2f}"

    body = [[s, f(r.nodes_before), f(r.nodes_after), f(r.node_drop), f(r.edges_before), f(r.edges_after),
             f(r.edge_drop), f(r.snr_before), f(r.snr_after), f(r.snr_raise)] for s, r in rows.items()]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip(), "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip() for cells in body]
    return "\n".join(lines) + "\n"
