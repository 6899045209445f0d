"""Type-aware heterogeneous GNN router.

Per layer, every relation ψ sends ``relu(W_ψ h_u)`` from its source nodes;
messages are averaged per (destination, relation), scaled by a learnable
scalar gate, summed over relations, concatenated with the node's previous
state and pushed through a node-type-specific update ``relu([h ‖ m] U + b)``.
The scorer is a one-hidden-layer MLP on ``[h_query ‖ h_agent]`` followed by a
softmax over the agent pool.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Node, Tape
from .graph import RoutedGraph


class UnsupportedSchemaError(KeyError):
    """Relation or node type not covered by the parameter store."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 256
    input_dim: int = 256
    nonlinearity: str = "relu"  # "identity" exists only for linear gradient checks
    init_seed: int = 0
    strict_grid: bool = True

    def __post_init__(self):
        if self.strict_grid:
            if self.layers not in (1, 2, 3, 4):
                raise ValueError(f"layers must be in 1..4, got {self.layers}")
            if self.hidden not in (64, 128, 256):
                raise ValueError(f"hidden must be one of 64/128/256, got {self.hidden}")
        elif self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be positive")
        if self.nonlinearity not in ("relu", "identity"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


def _param_shapes(cfg: ModelConfig, relations: Sequence[str], types: Sequence[str]) -> list[tuple[str, tuple[int, int]]]:
    H, D = cfg.hidden, cfg.input_dim
    shapes = []
    for t in types:
        shapes += [(f"proj/{t}/W", (D, H)), (f"proj/{t}/b", (1, H))]
    for layer in range(1, cfg.layers + 1):
        for r in relations:
            shapes += [(f"layer{layer}/msg/{r}/W", (H, H)), (f"layer{layer}/gate/{r}", (1, 1))]
        for t in types:
            shapes += [(f"layer{layer}/update/{t}/W", (2 * H, H)), (f"layer{layer}/update/{t}/b", (1, H))]
    shapes += [("scorer/W1", (2 * H, H)), ("scorer/b1", (1, H)), ("scorer/W2", (H, 1)), ("scorer/b2", (1, 1))]
    return shapes


@dataclass
class ParamStore:
    """All learnable arrays, stored as views into one flat float64 vector."""

    config: ModelConfig
    relations: tuple[str, ...]
    types: tuple[str, ...]
    flat: np.ndarray
    layout: list[tuple[str, tuple[int, int], int]] = field(repr=False)

    def __post_init__(self):
        self.views: dict[str, np.ndarray] = {}
        self._offsets: dict[str, tuple[int, int]] = {}
        for name, shape, offset in self.layout:
            size = shape[0] * shape[1]
            self.views[name] = self.flat[offset: offset + size].reshape(shape)
            self._offsets[name] = (offset, offset + size)

    @classmethod
    def zeros(cls, config: ModelConfig, relations: Iterable[str], types: Iterable[str]) -> "ParamStore":
        relations, types = tuple(sorted(set(relations))), tuple(sorted(set(types)))
        layout, offset = [], 0
        for name, shape in _param_shapes(config, relations, types):
            layout.append((name, shape, offset))
            offset += shape[0] * shape[1]
        return cls(config, relations, types, np.zeros(offset), layout)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, self.relations, self.types, self.flat.copy(), list(self.layout))

    def offsets(self) -> dict[str, tuple[int, int]]:
        return self._offsets

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "relations": list(self.relations),
            "types": list(self.types),
            "arrays": [{"name": n, "shape": list(s), "offset": o} for n, s, o in self.layout],
            "size": int(self.flat.size),
        }

    def size(self) -> int:
        return int(self.flat.size)


def init_params(config: ModelConfig, relations: Iterable[str], types: Iterable[str], seed: int | None = None) -> ParamStore:
    """Xavier-uniform matrices, zero biases, gates at 1.0; deterministic in ``seed``."""
    relations = list(relations)
    if not relations:
        raise ValueError("cannot initialise a router with an empty relation set")
    store = ParamStore.zeros(config, relations, types)
    rng = np.random.default_rng(config.init_seed if seed is None else seed)
    for name, shape, _ in store.layout:
        view = store.views[name]
        if "/gate/" in name:
            view[...] = 1.0
        elif name.endswith("/b") or name in ("scorer/b1", "scorer/b2"):
            view[...] = 0.0
        else:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            view[...] = rng.uniform(-bound, bound, size=shape)
    return store


def schema_of(graphs: Iterable[RoutedGraph]) -> tuple[list[str], list[str]]:
    rels, types = set(), set()
    for g in graphs:
        rels.update(e.relation.key for e in g.edges)
        types.update(n.kind.type_key for n in g.nodes)
    return sorted(rels), sorted(types)


@dataclass
class CompiledGraph:
    """Index arrays for one routed graph; nodes are ordered by type key."""

    graph: RoutedGraph
    node_ids: list[str]
    x: np.ndarray
    type_slices: list[tuple[str, slice]]
    relations: list[tuple[str, np.ndarray, np.ndarray]]  # (key, source rows, dst x src mean matrix)
    query_row: int
    agent_rows: np.ndarray
    entity_rows: np.ndarray

    @property
    def row_of(self) -> dict[str, int]:
        return {nid: i for i, nid in enumerate(self.node_ids)}

    @property
    def query_rows(self) -> np.ndarray:
        return np.array([self.query_row], dtype=np.intp)

    @cached_property
    def stacked(self) -> np.ndarray | None:
        return np.concatenate([A for _, _, A in self.relations], axis=1) if self.relations else None

    @property
    def agent_grid(self) -> np.ndarray:
        return self.agent_rows[None, :]


@dataclass
class PackedGraph:
    """Disjoint union of compiled graphs, evaluated in one pass.

    Node rows are regrouped by type across the batch; the per-relation mean
    matrices become block-diagonal sparse matrices. Every graph in a pack must
    have the same number of agents.
    """

    graphs: list[CompiledGraph]
    node_ids: list[str]
    x: np.ndarray
    type_slices: list[tuple[str, slice]]
    relations: list[tuple[str, np.ndarray, object]]
    query_rows: np.ndarray
    agent_grid: np.ndarray

    @cached_property
    def stacked(self):
        from scipy import sparse

        return sparse.hstack([A for _, _, A in self.relations], format="csr") if self.relations else None


def pack_graphs(cgs: Sequence[CompiledGraph]) -> PackedGraph:
    from scipy import sparse

    if not cgs:
        raise ValueError("cannot pack an empty batch")
    k = len(cgs[0].agent_rows)
    if any(len(cg.agent_rows) != k for cg in cgs):
        raise ValueError("packed graphs must share the agent count")
    types = sorted({t for cg in cgs for t, _ in cg.type_slices})
    # packed row of (graph b, local row i)
    remap = [np.empty(len(cg.node_ids), dtype=np.intp) for cg in cgs]
    order: list[tuple[int, int]] = []
    type_slices = []
    for t in types:
        start = len(order)
        for b, cg in enumerate(cgs):
            for tt, sl in cg.type_slices:
                if tt == t:
                    for i in range(sl.start, sl.stop):
                        remap[b][i] = len(order)
                        order.append((b, i))
        type_slices.append((t, slice(start, len(order))))
    n = len(order)
    x = np.stack([cgs[b].x[i] for b, i in order])
    node_ids = [f"{b}/{cgs[b].node_ids[i]}" for b, i in order]

    parts: dict[str, list[tuple[int, np.ndarray, np.ndarray]]] = {}
    for b, cg in enumerate(cgs):
        for key, srcs, A in cg.relations:
            parts.setdefault(key, []).append((b, srcs, A))
    relations = []
    for key in sorted(parts):
        srcs_all, rows, cols, vals = [], [], [], []
        offset = 0
        for b, srcs, A in parts[key]:
            srcs_all.append(remap[b][srcs])
            d, j = np.nonzero(A)
            rows.append(remap[b][d])
            cols.append(j + offset)
            vals.append(A[d, j])
            offset += len(srcs)
        M = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, offset))
        relations.append((key, np.concatenate(srcs_all), M))
    return PackedGraph(
        graphs=list(cgs),
        node_ids=node_ids,
        x=x,
        type_slices=type_slices,
        relations=relations,
        query_rows=np.array([remap[b][cg.query_row] for b, cg in enumerate(cgs)], dtype=np.intp),
        agent_grid=np.stack([remap[b][cg.agent_rows] for b, cg in enumerate(cgs)]),
    )


def compile_graph(g: RoutedGraph, embeddings: Mapping[str, np.ndarray]) -> CompiledGraph:
    order = sorted(range(len(g.nodes)), key=lambda i: g.nodes[i].kind.type_key)
    nodes = [g.nodes[i] for i in order]
    ids = [n.id for n in nodes]
    row = {nid: i for i, nid in enumerate(ids)}
    x = np.stack([np.asarray(embeddings[nid], dtype=np.float64) for nid in ids])

    type_slices = []
    start = 0
    for i in range(1, len(nodes) + 1):
        if i == len(nodes) or nodes[i].kind.type_key != nodes[start].kind.type_key:
            type_slices.append((nodes[start].kind.type_key, slice(start, i)))
            start = i

    by_rel: dict[str, list[tuple[int, int]]] = {}
    for e in g.edges:
        by_rel.setdefault(e.relation.key, []).append((row[e.src], row[e.dst]))
    relations = []
    n = len(ids)
    for key in sorted(by_rel):
        pairs = by_rel[key]
        srcs = np.array(sorted({s for s, _ in pairs}), dtype=np.intp)
        col = {s: j for j, s in enumerate(srcs)}
        A = np.zeros((n, len(srcs)))
        for s, d in pairs:
            A[d, col[s]] += 1.0
        deg = A.sum(axis=1, keepdims=True)
        A = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
        relations.append((key, srcs, A))

    return CompiledGraph(
        graph=g,
        node_ids=ids,
        x=x,
        type_slices=type_slices,
        relations=relations,
        query_row=row[g.query_node],
        agent_rows=np.array([row[a] for a in g.agent_nodes], dtype=np.intp),
        entity_rows=np.array([row[e] for e in g.entity_ids], dtype=np.intp),
    )


@dataclass
class RouteDistribution:
    agent_ids: tuple[str, ...]
    probs: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if len(self.agent_ids) != self.probs.size:
            raise ValueError("one probability per agent required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("route distribution must be non-negative and sum to 1")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.agent_ids, self.probs.tolist()))

    def argmax(self) -> str:
        return self.agent_ids[int(np.argmax(self.probs))]


def route_distribution(scores, agent_ids: Sequence[str] | None = None, provenance: dict | None = None) -> RouteDistribution:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("need at least one agent score")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    e = np.exp(s - s.max())
    p = e / e.sum()
    ids = tuple(agent_ids) if agent_ids is not None else tuple(str(i) for i in range(s.size))
    return RouteDistribution(ids, p, dict(provenance or {}))


@dataclass
class ForwardResult:
    tape: Tape
    compiled: "CompiledGraph | PackedGraph"
    x: Node
    states: list[Node]  # states[l] = all node states after layer l (0 = projected input)
    scores: Node
    probs: Node
    param_nodes: dict[str, Node]

    def distribution(self, provenance: dict | None = None) -> RouteDistribution:
        return RouteDistribution(self.compiled.graph.agent_ids, self.probs.value[0], dict(provenance or {}))

    def distributions(self) -> list[RouteDistribution]:
        graphs = self.compiled.graphs if isinstance(self.compiled, PackedGraph) else [self.compiled]
        return [RouteDistribution(cg.graph.agent_ids, row, {"query_id": cg.graph.query_id})
                for cg, row in zip(graphs, self.probs.value)]

    def node_states(self, layer: int = -1) -> dict[str, np.ndarray]:
        H = self.states[layer].value
        return {nid: H[i] for i, nid in enumerate(self.compiled.node_ids)}


def forward(cg: CompiledGraph | PackedGraph, params: ParamStore, tape: Tape | None = None,
            input_grad: bool = False, fused: bool = True) -> ForwardResult:
    """Run the router on one compiled graph, recording onto ``tape``.

    ``fused=False`` builds the same network from elementary primitives only;
    it exists to cross-check the fused kernels.
    """
    tape = tape or Tape()
    cfg = params.config
    use_relu = cfg.nonlinearity == "relu"
    act = tape.relu if use_relu else tape.identity
    pnodes: dict[str, Node] = {}

    def P(name: str) -> Node:
        node = pnodes.get(name)
        if node is None:
            try:
                value = params.views[name]
            except KeyError:
                raise UnsupportedSchemaError(name) from None
            node = pnodes[name] = tape.leaf(value)
        return node

    for t, _ in cg.type_slices:
        if t not in params.types:
            raise UnsupportedSchemaError(f"node type {t!r} unseen in training")
    for key, _, _ in cg.relations:
        if key not in params.relations:
            raise UnsupportedSchemaError(f"relation {key!r} unseen in training")

    types = [t for t, _ in cg.type_slices]
    slices = [sl for _, sl in cg.type_slices]
    x = tape.leaf(cg.x, requires_grad=input_grad)

    def typed(inp: Node, prefix: str) -> Node:
        Ws = [P(f"{prefix}/{t}/W") for t in types]
        bs = [P(f"{prefix}/{t}/b") for t in types]
        if fused:
            return tape.typed_affine(inp, slices, Ws, bs, relu=use_relu)
        return tape.concat_rows([act(tape.add_bias(tape.matmul(tape.rows(inp, sl), W), b))
                                 for sl, W, b in zip(slices, Ws, bs)])

    H = typed(x, "proj")
    states = [H]
    n = len(cg.node_ids)
    for layer in range(1, cfg.layers + 1):
        Ws = [P(f"layer{layer}/msg/{key}/W") for key, _, _ in cg.relations]
        gates = [P(f"layer{layer}/gate/{key}") for key, _, _ in cg.relations]
        if not cg.relations:
            agg = tape.constant(np.zeros((n, cfg.hidden)))
        elif fused:
            agg = tape.relational_mean(H, [(srcs, A) for _, srcs, A in cg.relations], Ws, gates, relu=use_relu,
                                       stacked=cg.stacked)
        else:
            agg = None
            for (key, srcs, A), W, gate in zip(cg.relations, Ws, gates):
                msg = act(tape.matmul(tape.rows(H, srcs), W))
                term = tape.scale_by_scalar(tape.matmul(tape.constant(A), msg), gate)
                agg = term if agg is None else tape.add(agg, term)
        H = typed(tape.concat_cols([H, agg]), f"layer{layer}/update")
        states.append(H)

    grid = cg.agent_grid
    B, k = grid.shape
    pair = tape.concat_cols([tape.rows(H, np.repeat(cg.query_rows, k)), tape.rows(H, grid.reshape(-1))])
    hidden = act(tape.add_bias(tape.matmul(pair, P("scorer/W1")), P("scorer/b1")))
    scores = tape.reshape(tape.add_bias(tape.matmul(hidden, P("scorer/W2")), P("scorer/b2")), (B, k))
    probs = tape.softmax_row(scores)
    return ForwardResult(tape, cg, x, states, scores, probs, pnodes)


def flat_gradient(result: ForwardResult, grads: Mapping[int, np.ndarray], params: ParamStore,
                  out: np.ndarray | None = None) -> np.ndarray:
    """Scatter per-parameter gradients into a flat vector aligned with ``params.flat``.

    When ``out`` is given the gradients are accumulated into it.
    """
    if out is None:
        out = np.zeros_like(params.flat)
    offsets = params.offsets()
    for name, node in result.param_nodes.items():
        a, b = offsets[name]
        out[a:b] += grads[node.index].reshape(-1)
    return out


def loss_and_grad(cg: CompiledGraph | PackedGraph, params: ParamStore, target: np.ndarray,
                  out: np.ndarray | None = None) -> tuple[float, np.ndarray, ForwardResult]:
    """KL(target || router) and its gradient w.r.t. the flat parameter vector.

    For a packed batch ``target`` has one row per graph and the loss is the
    mean KL over the batch.
    """
    res = forward(cg, params)
    loss = res.tape.kl_div(np.asarray(target).reshape(res.probs.shape), res.probs)
    grads = res.tape.backward(loss, wrt=list(res.param_nodes.values()))
    return float(loss.value[0, 0]), flat_gradient(res, grads, params, out), res


def predict_many(cgs: Sequence[CompiledGraph], params: ParamStore, batch: int = 32) -> list[RouteDistribution]:
    out = []
    for i in range(0, len(cgs), batch):
        chunk = cgs[i: i + batch]
        out += forward(pack_graphs(chunk) if len(chunk) > 1 else chunk[0], params).distributions()
    return out


def predict(cg: CompiledGraph, params: ParamStore, provenance: dict | None = None) -> RouteDistribution:
    return forward(cg, params).distribution(provenance)


