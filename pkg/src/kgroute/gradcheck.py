"""Central finite-difference check of the router's analytic gradients.

Every scalar parameter and a sample of input-embedding coordinates is
perturbed by +/- eps. A coordinate is excluded when either perturbation flips
any ReLU mask: the loss is not differentiable across a kink and the
difference quotient there means nothing.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .autodiff import KL_EPS, Tape
from .graph import AgentSpec, ContextGraph, GraphNode, NodeKind, QueryInstance, RoutedGraph, extend_graph, ENTITY
from .hgnn import CompiledGraph, ModelConfig, ParamStore, compile_graph, forward, init_params, schema_of
from .train import target_distribution

# Relative error is |a - n| / max(|a|, |n|, REL_FLOOR). Below the floor the
# comparison is effectively absolute; central differences at eps=1e-6 carry
# ~1e-10 of round-off, far under floor * tolerance.
REL_FLOOR = 1e-4


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass(frozen=True)
class GradCheckEntry:
    location: str
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    n_params: int
    n_inputs: int
    checked: int
    excluded: list[str] = field(default_factory=list)
    worst: GradCheckEntry | None = None
    max_abs_error: float = 0.0
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return 0.0 if self.worst is None else self.worst.rel_error

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol

    def summary(self) -> str:
        w = self.worst
        where = "n/a" if w is None else f"{w.location} (analytic {w.analytic:.6e}, numeric {w.numeric:.6e})"
        return (f"checked {self.checked} coordinates ({self.n_params} params, {self.n_inputs} inputs), "
                f"excluded {len(self.excluded)} near a kink; max rel error {self.max_rel_error:.3e} at {where}; "
                f"max abs error {self.max_abs_error:.3e}; "
                f"{self.seconds:.2f}s")


READOUTS = ("kl", "linear")


def _loss(cg: CompiledGraph, params: ParamStore, target: np.ndarray, input_grad: bool = False,
          readout: str = "kl"):
    res = forward(cg, params, input_grad=input_grad)
    if readout == "linear":
        return res, res.tape.matmul(res.scores, res.tape.constant(target.reshape(-1, 1)))
    return res, res.tape.kl_div(target, res.probs)


class LossEvaluator:
    """Tape-free forward returning (KL loss, flattened ReLU mask vector).

    Same maths as ``hgnn.forward``; used for the difference quotients because
    it skips all recording overhead. Parameter views are resolved once, so
    in-place edits of ``params.flat`` are seen by later calls.
    """

    def __init__(self, cg: CompiledGraph, params: ParamStore, target: np.ndarray, readout: str = "kl"):
        if readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        self.readout = readout
        V = params.views
        self.cg = cg
        self.relu = params.config.nonlinearity == "relu"
        self.target = np.asarray(target, dtype=np.float64).reshape(1, -1)
        self.pos = self.target > 0
        self.log_target = np.log(self.target[self.pos])

        def typed(prefix):
            return [(sl, V[f"{prefix}/{t}/W"], V[f"{prefix}/{t}/b"]) for t, sl in cg.type_slices]

        self.proj = typed("proj")
        self.layers = [
            ([(srcs, A, V[f"layer{l}/msg/{key}/W"], V[f"layer{l}/gate/{key}"]) for key, srcs, A in cg.relations],
             typed(f"layer{l}/update"))
            for l in range(1, params.config.layers + 1)
        ]
        self.scorer = (V["scorer/W1"], V["scorer/b1"], V["scorer/W2"], V["scorer/b2"])

        self._base: list[dict] | None = None

    @staticmethod
    def locate(name: str, layers: int) -> tuple[int, str | None]:
        """(stage, part) a parameter lives in: stage 0 = input projection,
        l = message-passing layer l, layers+1 = scorer; part names the
        relation for message weights and gates, "update" for update weights."""
        parts = name.split("/")
        if parts[0] == "proj":
            return 0, None
        if parts[0].startswith("layer"):
            return int(parts[0][5:]), ("update" if parts[1] == "update" else parts[2])
        return layers + 1, None

    def _act(self, z: np.ndarray, masks: list[np.ndarray]) -> np.ndarray:
        if self.relu:
            m = z > 0
            masks.append(m.ravel())
            z[~m] = 0.0
        return z

    def _typed(self, inp, blocks, masks):
        return np.concatenate([self._act(inp[sl] @ W + b, masks) for sl, W, b in blocks], axis=0)

    def _term(self, h, rel, masks):
        srcs, A, W, gate = rel
        return gate[0, 0] * (A @ self._act(h[srcs] @ W, masks))

    def _scores(self, h, masks):
        cg = self.cg
        W1, b1, W2, b2 = self.scorer
        k = len(cg.agent_rows)
        pair = np.concatenate([np.repeat(h[[cg.query_row]], k, axis=0), h[cg.agent_rows]], axis=1)
        return (self._act(pair @ W1 + b1, masks) @ W2 + b2).reshape(1, -1)

    def _loss(self, s: np.ndarray) -> float:
        if self.readout == "linear":
            return float((s @ self.target.reshape(-1))[0])
        e = np.exp(s - s.max())
        q = np.maximum(e / e.sum(), KL_EPS)
        return float(np.sum(self.target[self.pos] * (self.log_target - np.log(q[self.pos]))))

    def __call__(self, x: np.ndarray | None = None, start: int = 0, part: str | None = None) -> tuple[float, np.ndarray]:
        """Loss and flattened ReLU mask vector.

        With ``start > 0`` everything upstream of (start, part) is reused from
        the pass cached by ``prime``, so only parameters located there may
        have changed since then.
        """
        if start == 0:
            return self._forward(self.cg.x if x is None else x, 0, [])
        if self._base is None:
            raise RuntimeError("prime() the evaluator before partial evaluation")
        base = self._base
        masks = [m for st in base[:start] for m in st["masks"]]
        if start > len(self.layers):
            return self._forward(base[start - 1]["h"], start, masks)
        st = base[start]
        rels, update = self.layers[start - 1]
        h_in = base[start - 1]["h"]
        if part == "update":
            masks += st["rel_masks"]
            agg = st["agg"]
        else:
            k = next(i for i, (key, _, _) in enumerate(self.cg.relations) if key == part)
            new: list[np.ndarray] = []
            terms = list(st["terms"])
            terms[k] = self._term(h_in, rels[k], new)
            rel_masks = list(st["rel_masks"])
            if self.relu:
                rel_masks[k] = new[0]
            masks += rel_masks
            agg = np.zeros_like(h_in)
            for t in terms:
                agg += t
        h = self._typed(np.concatenate([h_in, agg], axis=1), update, masks)
        return self._forward(h, start + 1, masks)

    def _forward(self, h, start, masks):
        for i in range(start, len(self.layers) + 1):
            if i == 0:
                h = self._typed(h, self.proj, masks)
                continue
            rels, update = self.layers[i - 1]
            agg = np.zeros_like(h)
            for rel in rels:
                agg += self._term(h, rel, masks)
            h = self._typed(np.concatenate([h, agg], axis=1), update, masks)
        loss = self._loss(self._scores(h, masks))
        return loss, (np.concatenate(masks) if masks else np.zeros(0, dtype=bool))

    def prime(self) -> tuple[float, np.ndarray]:
        """Full pass at the current parameters; caches every intermediate."""
        base: list[dict] = []
        masks: list[np.ndarray] = []
        h = self._typed(self.cg.x, self.proj, masks)
        base.append({"h": h, "masks": masks})
        for rels, update in self.layers:
            rel_masks: list[np.ndarray] = []
            terms = [self._term(h, rel, rel_masks) for rel in rels]
            agg = np.zeros_like(h)
            for t in terms:
                agg += t
            upd: list[np.ndarray] = []
            h = self._typed(np.concatenate([h, agg], axis=1), update, upd)
            base.append({"h": h, "terms": terms, "agg": agg, "rel_masks": rel_masks, "masks": rel_masks + upd})
        sm: list[np.ndarray] = []
        loss = self._loss(self._scores(h, sm))
        base.append({"masks": sm})
        self._base = base
        flat = [m for st in base for m in st["masks"]]
        return loss, (np.concatenate(flat) if flat else np.zeros(0, dtype=bool))


def analytic_gradients(cg: CompiledGraph, params: ParamStore, target: np.ndarray,
                       readout: str = "kl") -> tuple[np.ndarray, np.ndarray]:
    """(flat parameter gradient, input-embedding gradient)."""
    res, loss = _loss(cg, params, target, input_grad=True, readout=readout)
    wrt = list(res.param_nodes.values()) + [res.x]
    grads = res.tape.backward(loss, wrt=wrt)
    flat = np.zeros_like(params.flat)
    offsets = params.offsets()
    for name, node in res.param_nodes.items():
        a, b = offsets[name]
        flat[a:b] = grads[node.index].reshape(-1)
    return flat, grads[res.x.index]


def finite_diff_check(params: ParamStore, cg: CompiledGraph, target, eps: float = 1e-6,
                      n_inputs: int = 32, seed: int = 0, readout: str = "kl") -> GradCheckReport:
    """Compare analytic gradients with central differences; report the worst coordinate.

    ``readout="kl"`` checks the training loss KL(target || router). ``"linear"``
    replaces it by ``scores @ target`` (any weight vector); with the identity
    nonlinearity the loss is then linear in every single coordinate and the
    difference quotients are exact up to round-off.
    """
    t0 = time.perf_counter()
    target = np.asarray(target, dtype=np.float64).reshape(1, -1)
    g_param, g_x = analytic_gradients(cg, params, target, readout)
    work = params.copy()
    evaluate = LossEvaluator(cg, work, target, readout)
    _, base_masks = evaluate.prime()

    rng = np.random.default_rng(seed)
    n, d = cg.x.shape
    picks = rng.choice(n * d, size=min(n_inputs, n * d), replace=False)
    report = GradCheckReport(params.size(), len(picks), 0)
    worst, worst_at = -1.0, None
    excluded: list[int] = []

    def visit(at: int, analytic: float, plus, minus):
        nonlocal worst, worst_at
        (lp, mp), (lm, mm) = plus, minus
        if not (np.array_equal(base_masks, mp) and np.array_equal(base_masks, mm)):
            excluded.append(at)
            return
        numeric = (lp - lm) / (2 * eps)
        err = rel_error(analytic, numeric)
        report.checked += 1
        report.max_abs_error = max(report.max_abs_error, abs(analytic - numeric))
        if err > worst:
            worst, worst_at = err, (at, float(analytic), float(numeric))

    flat = work.flat
    for name, (a, b) in params.offsets().items():
        st, part = LossEvaluator.locate(name, params.config.layers)
        for i in range(a, b):
            orig = flat[i]
            flat[i] = orig + eps
            plus = evaluate(start=st, part=part)
            flat[i] = orig - eps
            minus = evaluate(start=st, part=part)
            flat[i] = orig
            visit(i, g_param[i], plus, minus)

    for k, flat_idx in enumerate(picks):
        r, c = divmod(int(flat_idx), d)
        x = cg.x.copy()
        x[r, c] += eps
        plus = evaluate(x)
        x[r, c] -= 2 * eps
        minus = evaluate(x)
        visit(flat.size + k, g_x[r, c], plus, minus)

    bounds = sorted((a, b, name) for name, (a, b) in params.offsets().items())

    def where(at: int) -> str:
        if at >= flat.size:
            r, c = divmod(int(picks[at - flat.size]), d)
            return f"input {cg.node_ids[r]}[{c}]"
        for a, b, name in bounds:
            if a <= at < b:
                return f"param {name}[{at - a}]"
        raise AssertionError(at)

    report.excluded = [where(at) for at in excluded]
    if worst_at is not None:
        at, a, nmr = worst_at
        report.worst = GradCheckEntry(where(at), a, nmr, worst)
    report.seconds = time.perf_counter() - t0
    return report


# --- reference problem ---------------------------------------------------------

def random_routed_graph(seed: int = 0, n_entities: int = 7, n_agents: int = 4, n_relations: int = 3) -> RoutedGraph:
    """A connected random graph: entities + one query + agents (12 nodes by default).

    ``n_relations`` domain labels are used, each at least once.
    """
    rng = np.random.default_rng(seed)
    labels = [f"rel{i}" for i in range(n_relations)]
    ids = [f"e{i}" for i in range(n_entities)]
    kinds = ["thing", "attribute"]
    nodes = tuple(GraphNode(e, NodeKind(ENTITY, kinds[i % 2]), f"entity {e}") for i, e in enumerate(ids))
    edges = set()
    for i in range(1, n_entities):  # spanning tree keeps it connected
        j = int(rng.integers(0, i))
        edges.add((ids[j], labels[i % n_relations], ids[i]))
    for _ in range(n_entities):
        a, b = rng.choice(n_entities, 2, replace=False)
        edges.add((ids[a], labels[int(rng.integers(n_relations))], ids[b]))
    ctx = ContextGraph(nodes, tuple(sorted(edges)), f"random-{seed}")
    q = QueryInstance(f"random-{seed}", "random query", frozenset(), ctx,
                      mentions=tuple(sorted(rng.choice(ids, 2, replace=False).tolist())))
    strategies = ("raw", "cot", "sc", "mad", "react_reflect", "summary")
    pool = [AgentSpec("b", strategies[i]) for i in range(n_agents)]
    return extend_graph(q, pool)


def reference_problem(seed: int = 0, input_dim: int = 8, hidden: int = 16, layers: int = 2,
                      nonlinearity: str = "relu") -> tuple[CompiledGraph, ParamStore, np.ndarray]:
    """Random graph, parameters nudged off zero (biases and gates random), random target."""
    g = random_routed_graph(seed)
    rng = np.random.default_rng(seed + 1)
    emb = {n.id: rng.normal(size=input_dim) for n in g.nodes}
    cg = compile_graph(g, emb)
    rels, types = schema_of([g])
    cfg = ModelConfig(layers=layers, hidden=hidden, input_dim=input_dim, nonlinearity=nonlinearity,
                      strict_grid=False)
    params = init_params(cfg, rels, types, seed)
    for name, _, _ in params.layout:
        v = params.views[name]
        if "/gate/" in name:
            v[...] = rng.uniform(0.5, 1.5, size=v.shape)
        elif name.endswith("/b") or name in ("scorer/b1", "scorer/b2"):
            v[...] = rng.normal(scale=0.1, size=v.shape)
    target = target_distribution(rng.uniform(size=len(g.agent_nodes)), 0.5).reshape(1, -1)
    return cg, params, target


@contextmanager
def inject_adjoint_fault(op: str, scale: float = 1.5):
    """Scale every adjoint of ``op`` by ``scale`` while active (mutation testing)."""
    original = Tape._push

    def faulty(self, name, value, parents, adjoint):
        if name == op and adjoint is not None:
            inner = adjoint

            def adjoint(g):
                return tuple(None if x is None else x * scale for x in inner(g))

        return original(self, name, value, parents, adjoint)

    Tape._push = faulty
    try:
        yield
    finally:
        Tape._push = original
