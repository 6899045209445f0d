"""Router training: softened-F1 targets, KL objective, Adam, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import kl_divergence
from .hgnn import CompiledGraph, ModelConfig, ParamStore, loss_and_grad, pack_graphs, predict_many

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "kgroute-checkpoint"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    temperature: float = 0.1
    seed: int = 0
    patience: int = 20
    clip_norm: float = 5.0
    batch_size: int = 1  # graphs per Adam step, evaluated as one packed disjoint union

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        # lr == 0 is allowed: it is the null-optimizer check
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size/patience must be >= 1 and epochs >= 0")


# --- performance labels ---------------------------------------------------

class PerformanceRecord(dict):
    """query-id -> {agent-id -> F1 in [0, 1]}."""

    def __init__(self, data: Mapping[str, Mapping[str, float]] | None = None):
        super().__init__()
        self.flags: dict[tuple[str, str], str] = {}
        for q, row in (data or {}).items():
            for a, f1 in row.items():
                self.set(q, a, f1)

    def set(self, query_id: str, agent_id: str, f1: float, flag: str | None = None) -> None:
        f1 = float(f1)
        if not 0.0 <= f1 <= 1.0 or math.isnan(f1):
            raise ValueError(f"F1 out of range for ({query_id}, {agent_id}): {f1}")
        self.setdefault(query_id, {})[agent_id] = f1
        if flag:
            self.flags[(query_id, agent_id)] = flag

    def vector(self, query_id: str, agent_ids: Sequence[str]) -> np.ndarray:
        row = self.get(query_id)
        if row is None:
            raise KeyError(f"no performance labels for query {query_id}")
        missing = [a for a in agent_ids if a not in row]
        if missing:
            raise KeyError(f"query {query_id} lacks labels for agents {missing[:3]}...")
        return np.array([row[a] for a in agent_ids])

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for q in sorted(self):
                for a in sorted(self[q]):
                    rec = {"query_id": q, "agent_id": a, "f1": self[q][a]}
                    if (q, a) in self.flags:
                        rec["flag"] = self.flags[(q, a)]
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "PerformanceRecord":
        rec = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    rec.set(d["query_id"], d["agent_id"], d["f1"], d.get("flag"))
        return rec


def target_distribution(f1, temperature: float) -> np.ndarray:
    """softmax(F1 / T)."""
    f1 = np.asarray(f1, dtype=np.float64).reshape(-1)
    if f1.size == 0:
        raise ValueError("empty F1 vector")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if np.any((f1 < 0) | (f1 > 1)):
        raise ValueError("F1 entries must lie in [0, 1]")
    z = f1 / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def clip_by_norm(g: np.ndarray, max_norm: float) -> float:
    norm = float(np.sqrt(np.dot(g, g)))
    if max_norm > 0 and norm > max_norm:
        g *= max_norm / norm
    return norm


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig,
              scratch: np.ndarray | None = None) -> None:
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    state.m *= b1
    state.m += (1 - b1) * grad
    state.v *= b2
    np.square(grad, out=grad)
    grad *= 1 - b2
    state.v += grad
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    denom = scratch if scratch is not None else np.empty_like(params)
    np.divide(state.v, c2, out=denom)
    np.sqrt(denom, out=denom)
    denom += cfg.eps
    np.divide(state.m, denom, out=denom)
    denom *= cfg.lr / c1
    params -= denom


# --- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ParamStore
    train_config: TrainConfig
    epoch: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None
    best_flat: np.ndarray | None = None
    best_val: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0
    history: list[dict] = field(default_factory=list)
    stopped: bool = False

    def best_params(self) -> ParamStore:
        p = self.params.copy()
        if self.best_flat is not None:
            p.flat[...] = self.best_flat
        return p

    def checkpoint_id(self) -> str:
        return hashlib.sha256(self.params.flat.astype("<f8").tobytes()).hexdigest()[:12]


def _write_array(path: Path, arr: np.ndarray) -> dict:
    raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(raw)
    return {"file": path.name, "size": int(arr.size), "dtype": "<f8", "sha256": hashlib.sha256(raw).hexdigest()}


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Directory container: ``manifest.json`` plus raw little-endian float64 arrays."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"params": _write_array(d / "params.f64", ckpt.params.flat)}
    if ckpt.adam is not None:
        arrays["adam_m"] = _write_array(d / "adam_m.f64", ckpt.adam.m)
        arrays["adam_v"] = _write_array(d / "adam_v.f64", ckpt.adam.v)
    if ckpt.best_flat is not None:
        arrays["best_params"] = _write_array(d / "best_params.f64", ckpt.best_flat)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": ckpt.params.manifest(),
        "train_config": asdict(ckpt.train_config),
        "epoch": ckpt.epoch,
        "adam_step": ckpt.adam.step if ckpt.adam else 0,
        "rng_state": ckpt.rng_state,
        "best_val": None if math.isinf(ckpt.best_val) else ckpt.best_val,
        "best_epoch": ckpt.best_epoch,
        "bad_epochs": ckpt.bad_epochs,
        "stopped": ckpt.stopped,
        "history": ckpt.history,
        "arrays": arrays,
    }
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, d / "manifest.json")
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest in {d}")
    man = json.loads(mpath.read_text(encoding="utf-8"))
    if man.get("format") != CHECKPOINT_FORMAT or man.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format/version in {d}")
    model = man["model"]
    cfg = ModelConfig(**model["config"])
    store = ParamStore.zeros(cfg, model["relations"], model["types"])
    expected = [(a["name"], tuple(a["shape"]), a["offset"]) for a in model["arrays"]]
    if expected != store.layout or model["size"] != store.size():
        raise CheckpointError("manifest shapes do not match the parameter layout")

    def read(key: str) -> np.ndarray | None:
        meta = man["arrays"].get(key)
        if meta is None:
            return None
        raw = (d / meta["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != meta["sha256"] or len(raw) != 8 * meta["size"]:
            raise CheckpointError(f"array {key} is corrupt or truncated")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    store.flat[...] = read("params")
    m, v = read("adam_m"), read("adam_v")
    adam = AdamState(m, v, man["adam_step"]) if m is not None else None
    return Checkpoint(
        params=store,
        train_config=TrainConfig(**man["train_config"]),
        epoch=man["epoch"],
        adam=adam,
        rng_state=man["rng_state"],
        best_flat=read("best_params"),
        best_val=math.inf if man["best_val"] is None else man["best_val"],
        best_epoch=man["best_epoch"],
        bad_epochs=man["bad_epochs"],
        history=man["history"],
        stopped=man.get("stopped", False),
    )


# --- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    best: ParamStore
    last: Checkpoint
    history: list[dict]
    wall_times: list[float]


def _targets(dataset: Sequence[CompiledGraph], perf: PerformanceRecord, T: float) -> list[np.ndarray]:
    out = []
    for cg in dataset:
        g = cg.graph
        out.append(target_distribution(perf.vector(g.query_id, g.agent_ids), T))
    return out


def evaluate_router(params: ParamStore, dataset: Sequence[CompiledGraph], perf: PerformanceRecord,
                    temperature: float) -> dict:
    """Mean KL to the softened targets, top-1 agreement, and expected F1 of the routed pool."""
    if not dataset:
        return {"kl": float("nan"), "top1": float("nan"), "expected_f1": float("nan"), "n": 0}
    kls, agree, exp_f1 = [], [], []
    for cg, dist in zip(dataset, predict_many(dataset, params)):
        g = cg.graph
        f1 = perf.vector(g.query_id, g.agent_ids)
        target = target_distribution(f1, temperature)
        p = dist.probs
        kls.append(kl_divergence(target, p))
        agree.append(int(np.argmax(p) == np.argmax(target)))
        exp_f1.append(float(p @ f1))
    return {"kl": float(np.mean(kls)), "top1": float(np.mean(agree)),
            "expected_f1": float(np.mean(exp_f1)), "n": len(dataset)}


def train(dataset: Sequence[CompiledGraph], perf: PerformanceRecord, params: ParamStore,
          config: TrainConfig, val: Sequence[CompiledGraph] | None = None,
          resume: Checkpoint | None = None, stop_after: int | None = None,
          on_epoch: Callable[[dict, Checkpoint], None] | None = None) -> TrainResult:
    """Minimise mean KL(p* || p_theta) over ``dataset``.

    Early stopping monitors validation KL (training KL when ``val`` is empty).
    ``stop_after`` halts after that many total epochs without marking the run
    finished, which is how interrupted runs are produced for resume tests.
    """
    if resume is not None:
        ckpt = resume
        params = ckpt.params
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
    else:
        params = params.copy()
        rng = np.random.default_rng(config.seed)
        ckpt = Checkpoint(params=params, train_config=config, adam=AdamState.zeros(params.size()))
    if ckpt.adam is None:
        ckpt.adam = AdamState.zeros(params.size())

    targets = _targets(dataset, perf, config.temperature)
    val = list(val or [])
    val_targets = _targets(val, perf, config.temperature)
    grad = np.empty_like(params.flat)
    scratch = np.empty_like(params.flat)
    wall = []

    while not ckpt.stopped and ckpt.epoch < config.epochs:
        if stop_after is not None and ckpt.epoch >= stop_after:
            break
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start: start + config.batch_size]
            graphs = [dataset[i] for i in batch]
            unit = graphs[0] if len(graphs) == 1 else pack_graphs(graphs)
            tgt = np.stack([targets[i] for i in batch])
            grad[...] = 0.0
            loss, _, res = loss_and_grad(unit, params, tgt, out=grad)
            if not math.isfinite(loss):
                bad = next((g.graph.query_id for g, row, t in zip(graphs, res.probs.value, tgt)
                            if not math.isfinite(kl_divergence(t, row))), graphs[0].graph.query_id)
                raise DivergenceError(f"non-finite loss on query {bad}")
            losses.append(loss * len(batch))
            if not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite gradient in batch starting at query {graphs[0].graph.query_id}")
            clip_by_norm(grad, config.clip_norm)
            adam_step(params.flat, grad, ckpt.adam, config, scratch)
        ckpt.epoch += 1

        train_kl = float(np.sum(losses) / len(order)) if losses else float("nan")
        if val:
            vk, vt = [], []
            for dist, tgt in zip(predict_many(val, params), val_targets):
                vk.append(kl_divergence(tgt, dist.probs))
                vt.append(int(np.argmax(dist.probs) == np.argmax(tgt)))
            monitor, val_top1 = float(np.mean(vk)), float(np.mean(vt))
        else:
            monitor, val_top1 = train_kl, float("nan")
        if not math.isfinite(monitor):
            raise DivergenceError(f"non-finite monitored KL at epoch {ckpt.epoch}")
        if monitor < ckpt.best_val:
            ckpt.best_val, ckpt.best_epoch, ckpt.bad_epochs = monitor, ckpt.epoch, 0
            ckpt.best_flat = params.flat.copy()
        else:
            ckpt.bad_epochs += 1
            if ckpt.bad_epochs >= config.patience:
                ckpt.stopped = True
        record = {"epoch": ckpt.epoch, "train_kl": train_kl, "val_kl": monitor if val else None,
                  "val_top1": val_top1 if val else None, "best_val_kl": ckpt.best_val}
        ckpt.history.append(record)
        ckpt.rng_state = rng.bit_generator.state
        wall.append(time.perf_counter() - t0)
        logger.info("epoch %d train_kl=%.5f monitor=%.5f (%.1fs)", ckpt.epoch, train_kl, monitor, wall[-1])
        if on_epoch:
            on_epoch(dict(record, wall_time=wall[-1]), ckpt)

    if ckpt.rng_state is None:
        ckpt.rng_state = rng.bit_generator.state
    best = ckpt.best_params()
    return TrainResult(best=best, last=ckpt, history=list(ckpt.history), wall_times=wall)


def config_from_dict(cls, data: Mapping | None):
    """Build a frozen config dataclass, rejecting unknown keys."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**data)


def split_by(items: Iterable, key: Callable) -> dict:
    out: dict = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out
