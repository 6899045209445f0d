"""Command-line entry point: ``kgroute <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error (including a
missing upstream artifact), 4 compute error (divergence, failed gradient
check, unreachable backend).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline
from .agents import AgentConfigError, LLMError
from .config import ConfigError, RunConfig, load_config, with_section
from .embed import EmbeddingError
from .graph import GraphError
from .hgnn import UnsupportedSchemaError
from .train import CheckpointError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_COMPUTE = 0, 2, 3, 4

logger = logging.getLogger("kgroute")


class ComputeError(RuntimeError):
    pass


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = _parse_set(args.set or [])
    flags = {
        "seed": args.seed,
        "jobs": args.jobs,
        "run_root": args.run_root,
        "retrieval.tau": args.tau,
        "vote.k": args.topk,
        "train.temperature": args.temperature,
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return load_config(args.config, overrides)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=1, default=str))


# --- subcommands -------------------------------------------------------------------

def cmd_simulate(ws, args):
    out = pipeline.stage_simulate(ws)
    if args.all:
        pipeline.stage_train(ws)
        out["eval"] = pipeline.stage_eval(ws)
    return out


def cmd_ingest(ws, args):
    return pipeline.stage_ingest(ws, Path(args.source), Path(args.pool) if args.pool else None)


def cmd_label(ws, args):
    return pipeline.stage_label(ws)


def cmd_train(ws, args):
    res = pipeline.stage_train(ws, resume=args.resume, stop_after=args.stop_after)
    last = res.history[-1] if res.history else {}
    return {"epochs": len(res.history), "best_epoch": res.last.best_epoch, "last": last,
            "checkpoint": str(ws.checkpoint_dir)}


def cmd_route(ws, args):
    routes = pipeline.stage_route(ws)
    return {"queries": len(routes), "routes": str(ws.file("routes.jsonl"))}


def cmd_retrieve(ws, args):
    return pipeline.stage_retrieve(ws)


def cmd_answer(ws, args):
    return pipeline.stage_answer(ws, args.context)


def cmd_vote(ws, args):
    return pipeline.stage_vote(ws)


def cmd_eval(ws, args):
    summary = pipeline.stage_eval(ws)
    print(ws.report("metrics.txt").read_text(encoding="utf-8"), end="")
    return summary


def cmd_gradcheck(ws, args):
    from .gradcheck import finite_diff_check, inject_adjoint_fault, reference_problem

    cg, params, target = reference_problem(args.problem_seed, nonlinearity=args.nonlinearity)

    def run():
        return finite_diff_check(params, cg, target, eps=args.eps, n_inputs=args.inputs, seed=args.problem_seed,
                                 readout=args.readout)

    if args.inject_fault:
        with inject_adjoint_fault(args.inject_fault, args.fault_scale):
            report = run()
    else:
        report = run()
    print(report.summary())
    if not report.passed(args.tol):
        raise ComputeError(f"gradient check failed: max rel error {report.max_rel_error:.3e} >= {args.tol:g}")
    return {"max_rel_error": report.max_rel_error, "checked": report.checked, "seconds": round(report.seconds, 3)}


def cmd_sweep(ws, args):
    cfg = ws.cfg
    if args.grid == "k":
        ks = args.values or list(cfg.sweep.k)
        pipeline.run_all(ws)
        rows = pipeline.sweep_k(ws, ks)
        xs, ys = [r["k"] for r in rows], [r["f1"] for r in rows]
    else:
        values = args.values or list(getattr(cfg.sweep, args.grid))
        rows = []
        for v in values:
            sub = pipeline.Workspace(with_section(cfg, "model", **{args.grid: v}))
            summary = pipeline.run_all(sub)
            rows.append({args.grid: v, "f1": summary["router_f1"], "run": str(sub.root)})
        pipeline.write_jsonl(ws.report(f"sweep_{args.grid}.jsonl"), rows)
        xs, ys = values, [r["f1"] for r in rows]
    if args.plot:
        _plot(xs, ys, args.grid, Path(args.plot))
    return {"grid": args.grid, "rows": rows}


def _plot(xs, ys, label: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(label)
    ax.set_ylabel("F1 (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def cmd_config(ws, args):
    print(ws.cfg.snapshot(), end="")
    return None


COMMANDS = {
    "simulate": cmd_simulate, "ingest": cmd_ingest, "label": cmd_label, "train": cmd_train,
    "route": cmd_route, "retrieve": cmd_retrieve, "answer": cmd_answer, "vote": cmd_vote,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "sweep": cmd_sweep, "config": cmd_config,
}
# commands that do not touch the run directory
STATELESS = {"gradcheck", "config"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run configuration (flags override the config file)")
    g.add_argument("--config", "-c", help="YAML run config")
    g.add_argument("--seed", type=int)
    g.add_argument("--tau", type=float, help="retrieval salience threshold")
    g.add_argument("--topk", type=int, help="agents kept for voting")
    g.add_argument("--temperature", type=float, help="target-distribution temperature")
    g.add_argument("--jobs", type=int, help="worker cap for agent calls")
    g.add_argument("--run-root", help="parent of per-config run directories")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="any dotted config key, e.g. model.layers=3")
    g.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kgroute", description="Graph-guided routing over a pool of QA agents.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate and label the synthetic scenario")
    s.add_argument("--all", action="store_true", help="also train and evaluate")
    s = sub.add_parser("ingest", parents=[common], help="validate a corpus file into the run directory")
    s.add_argument("source")
    s.add_argument("--pool", help="agent pool JSON (defaults to the 24-agent grid)")
    sub.add_parser("label", parents=[common], help="run every agent on the full graphs; write F1 labels")
    s = sub.add_parser("train", parents=[common], help="train the router")
    s.add_argument("--resume", action="store_true")
    s.add_argument("--stop-after", type=int, help="stop after this many epochs (for interrupt tests)")
    sub.add_parser("route", parents=[common], help="write a routing distribution per test query")
    sub.add_parser("retrieve", parents=[common], help="salience dumps and pruned subgraphs")
    s = sub.add_parser("answer", parents=[common], help="run agents on full or retrieved graphs")
    s.add_argument("--context", choices=("full", "retrieved"), default="retrieved")
    sub.add_parser("vote", parents=[common], help="combine answers for every method")
    sub.add_parser("eval", parents=[common], help="metrics tables (runs missing downstream stages)")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the router gradients")
    s.add_argument("--problem-seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--inputs", type=int, default=32)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--readout", choices=("kl", "linear"), default="kl")
    s.add_argument("--nonlinearity", choices=("relu", "identity"), default="relu")
    s.add_argument("--inject-fault", metavar="OP", help="scale the adjoint of OP (e.g. matmul) to test detection")
    s.add_argument("--fault-scale", type=float, default=1.5)
    s = sub.add_parser("sweep", parents=[common], help="F1 over a k, layers or hidden grid")
    s.add_argument("grid", choices=("k", "layers", "hidden"))
    s.add_argument("--values", type=int, nargs="+")
    s.add_argument("--plot", help="write an F1 curve to this image file")
    sub.add_parser("config", parents=[common], help="print the resolved config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        ws = pipeline.Workspace(cfg)
        if args.command not in STATELESS:
            ws.ensure()
        out = COMMANDS[args.command](ws, args)
        if out is not None:
            _emit(out)
        return EXIT_OK
    except (ConfigError, AgentConfigError, UnsupportedSchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (pipeline.DataError, GraphError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ComputeError, DivergenceError, LLMError, EmbeddingError, FloatingPointError) as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
