"""Command-line entry point: gen-data, train, simulate and evaluate.

Exit codes: 0 success, 2 usage error, 3 data or shape error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .branchdyn import rollout, read_trajectory_csv
from .data import (
    BIFURCATION_METRIC, file_hash, gen_bifurcation_2d, gen_terrain_3d, load_problem, read_points_csv,
    save_problem_files,
)
from .diffcore import NonFiniteError, ShapeError
from .evaluate import endpoint_metrics, evaluate_samples
from .geometry import metric_from_dict, save_metric
from .pipeline import (
    CheckpointError,
    NumericalError,
    StageOrderError,
    TrainConfig,
    build_metric,
    checkpoint_load,
    checkpoint_save,
    run_stage,
    substream,
    write_curve_csv,
    NetBundle,
)

log = logging.getLogger("branchbridge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRICS = ("w1", "w2", "mmd")


class UsageError(Exception):
    pass


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)


def parse_stages(text):
    """``"1-4"``, ``"3"`` or ``"1,2"`` to a sorted contiguous tuple of stages."""
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-"))
            stages = list(range(lo, hi + 1))
        else:
            stages = sorted(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"cannot parse --stages {text!r}") from None
    if not stages or stages[0] < 1 or stages[-1] > 4 or stages != list(range(stages[0], stages[-1] + 1)):
        raise UsageError(f"--stages must be a contiguous range within 1..4, got {text!r}")
    return tuple(stages)


def parse_metrics(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METRICS]
    if bad or not names:
        raise UsageError(f"unknown metric(s) {bad or text!r}; choose from {','.join(METRICS)}")
    # evaluation order is fixed so the list order never changes values
    return tuple(m for m in METRICS if m in names)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    out = Path(args.out)
    if args.task == "terrain3d":
        data = gen_terrain_3d(n=args.n or 5000, seed=args.seed)
        weights = [0.5, 0.5]
        path = save_problem_files(out, data.source, data.targets, weights, args.seed, surface=data.surface, task=args.task)
    else:
        data = gen_bifurcation_2d(n_per_cluster=args.n or 1000, seed=args.seed)
        n = [len(t) for t in data.targets]
        weights = [c / sum(n) for c in n]
        path = save_problem_files(out, data.source, data.targets, weights, args.seed, metric_data=data.anchors,
                                  task=args.task, metric=BIFURCATION_METRIC)
    print(f"wrote {path}")
    return EXIT_OK


def _load_config(path, problem):
    if path:
        cfg = TrainConfig.from_json(path)
    else:
        # without a config file, the dataset's suggested metric replaces the default
        extra = {"metric": dict(problem.metric_spec)} if problem.metric_spec else {}
        cfg = TrainConfig(d=problem.dim, K=problem.n_branches - 1, **extra)
    if cfg.d != problem.dim or cfg.K != problem.n_branches - 1:
        raise ShapeError(f"config has d={cfg.d}, K={cfg.K} but problem has d={problem.dim}, K={problem.n_branches - 1}")
    return cfg


def cmd_train(args):
    stages = parse_stages(args.stages)
    problem = load_problem(args.problem)
    cfg = _load_config(args.config, problem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    first = stages[0]
    if first > 1:
        prev = Path(args.resume) if args.resume else out / f"checkpoint_stage{first - 1}.json"
        if not prev.exists():
            raise StageOrderError(f"starting at stage {first} needs {prev}, which does not exist")
        bundle = checkpoint_load(prev, expect_d=cfg.d, expect_K=cfg.K)
    else:
        bundle = NetBundle.initialize(cfg.d, cfg.K, cfg)
    t0 = time.perf_counter()
    metric = build_metric(problem, cfg)
    metric_time = time.perf_counter() - t0
    save_metric(metric, out / "metric.json")
    summary = {}
    for s in stages:
        curves = run_stage(bundle, problem, metric, cfg, s)
        write_curve_csv(out / f"loss_stage{s}.csv", s, curves[s])
        checkpoint_save(bundle, out / f"checkpoint_stage{s}.json")
        last = curves[s][-1] if curves[s] else None
        summary[str(s)] = {"epochs": len(curves[s]), "final_val": None if last is None else float(last[3] if s == 2 else last[2])}
        print(f"stage {s}: {summary[str(s)]['epochs']} epochs, final val loss {summary[str(s)]['final_val']}")
    manifest_path = Path(args.problem)
    with open(manifest_path) as f:
        problem_manifest = json.load(f)
    hashes = {name: file_hash(manifest_path.parent / name) for name in problem_manifest.get("hashes", {})}
    run = {
        "command": "train",
        "argv": sys.argv[1:],
        "problem": str(manifest_path),
        "config_path": args.config,
        "config": cfg.to_dict(),
        "dataset_hashes": hashes,
        "seed": cfg.seed,
        "stages": list(stages),
        "out": str(out),
        "timings": {"metric": metric_time, **{k: v for k, v in bundle.timings.items()}},
        "final_losses": summary,
    }
    # written last: its presence marks a complete run
    _write_json(out / "run_manifest.json", run)
    return EXIT_OK


def _metric_for(checkpoint, explicit):
    path = Path(explicit) if explicit else Path(checkpoint).parent / "metric.json"
    if not path.exists():
        if explicit:
            raise FileNotFoundError(f"metric file {path} not found")
        return None
    with open(path) as f:
        return metric_from_dict(json.load(f), base_dir=path.parent)


def cmd_simulate(args):
    bundle = checkpoint_load(args.checkpoint)
    if bundle.stage < 2:
        raise StageOrderError(f"checkpoint is at stage {bundle.stage}; simulation needs trained flows (stage >= 2)")
    x0 = read_points_csv(args.source)
    if x0.shape[1] != bundle.d:
        raise ShapeError(f"source has dimension {x0.shape[1]} but checkpoint expects {bundle.d}")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    metric = _metric_for(args.checkpoint, args.metric)
    growths = bundle.growths if bundle.stage >= 3 else None
    rng = substream(args.seed, "rollout")
    traj = rollout(bundle.flows, growths, x0, args.steps, args.sigma, rng, metric)
    traj.to_csv(args.out)
    print(f"wrote {len(x0)} rollouts x {bundle.n_branches} branches to {args.out}")
    return EXIT_OK


def cmd_evaluate(args):
    metrics = parse_metrics(args.metrics)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    traj = read_trajectory_csv(args.pred)
    problem = load_problem(args.truth, couple=False)
    if traj.states.shape[-1] != problem.dim:
        raise ShapeError(f"predictions have dimension {traj.states.shape[-1]} but truth has {problem.dim}")
    truth = np.vstack([t.points for t in problem.targets])
    pooled = evaluate_samples(traj.endpoints, traj.terminal_weights, truth, metrics, args.seeds, args.seed)
    report = {"pooled": pooled, "metrics": list(metrics), "seeds": args.seeds,
              "pred": args.pred, "truth": args.truth}
    if traj.states.shape[0] == problem.n_branches:
        learned = traj.terminal_weights.mean(axis=1)
        report["per_branch"] = {
            str(k): endpoint_metrics(traj.endpoints[k], problem.targets[k].points, metrics, args.seed)
            for k in range(problem.n_branches)
        }
        report["weight_errors"] = [float(abs(w - t)) for w, t in zip(learned, problem.target_weights)]
    if args.out:
        _write_json(args.out, report)
    for m in metrics:
        s = pooled[m]
        print(f"{m:>4s}  mean {s['mean']:.6f}" + (f"  sd {s['sd']:.6f}" if "sd" in s else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="branchbridge", description="Branched bridge matching: data, training, simulation, evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic problem")
    g.add_argument("--task", required=True, choices=["terrain3d", "bifurcation2d"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=None, help="points per distribution (terrain) or per cluster (bifurcation)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stages")
    t.add_argument("--problem", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--stages", default="1-4")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from (default: out/checkpoint_stage{n-1}.json)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("simulate", help="roll out a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--sigma", type=float, default=0.0)
    s.add_argument("--metric", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="distances between predictions and a problem's targets")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--metrics", default="w1,w2")
    e.add_argument("--seeds", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ShapeError, CheckpointError, StageOrderError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
