"""Branched vs single-branch transport on the synthetic 2D bifurcation.

Full settings take roughly 20 minutes on one core; ``--quick`` shrinks the
data and epoch counts to a one-minute smoke run.
"""
import argparse
import time

import numpy as np

from branchbridge.branchdyn import rollout
from branchbridge.data import BIFURCATION_METRIC, BranchProblem, gen_bifurcation_2d
from branchbridge.evaluate import compare
from branchbridge.pipeline import TrainConfig, build_metric, single_branch_problem, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    n, epochs = (200, [10, 20, 20, 3]) if args.quick else (1000, [100, 100, 200, 30])
    data = gen_bifurcation_2d(n, seed=args.seed)
    problem = BranchProblem(data.source, data.targets, [0.5, 0.5], metric_data=data.anchors, seed=args.seed).couple()
    cfg = TrainConfig(d=2, K=1, seed=args.seed, stage_epochs=epochs, metric=BIFURCATION_METRIC)
    metric = build_metric(problem, cfg)

    t0 = time.process_time()
    branched, curves, _ = train(problem, cfg, metric=metric)
    print(f"branched model trained in {time.process_time() - t0:.0f}s CPU")
    single, _, _ = train(single_branch_problem(problem), TrainConfig(**{**cfg.to_dict(), "K": 0}), metric=metric)

    traj = rollout(branched.flows, branched.growths, problem.source.points[problem.val_src], cfg.n_steps, metric=metric)
    w = traj.weights.mean(axis=2)
    for i in range(0, cfg.n_steps + 1, cfg.n_steps // 5):
        print(f"t={traj.times[i]:.1f}  w0={w[0, i]:.3f}  w1={w[1, i]:.3f}  sum={w[:, i].sum():.4f}")
    print("branch end means:", np.round(traj.endpoints.mean(axis=1), 3).tolist())
    print(compare(problem, branched, single, cfg, metric).table())


if __name__ == "__main__":
    main()
