"""Branched bridge matching: per-branch drift and growth fields trained in four stages.

Modules
-------
diffcore     MLPs with hand-written backward passes, Adam and AdamW
geometry     LAND and RBF metrics, path energy, k-means, surface projection
data         point clouds, synthetic tasks, exact OT coupling, problem files
interpolant  endpoint-pinned neural interpolant (stage 1)
branchdyn    flow matching, Euler rollouts and the rollout losses (stages 2-4)
pipeline     configuration, stage driver, checkpoints
evaluate     Wasserstein and MMD distances, branched vs single-branch comparison
cli          command-line entry point
"""
from .data import BranchProblem, PointCloud, gen_bifurcation_2d, gen_terrain_3d, ot_couple
from .evaluate import MetricReport, compare, rbf_mmd, wasserstein
from .geometry import LandMetric, RbfMetric, path_energy, rbf_fit
from .pipeline import NetBundle, TrainConfig, checkpoint_load, checkpoint_save, run_stage, train

__version__ = "0.1.0"

__all__ = [
    "BranchProblem", "PointCloud", "gen_bifurcation_2d", "gen_terrain_3d", "ot_couple",
    "MetricReport", "compare", "rbf_mmd", "wasserstein",
    "LandMetric", "RbfMetric", "path_energy", "rbf_fit",
    "NetBundle", "TrainConfig", "checkpoint_load", "checkpoint_save", "run_stage", "train",
]
