"""Four-stage training driver, configuration and checkpoints."""
from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .branchdyn import LossWeights, ReconsTarget, branched_objective, flow_loss_branch, frozen_paths, make_flows, make_growths
from .data import BranchProblem, PointCloud
from .diffcore import Adam, AdamW, Mlp, NonFiniteError, optim_step
from .geometry import LandMetric, rbf_fit
from .interpolant import make_interpolant, stage1_loss, stratified_times

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "branchbridge-netbundle"
CHECKPOINT_VERSION = 1

# named random sub-streams; every draw in a run derives from (seed, stream, ...)
STREAMS = {"data": 0, "init": 1, "batch": 2, "rollout": 3, "eval": 4, "val": 5}


def substream(seed, name, *keys):
    return np.random.default_rng([int(seed), STREAMS[name], *[int(k) for k in keys]])


class StageOrderError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    d: int = 2
    K: int = 1
    batch: int = 128
    epochs: int = 100
    stage_epochs: Optional[list] = None
    patience: int = 10
    lr_interp: float = 1e-4
    lr_flow: float = 1e-3
    lr_growth: float = 1e-3
    weight_decay: float = 1e-5
    lambda_energy: float = 1.0
    lambda_mass: float = 100.0
    lambda_match: float = 1e3
    lambda_recons: float = 1.0
    lambda_growth: float = 0.01
    hidden_dim: Optional[int] = None
    n_steps: int = 100
    sigma: float = 0.0
    n_t: int = 8
    recons_neighbors: int = 1
    recons_eps: Optional[float] = None
    w_total: float = 1.0
    metric: dict = field(default_factory=lambda: {"kind": "land", "sigma": 0.125, "eps": 1e-3})
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_energy", "lambda_mass", "lambda_match", "lambda_recons", "lambda_growth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lr_interp", "lr_flow", "lr_growth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.hidden_dim is None:
            self.hidden_dim = 64 if self.d <= 3 else (1024 if self.d >= 30 else 256)

    @property
    def lambdas(self) -> LossWeights:
        return LossWeights(self.lambda_energy, self.lambda_match, self.lambda_mass, self.lambda_growth, self.lambda_recons)

    def epochs_for(self, stage) -> int:
        if self.stage_epochs is not None:
            return int(self.stage_epochs[stage - 1])
        return int(self.epochs)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_metric(problem: BranchProblem, config: TrainConfig):
    """State-cost metric from the problem's manifold data (all points if absent)."""
    spec = dict(config.metric)
    kind = spec.pop("kind", "land")
    if problem.metric_data is not None:
        data = problem.metric_data.points
    else:
        data = np.vstack([problem.source.points] + [t.points for t in problem.targets])
    if kind == "land":
        return LandMetric(data, spec.get("sigma", 0.125), spec.get("eps", 1e-3), spec.get("cutoff"))
    if kind == "rbf":
        return rbf_fit(data, spec["n_centers"], spec["kappa"], seed=spec.get("seed", config.seed), eps=spec.get("eps", 1e-3))
    raise ValueError(f"unknown metric kind {kind!r}")


@dataclass
class NetBundle:
    """Interpolant, per-branch flow and growth nets, optimizer states and stage marker."""

    d: int
    K: int
    hidden_dim: int
    interpolant: Mlp
    flows: list
    growths: list
    optimizers: dict = field(default_factory=dict)
    stage: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def n_branches(self) -> int:
        return self.K + 1

    @classmethod
    def initialize(cls, d, K, config: TrainConfig) -> "NetBundle":
        h = config.hidden_dim
        n = K + 1
        interp = make_interpolant(d, h, substream(config.seed, "init", 0))
        flows = make_flows(d, n, h, [substream(config.seed, "init", 1, k) for k in range(n)])
        growths = make_growths(d, n, h, [substream(config.seed, "init", 2, k) for k in range(n)])
        return cls(d, K, h, interp, flows, growths)

    def nets(self):
        yield "interpolant", self.interpolant
        for k, f in enumerate(self.flows):
            yield f"flow_{k}", f
        for k, g in enumerate(self.growths):
            yield f"growth_{k}", g

    # -- checkpoints ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "d": self.d,
            "K": self.K,
            "hidden_dim": self.hidden_dim,
            "stage": self.stage,
            "interpolant": self.interpolant.to_dict(),
            "flows": [f.to_dict() for f in self.flows],
            "growths": [g.to_dict() for g in self.growths],
            "optimizers": {k: o.to_dict() for k, o in sorted(self.optimizers.items())},
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, d: dict, expect_d=None, expect_K=None) -> "NetBundle":
        problems = []
        if d.get("format") != CHECKPOINT_FORMAT:
            problems.append(f"format: expected {CHECKPOINT_FORMAT!r}, found {d.get('format')!r}")
        if d.get("version") != CHECKPOINT_VERSION:
            problems.append(f"version: expected {CHECKPOINT_VERSION}, found {d.get('version')!r}")
        if expect_d is not None and d.get("d") != expect_d:
            problems.append(f"d: expected {expect_d}, found {d.get('d')!r}")
        if expect_K is not None and d.get("K") != expect_K:
            problems.append(f"K: expected {expect_K}, found {d.get('K')!r}")
        if problems:
            raise CheckpointError("; ".join(problems))
        try:
            dim, K = int(d["d"]), int(d["K"])
            interp = Mlp.from_dict(d["interpolant"])
            flows = [Mlp.from_dict(x) for x in d["flows"]]
            growths = [Mlp.from_dict(x) for x in d["growths"]]
            opts = {k: Adam.from_dict(v) for k, v in d.get("optimizers", {}).items()}
            stage = int(d["stage"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc
        if interp.input_dim != 2 * dim + 1 or interp.output_dim != dim:
            raise CheckpointError("interpolant dimensions do not match d")
        if len(flows) != K + 1 or len(growths) != K + 1:
            raise CheckpointError(f"expected {K + 1} flow and growth nets, found {len(flows)}/{len(growths)}")
        for net in flows + growths:
            if net.input_dim != dim + 1:
                raise CheckpointError("flow/growth input dimension does not match d + 1")
        if not 0 <= stage <= 4:
            raise CheckpointError(f"stage marker {stage} outside 0..4")
        return cls(dim, K, int(d["hidden_dim"]), interp, flows, growths, opts, stage, d.get("timings", {}))


def checkpoint_save(bundle: NetBundle, path):
    """Write the bundle JSON atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(bundle.to_dict(), f, sort_keys=True)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_load(path, expect_d=None, expect_K=None) -> NetBundle:
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise CheckpointError(f"{path}: top level is not an object")
    return NetBundle.from_dict(d, expect_d, expect_K)


# ---------------------------------------------------------------------------
# stage drivers


class _EarlyStop:
    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.snapshot = None

    def update(self, epoch, val, nets):
        if val < self.best:
            self.best, self.best_epoch = val, epoch
            self.snapshot = [[p.copy() for p in n.params] for n in nets]
        return epoch - self.best_epoch >= self.patience

    def restore(self, nets):
        if self.snapshot is not None:
            for n, ps in zip(nets, self.snapshot):
                n.params = [p.copy() for p in ps]


def _check(loss, stage, epoch):
    if not math.isfinite(loss):
        raise NumericalError(f"non-finite loss in stage {stage}, epoch {epoch}")


@contextlib.contextmanager
def _guard(stage, epoch):
    # non-finite values caught inside a backward pass get the same diagnostic
    try:
        yield
    except NonFiniteError as exc:
        raise NumericalError(f"non-finite loss in stage {stage}, epoch {epoch} ({exc})") from exc


def _stage1(bundle, problem, metric, cfg):
    net = bundle.interpolant
    opt = Adam(net.params, lr=cfg.lr_interp)
    bundle.optimizers = {**bundle.optimizers, "interpolant": opt}
    n_br = problem.n_branches
    rngs = [substream(cfg.seed, "batch", 1, k) for k in range(n_br)]
    vrng = substream(cfg.seed, "val", 1)
    val_batches = [_val_pairs(problem, k) for k in range(n_br)]
    val_times = [stratified_times(len(b[0]), cfg.n_t, vrng) for b in val_batches]
    n_pairs = max(len(problem.pairs(k)[0]) for k in range(n_br))
    steps = max(1, math.ceil(n_pairs / cfg.batch))
    stopper = _EarlyStop(cfg.patience)
    curve = []
    for epoch in range(cfg.epochs_for(1)):
        train = []
        for _ in range(steps):
            batches = []
            times = []
            for k in range(n_br):
                x0, x1 = _draw(problem, k, cfg.batch, rngs[k])
                batches.append((x0, x1))
                times.append(stratified_times(len(x0), cfg.n_t, rngs[k]))
            with _guard(1, epoch):
                loss, grads = stage1_loss(net, batches, metric, times=times)
            _check(loss, 1, epoch)
            optim_step(net, grads, opt)
            train.append(loss)
        val, _ = stage1_loss(net, val_batches, metric, times=val_times, need_grad=False)
        _check(val, 1, epoch)
        curve.append((epoch, float(np.mean(train)), val))
        if stopper.update(epoch, val, [net]):
            break
    stopper.restore([net])
    return curve


def _draw(problem, k, batch, rng):
    ia, ib = problem.pairs(k, "train")
    sel = rng.integers(len(ia), size=batch)
    return problem.source.points[ia[sel]], problem.targets[k].points[ib[sel]]


def _val_pairs(problem, k):
    ia, ib = problem.pairs(k, "val")
    if len(ia) == 0:
        ia, ib = problem.pairs(k, "train")
    return problem.source.points[ia], problem.targets[k].points[ib]


def train_flow_branch(flow, interpolant, problem, k, cfg):
    """Fit one branch's drift to the interpolant velocities; independent of other branches."""
    opt = AdamW(flow.params, lr=cfg.lr_flow, weight_decay=cfg.weight_decay)
    rng = substream(cfg.seed, "batch", 2, k)
    vx0, vx1 = _val_pairs(problem, k)
    vt = stratified_times(len(vx0), cfg.n_t, substream(cfg.seed, "val", 2, k))
    steps = max(1, math.ceil(len(problem.pairs(k)[0]) / cfg.batch))
    stopper = _EarlyStop(cfg.patience)
    curve = []
    for epoch in range(cfg.epochs_for(2)):
        train = []
        for _ in range(steps):
            x0, x1 = _draw(problem, k, cfg.batch, rng)
            t = stratified_times(len(x0), cfg.n_t, rng)
            with _guard(2, epoch):
                loss, grads = flow_loss_branch(flow, interpolant, x0, x1, t)
            _check(loss, 2, epoch)
            optim_step(flow, grads, opt)
            train.append(loss)
        val, _ = flow_loss_branch(flow, interpolant, vx0, vx1, vt, need_grad=False)
        _check(val, 2, epoch)
        curve.append((epoch, k, float(np.mean(train)), val))
        if stopper.update(epoch, val, [flow]):
            break
    stopper.restore([flow])
    return curve, opt


def _stage2(bundle, problem, metric, cfg):
    curve = []
    opts = dict(bundle.optimizers)
    for k, flow in enumerate(bundle.flows):
        flow.trainable = True
        c, opt = train_flow_branch(flow, bundle.interpolant, problem, k, cfg)
        curve.extend(c)
        opts[f"flow_{k}"] = opt
    bundle.optimizers = opts
    return curve


def recons_targets(problem, cfg):
    return [
        ReconsTarget(problem.target_split(k, "train"), cfg.recons_neighbors, cfg.recons_eps)
        for k in range(problem.n_branches)
    ]


def _rollout_stage(bundle, problem, metric, cfg, stage):
    joint = stage == 4
    for f in bundle.flows:
        f.trainable = joint
    opts = dict(bundle.optimizers)
    for k, g in enumerate(bundle.growths):
        # stage 4 continues the stage-3 growth optimizers; fresh moments jolt the weights
        if not (joint and f"growth_{k}" in opts):
            opts[f"growth_{k}"] = AdamW(g.params, lr=cfg.lr_growth, weight_decay=cfg.weight_decay)
    if joint:
        for k, f in enumerate(bundle.flows):
            opts[f"flow_{k}"] = AdamW(f.params, lr=cfg.lr_flow, weight_decay=cfg.weight_decay)
    bundle.optimizers = opts
    recons = recons_targets(problem, cfg) if joint else None
    lam = cfg.lambdas
    rng = substream(cfg.seed, "batch", stage)
    src = problem.source.points
    train_idx = problem.train_src
    val_x = src[problem.val_src] if len(problem.val_src) else src[train_idx]
    tw = problem.target_weights
    trained = bundle.growths + (bundle.flows if joint else [])
    stopper = _EarlyStop(cfg.patience)
    # frozen flows give fixed paths, so integrate them once per source
    cached = val_paths = None
    if not joint:
        xs, es = frozen_paths(bundle.flows, src[train_idx], cfg.n_steps, metric)
        slot = np.empty(len(src), dtype=np.intp)
        slot[train_idx] = np.arange(len(train_idx))
        cached = (xs, es, slot)
        val_paths = frozen_paths(bundle.flows, val_x, cfg.n_steps, metric)
    curve = []
    for epoch in range(cfg.epochs_for(stage)):
        order = rng.permutation(train_idx)
        train = []
        for s in range(0, len(order), cfg.batch):
            ids = order[s:s + cfg.batch]
            x0 = src[ids]
            paths = None
            if cached is not None:
                j = cached[2][ids]
                paths = (cached[0][:, :, j], cached[1][:, :, j])
            with _guard(stage, epoch):
                loss, parts, gf, gg = branched_objective(
                    bundle.flows, bundle.growths, x0, metric, tw, lam, cfg.n_steps,
                    recons=recons, flow_grads=joint, growth_grads=True, w_total=cfg.w_total, paths=paths,
                )
            _check(loss, stage, epoch)
            for k, g in enumerate(bundle.growths):
                optim_step(g, gg[k], opts[f"growth_{k}"])
            if joint:
                for k, f in enumerate(bundle.flows):
                    optim_step(f, gf[k], opts[f"flow_{k}"])
            train.append(loss)
        with _guard(stage, epoch):
            val, parts, _, _ = branched_objective(
                bundle.flows, bundle.growths, val_x, metric, tw, lam, cfg.n_steps,
                recons=recons, flow_grads=False, growth_grads=False, w_total=cfg.w_total, paths=val_paths,
            )
        _check(val, stage, epoch)
        curve.append((epoch, float(np.mean(train)), val, parts))
        if stopper.update(epoch, val, trained):
            break
    stopper.restore(trained)
    return curve


_STAGES = {1: _stage1, 2: _stage2, 3: lambda b, p, m, c: _rollout_stage(b, p, m, c, 3),
           4: lambda b, p, m, c: _rollout_stage(b, p, m, c, 4)}


def run_stage(bundle: NetBundle, problem: BranchProblem, metric, config: TrainConfig, stage: int):
    """Run one training stage in place; returns ``{stage: loss curve}``.

    Stage 1 fits the interpolant, stage 2 the flows, stage 3 the growths with
    the flows frozen, and stage 4 everything jointly with the reconstruction
    term. Stages must run in order.
    """
    if stage not in _STAGES:
        raise StageOrderError(f"unknown stage {stage}")
    if bundle.stage != stage - 1:
        raise StageOrderError(f"stage {stage} requires stage {stage - 1} to be complete (bundle is at stage {bundle.stage})")
    if problem.n_branches != bundle.n_branches or problem.dim != bundle.d:
        raise ValueError("problem and bundle disagree on branch count or dimension")
    if not problem.couplings:
        problem.couple()
    t0 = time.perf_counter()
    curve = _STAGES[stage](bundle, problem, metric, config)
    bundle.timings[str(stage)] = time.perf_counter() - t0
    bundle.stage = stage
    log.info("stage %d done in %.1fs (%d epochs)", stage, bundle.timings[str(stage)], len(curve))
    return {stage: curve}


def train(problem, config: TrainConfig, stages=(1, 2, 3, 4), bundle=None, metric=None):
    """Run ``stages`` in order from a fresh (or given) bundle; returns (bundle, curves, metric)."""
    if not problem.couplings:
        problem.couple()
    bundle = bundle or NetBundle.initialize(problem.dim, problem.n_branches - 1, config)
    metric = metric if metric is not None else build_metric(problem, config)
    curves = {}
    for s in stages:
        curves.update(run_stage(bundle, problem, metric, config, s))
    return bundle, curves, metric


def single_branch_problem(problem: BranchProblem) -> BranchProblem:
    """Same source and split, with every target pooled into one unclustered branch."""
    union = PointCloud(np.vstack([t.points for t in problem.targets]), 1.0)
    single = BranchProblem(
        problem.source, [union], [problem.w_total], metric_data=problem.metric_data, seed=problem.seed,
        train_src=problem.train_src, val_src=problem.val_src, w_total=problem.w_total, metric_spec=problem.metric_spec,
    )
    return single.couple()


def write_curve_csv(path, stage, curve):
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if stage == 2:
            w.writerow(["epoch", "branch", "train_loss", "val_loss"])
            for row in curve:
                w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
        else:
            extra = sorted(curve[0][3]) if curve and len(curve[0]) > 3 else []
            w.writerow(["epoch", "train_loss", "val_loss"] + [f"val_{e}" for e in extra])
            for row in curve:
                w.writerow([row[0], repr(row[1]), repr(row[2])] + [repr(row[3][e]) for e in extra])
