import json

import numpy as np
import pytest

from branchbridge.branchdyn import flow_loss
from branchbridge.data import BranchProblem, PointCloud, gen_bifurcation_2d
from branchbridge.interpolant import stratified_times
from branchbridge.pipeline import (
    CheckpointError,
    NetBundle,
    NumericalError,
    StageOrderError,
    TrainConfig,
    build_metric,
    checkpoint_load,
    checkpoint_save,
    run_stage,
    single_branch_problem,
    substream,
    train,
    write_curve_csv,
)


def tiny_problem(n=40, seed=0):
    b = gen_bifurcation_2d(n, seed=seed, n_anchor=200)
    return BranchProblem(b.source, b.targets, [0.5, 0.5], metric_data=b.anchors, seed=seed).couple()


def tiny_config(**kw):
    base = dict(d=2, K=1, hidden_dim=8, batch=16, stage_epochs=[2, 2, 2, 2], n_steps=5, n_t=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# --- config -------------------------------------------------------------------


def test_config_defaults():
    c = TrainConfig()
    assert (c.batch, c.epochs, c.patience) == (128, 100, 10)
    assert (c.lr_interp, c.lr_flow, c.lr_growth, c.weight_decay) == (1e-4, 1e-3, 1e-3, 1e-5)
    assert (c.lambda_energy, c.lambda_mass, c.lambda_match, c.lambda_recons, c.lambda_growth) == (1.0, 100.0, 1e3, 1.0, 0.01)
    assert (c.n_steps, c.sigma) == (100, 0.0)
    assert c.metric == {"kind": "land", "sigma": 0.125, "eps": 1e-3}


@pytest.mark.parametrize("d, hidden", [(2, 64), (3, 64), (30, 1024), (50, 1024)])
def test_hidden_width_by_dimension(d, hidden):
    assert TrainConfig(d=d).hidden_dim == hidden


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda_mass=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_flow=0.0)
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"d": 2, "lamda_mass": 3.0})


def test_config_json_round_trip(tmp_path):
    c = tiny_config(lambda_recons=2.5)
    p = tmp_path / "c.json"
    p.write_text(json.dumps(c.to_dict()))
    assert TrainConfig.from_json(p) == c
    assert c.epochs_for(3) == 2 and TrainConfig(epochs=7).epochs_for(4) == 7


def test_substreams_are_independent_and_reproducible():
    a = substream(1, "batch", 2).random(4)
    assert np.array_equal(a, substream(1, "batch", 2).random(4))
    assert not np.array_equal(a, substream(1, "batch", 3).random(4))
    assert not np.array_equal(a, substream(1, "eval", 2).random(4))


def test_build_metric_kinds():
    p = tiny_problem()
    land = build_metric(p, tiny_config())
    assert land.anchors.shape == p.metric_data.points.shape
    rbf = build_metric(p, tiny_config(metric={"kind": "rbf", "n_centers": 5, "kappa": 1.0}))
    assert rbf.centers.shape == (5, 2)
    with pytest.raises(ValueError):
        build_metric(p, tiny_config(metric={"kind": "nope"}))


# --- stages ---------------------------------------------------------------------


def test_stage_order_guard():
    p, c = tiny_problem(), tiny_config()
    b = NetBundle.initialize(2, 1, c)
    m = build_metric(p, c)
    with pytest.raises(StageOrderError):
        run_stage(b, p, m, c, 3)
    with pytest.raises(StageOrderError):
        run_stage(b, p, m, c, 5)
    run_stage(b, p, m, c, 1)
    with pytest.raises(StageOrderError):
        run_stage(b, p, m, c, 1)


def test_full_run_emits_four_curves_and_freezes_flows(tmp_path):
    p, c = tiny_problem(), tiny_config()
    b, curves, m = train(p, c, stages=(1, 2))
    before = [[q.copy() for q in f.params] for f in b.flows]
    growth_before = [[q.copy() for q in g.params] for g in b.growths]
    curves.update(run_stage(b, p, m, c, 3))
    for f, ps in zip(b.flows, before):
        assert all(np.array_equal(x, y) for x, y in zip(f.params, ps))
        assert f.trainable is False
    assert any(not np.array_equal(x, y) for g, ps in zip(b.growths, growth_before) for x, y in zip(g.params, ps))
    curves.update(run_stage(b, p, m, c, 4))
    assert sorted(curves) == [1, 2, 3, 4] and all(curves[s] for s in curves)
    assert b.stage == 4 and all(f.trainable for f in b.flows)
    assert "recons" in curves[4][-1][3] and "recons" not in curves[3][-1][3]
    for s in curves:
        write_curve_csv(tmp_path / f"loss{s}.csv", s, curves[s])
    header = (tmp_path / "loss3.csv").read_text().splitlines()[0]
    assert header == "epoch,train_loss,val_loss,val_energy,val_growth_penalty,val_mass,val_match"


def test_stage4_continues_the_growth_optimizers():
    p, cfg = tiny_problem(), tiny_config(patience=100)
    b, _, metric = train(p, cfg, stages=(1, 2, 3))
    g_opt, f_opt = b.optimizers["growth_0"], b.optimizers["flow_0"]
    steps3 = g_opt.step_count
    run_stage(b, p, metric, cfg, 4)
    steps4 = 2 * int(np.ceil(len(p.train_src) / cfg.batch))
    assert b.optimizers["growth_0"] is g_opt and g_opt.step_count == steps3 + steps4
    # the flows switch objective, so their optimizer starts over
    assert b.optimizers["flow_0"] is not f_opt and b.optimizers["flow_0"].step_count == steps4


def test_zero_epochs_leaves_the_interpolant_unchanged():
    p, c = tiny_problem(), tiny_config(stage_epochs=[0, 1, 1, 1])
    b = NetBundle.initialize(2, 1, c)
    ref = [q.copy() for q in b.interpolant.params]
    run_stage(b, p, build_metric(p, c), c, 1)
    assert all(np.array_equal(x, y) for x, y in zip(b.interpolant.params, ref))


def test_training_is_deterministic():
    dicts = []
    for _ in range(2):
        b, _, _ = train(tiny_problem(), tiny_config())
        d = b.to_dict()
        d.pop("timings")
        dicts.append(json.dumps(d, sort_keys=True))
    assert dicts[0] == dicts[1]


def test_nan_loss_halts_with_stage_and_epoch():
    p, c = tiny_problem(), tiny_config()
    b = NetBundle.initialize(2, 1, c)
    b.interpolant.params[5][:] = np.nan
    with pytest.raises(NumericalError, match="stage 1, epoch 0"):
        run_stage(b, p, build_metric(p, c), c, 1)


def test_single_branch_flow_loss_equals_primary_branch_bitwise():
    # with silent secondaries, the branched flow loss of branch 0 is the K=0 loss
    p = tiny_problem()
    single = single_branch_problem(p)
    assert single.n_branches == 1 and len(single.targets[0]) == sum(len(t) for t in p.targets)
    assert np.array_equal(single.train_src, p.train_src)
    two, one = tiny_config(), tiny_config(K=0)
    b2, b1 = NetBundle.initialize(2, 1, two), NetBundle.initialize(2, 0, one)
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    t = [stratified_times(6, 4, np.random.default_rng(1))]
    a, _ = flow_loss(b2.flows[:1], b2.interpolant, [(x0, x1)], times=t)
    s, _ = flow_loss(b1.flows, b1.interpolant, [(x0, x1)], times=t)
    assert a == s


# --- checkpoints --------------------------------------------------------------------


def _probe(b):
    x = np.random.default_rng(5).normal(size=(7, 3))
    return [n.forward(x if n.input_dim == 3 else np.hstack([x, x[:, :2]])) for _, n in b.nets()]


def test_checkpoint_round_trip(tmp_path):
    p, c = tiny_problem(), tiny_config()
    b, _, _ = train(p, c, stages=(1, 2))
    checkpoint_save(b, tmp_path / "ck.json")
    back = checkpoint_load(tmp_path / "ck.json", expect_d=2, expect_K=1)
    assert back.stage == 2
    assert all(np.array_equal(x, y) for x, y in zip(_probe(b), _probe(back)))
    assert sorted(back.optimizers) == sorted(b.optimizers)
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_rejects_corrupt_and_mismatched(tmp_path):
    b = NetBundle.initialize(2, 1, tiny_config())
    path = tmp_path / "ck.json"
    checkpoint_save(b, path)
    with pytest.raises(CheckpointError, match="d: expected 3"):
        checkpoint_load(path, expect_d=3)
    with pytest.raises(CheckpointError, match="K: expected 2"):
        checkpoint_load(path, expect_K=2)
    d = json.loads(path.read_text())
    d["version"] = 99
    path.write_text(json.dumps(d))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(path)
    path.write_text(path.read_text()[:100])
    with pytest.raises(CheckpointError):
        checkpoint_load(path)
    d = json.loads(json.dumps(b.to_dict()))
    d["flows"] = d["flows"][:1]
    path.write_text(json.dumps(d))
    with pytest.raises(CheckpointError):
        checkpoint_load(path)


def test_run_stage_rejects_mismatched_problem():
    c = tiny_config()
    b = NetBundle.initialize(2, 1, c)
    rng = np.random.default_rng(0)
    p = BranchProblem(PointCloud(rng.normal(size=(10, 2))), [PointCloud(rng.normal(size=(10, 2)))], [1.0]).couple()
    with pytest.raises(ValueError):
        run_stage(b, p, None, c, 1)
