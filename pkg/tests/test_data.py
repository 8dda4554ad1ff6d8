import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from branchbridge.data import (
    TERRAIN_SOURCE,
    TERRAIN_TARGETS,
    BranchProblem,
    PointCloud,
    assignment,
    coupling_cost,
    equalize,
    gen_bifurcation_2d,
    gen_gaussian_mixture,
    gen_terrain_3d,
    load_problem,
    ot_couple,
    read_cloud_csv,
    sample_batch,
    save_problem_files,
    split_endpoints,
    sqeuclidean_cost,
)
from branchbridge.geometry import kmeans


def brute_force_min(cost):
    n = len(cost)
    return min(cost[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n)))


# --- generators -------------------------------------------------------------


def test_mixture_degenerate_sigma_gives_the_mean():
    c = gen_gaussian_mixture([(1.0, -2.0, 3.0)], 0.0, 50, seed=1)
    assert np.all(c.points == np.array([1.0, -2.0, 3.0]))


def test_terrain_mixture_parameters():
    means, sig = TERRAIN_SOURCE
    assert means == [(-4.5, -4.0, 0.5), (-4.2, -3.5, 0.5), (-4.0, -3.0, 0.5), (-3.75, -2.5, 0.5)]
    assert sig == 0.02
    assert len(TERRAIN_TARGETS) == 2
    for m, s in TERRAIN_TARGETS:
        assert len(m) == 3 and s == 0.03
    assert TERRAIN_TARGETS[0][0][0] == (-2.5, -0.25, 0.5)
    assert TERRAIN_TARGETS[1][0][2] == (3.2, -0.5, 0.5)
    c = gen_gaussian_mixture(means, sig, 5000, seed=0)
    assert c.points.shape == (5000, 3)


def test_mixture_sample_mean_within_five_standard_errors():
    means = np.array([(-1.0, 0.0), (2.0, 1.0), (0.5, -3.0)])
    sig = 0.4
    n = 100_000
    c = gen_gaussian_mixture(means, sig, n, seed=7)
    mu = means.mean(0)
    var = sig ** 2 + means.var(0)  # mixture variance per coordinate
    se = np.sqrt(var / n)
    assert np.all(np.abs(c.points.mean(0) - mu) < 5 * se)


def test_bifurcation_layout():
    b = gen_bifurcation_2d(200, seed=3)
    c0, c1 = (t.points.mean(0) for t in b.targets)
    assert np.linalg.norm(c0 - c1) >= 3.0
    assert np.allclose(b.source.points.mean(0), 0.0, atol=0.05)
    assert len(b.targets[0]) == len(b.targets[1]) == 200
    n = [len(t) for t in b.targets]
    assert [k / sum(n) for k in n] == [0.5, 0.5]


def test_bifurcation_kmeans_recovers_labels():
    b = gen_bifurcation_2d(300, seed=5)
    pts = np.vstack([t.points for t in b.targets])
    _, lab = kmeans(pts, 2, seed=0)
    agree = max(np.mean(lab == b.labels), np.mean(lab != b.labels))
    assert agree == 1.0


def test_bifurcation_rejects_tiny_clusters():
    with pytest.raises(ValueError):
        gen_bifurcation_2d(5)


def test_terrain_points_lie_on_the_surface():
    t = gen_terrain_3d(n=200, seed=1, n_surface=3000)
    for c in [t.source] + t.targets:
        again = t.surface.project(c.points)
        assert np.max(np.abs(again - c.points)) < 1e-8


# --- endpoint splitting ------------------------------------------------------


def test_split_single_branch():
    pts = np.random.default_rng(0).normal(size=(30, 2))
    targets, w = split_endpoints(pts, 1)
    assert len(targets) == 1 and w.tolist() == [1.0]


@pytest.mark.parametrize(
    "sizes, expected",
    [((1675, 1033), (0.619, 0.381)), ((1622, 686, 381), (0.603, 0.255, 0.142))],
)
def test_split_weights_are_population_fractions(sizes, expected):
    rng = np.random.default_rng(1)
    centers = [np.array([10.0 * i, 0.0]) for i in range(len(sizes))]
    pts = np.vstack([c + 0.2 * rng.normal(size=(n, 2)) for c, n in zip(centers, sizes)])
    targets, w = split_endpoints(pts, len(sizes), seed=0)
    assert [len(t) for t in targets] == list(sizes)
    assert np.allclose(w, expected, atol=5e-4)
    assert abs(w.sum() - 1.0) < 1e-12


# --- coupling ----------------------------------------------------------------


def test_self_coupling_is_identity():
    pts = np.random.default_rng(2).normal(size=(20, 3))
    ia, ib = ot_couple(pts, pts)
    assert np.array_equal(ia, ib)
    assert coupling_cost(pts, pts, (ia, ib)) == 0.0


def test_crossing_pairs_resolved():
    src = np.array([[0.0, 0.0], [1.0, 0.0]])
    tgt = np.array([[1.0, 0.0], [0.0, 0.0]])
    ia, ib = ot_couple(src, tgt)
    assert ia.tolist() == [0, 1] and ib.tolist() == [1, 0]
    assert coupling_cost(src, tgt, (ia, ib)) == 0.0


def test_six_point_instance_matches_720_permutations():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    ia, ib = ot_couple(a, b)
    cost = sqeuclidean_cost(a, b)
    assert np.isclose(coupling_cost(a, b, (ia, ib)), brute_force_min(cost), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 7), d=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_assignment_is_optimal_on_small_instances(n, d, seed):
    rng = np.random.default_rng(seed)
    cost = sqeuclidean_cost(rng.normal(size=(n, d)), rng.normal(size=(n, d)))
    perm = assignment(cost)
    assert sorted(perm.tolist()) == list(range(n))
    assert np.isclose(cost[np.arange(n), perm].sum(), brute_force_min(cost), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(na=st.integers(1, 40), nb=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_coupling_preserves_uniform_marginals(na, nb, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(na, 2)), rng.normal(size=(nb, 2))
    ia, ib = ot_couple(a, b, seed=seed)
    n = max(na, nb)
    assert len(ia) == len(ib) == n
    for idx, m in ((ia, na), (ib, nb)):
        counts = np.bincount(idx, minlength=m)
        # each index appears floor(n/m) or ceil(n/m) times
        assert counts.min() >= n // m and counts.max() <= -(-n // m)


def test_equalize_multiplicities():
    rng = np.random.default_rng(0)
    ia, ib = equalize(np.zeros((3, 1)), np.zeros((8, 1)), rng)
    assert ib.tolist() == list(range(8))
    assert sorted(np.bincount(ia, minlength=3).tolist()) == [2, 3, 3]


def test_random_pairing_is_a_permutation():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(25, 2)), rng.normal(size=(25, 2))
    ia, ib = ot_couple(a, b, seed=1, random_pairing=True)
    assert sorted(ib.tolist()) == list(range(25))
    assert coupling_cost(a, b, (ia, ib)) >= coupling_cost(a, b, ot_couple(a, b)) - 1e-12


# --- problem and batches ------------------------------------------------------


def small_problem(n=60, seed=0):
    rng = np.random.default_rng(seed)
    src = PointCloud(rng.normal(size=(n, 2)), 0.0)
    targets = [PointCloud(rng.normal(size=(n, 2)) + [3.0, 0.0], 1.0), PointCloud(rng.normal(size=(n, 2)) - [3.0, 0.0], 1.0)]
    return BranchProblem(src, targets, [0.5, 0.5], seed=seed).couple()


def test_train_val_split_is_disjoint_and_ninety_ten():
    p = small_problem(100)
    assert len(p.val_src) == 10 and len(p.train_src) == 90
    assert not set(p.val_src) & set(p.train_src)


def test_problem_rejects_mismatched_dims_and_weights():
    src = PointCloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        BranchProblem(src, [PointCloud(np.zeros((4, 3)))], [1.0])
    with pytest.raises(ValueError):
        BranchProblem(src, [PointCloud(np.zeros((4, 2)))], [0.5, 0.5])


def test_sample_batch_exhaustive_without_replacement():
    p = small_problem()
    ia, ib = p.pairs(0)
    x0, x1 = sample_batch(p, 0, len(ia), np.random.default_rng(0), replace=False)
    got = sorted(map(tuple, np.hstack([x0, x1])))
    want = sorted(map(tuple, np.hstack([p.source.points[ia], p.targets[0].points[ib]])))
    assert got == want


def test_sample_batch_is_deterministic():
    p = small_problem()
    a = sample_batch(p, 1, 32, np.random.default_rng(9))
    b = sample_batch(p, 1, 32, np.random.default_rng(9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_batch_rejects_bad_branch():
    p = small_problem()
    with pytest.raises(IndexError):
        sample_batch(p, 2, 4, np.random.default_rng(0))


def test_sample_batch_frequencies_are_uniform():
    p = small_problem(30)
    ia, ib = p.pairs(0)
    n = len(ia)
    key = {tuple(np.r_[p.source.points[i], p.targets[0].points[j]]): s for s, (i, j) in enumerate(zip(ia, ib))}
    draws = 10_000
    x0, x1 = sample_batch(p, 0, draws, np.random.default_rng(123))
    counts = np.bincount([key[tuple(r)] for r in np.hstack([x0, x1])], minlength=n)
    mean = draws / n
    sd = np.sqrt(draws * (1 / n) * (1 - 1 / n))
    assert np.all(np.abs(counts - mean) <= 4 * sd)


# --- files -------------------------------------------------------------------


def test_problem_files_round_trip_and_are_deterministic(tmp_path):
    b = gen_bifurcation_2d(40, seed=2, n_anchor=100)
    paths = []
    for sub in ("a", "b"):
        paths.append(save_problem_files(tmp_path / sub, b.source, b.targets, [0.5, 0.5], 2, metric_data=b.anchors))
    for name in ("source.csv", "target_0.csv", "target_1.csv", "metric_data.csv", "problem.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    pts, t, lab = read_cloud_csv(tmp_path / "a" / "target_1.csv")
    assert np.array_equal(pts, b.targets[1].points)
    assert np.all(t == 1.0) and np.all(lab == 1)
    _, _, lab0 = read_cloud_csv(tmp_path / "a" / "source.csv")
    assert np.all(lab0 == -1)
    prob = load_problem(paths[0])
    assert prob.n_branches == 2 and prob.dim == 2
    assert np.array_equal(prob.metric_data.points, b.anchors.points)
    assert prob.target_weights.tolist() == [0.5, 0.5]


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 2)))
