"""Synthetic datasets, endpoint clustering, OT coupling and batch sampling."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Surface, kmeans, make_terrain

# Gaussian mixture parameters of the terrain task: (means, sigma)
TERRAIN_SOURCE = ([(-4.5, -4.0, 0.5), (-4.2, -3.5, 0.5), (-4.0, -3.0, 0.5), (-3.75, -2.5, 0.5)], 0.02)
TERRAIN_TARGETS = (
    ([(-2.5, -0.25, 0.5), (-2.25, 0.675, 0.5), (-2.0, 1.5, 0.5)], 0.03),
    ([(2.0, -2.0, 0.5), (2.6, -1.25, 0.5), (3.2, -0.5, 0.5)], 0.03),
)


@dataclass
class PointCloud:
    points: np.ndarray
    time_label: Optional[float] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if len(self.points) == 0:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite entries")

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _points(c):
    return c.points if isinstance(c, PointCloud) else np.atleast_2d(np.asarray(c, dtype=np.float64))


# ---------------------------------------------------------------------------
# generators


def gen_gaussian_mixture(means, sigma, n, seed=0, surface: Surface | None = None) -> PointCloud:
    """``n`` draws from an isotropic mixture with uniformly chosen components."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    comp = rng.integers(len(means), size=n)
    pts = means[comp] + sigma * rng.standard_normal((n, means.shape[1]))
    if surface is not None:
        pts = surface.project(pts)
    return PointCloud(pts)


def _bezier(p0, p1, p2, s):
    s = s[:, None]
    return (1 - s) ** 2 * p0 + 2 * s * (1 - s) * p1 + s ** 2 * p2


@dataclass
class BifurcationData:
    source: PointCloud
    targets: list
    anchors: PointCloud
    labels: np.ndarray  # branch label of each row of the stacked targets


# LAND settings the bifurcation anchors are sized for; gen-data records them in problem.json
BIFURCATION_METRIC = {"kind": "land", "sigma": 0.25, "eps": 1e-3}


def gen_bifurcation_2d(n_per_cluster=1000, seed=0, spread=0.15, n_anchor=3000, n_blob_anchor=500) -> BifurcationData:
    """Source blob at the origin splitting into targets at (-2, 2) and (2, 2).

    The anchor cloud covers both endpoint blobs plus two bent corridors (quadratic
    Bezier curves through (0, 2)), so the cheap paths under a data metric are
    curved rather than straight. The corridors hold ``n_anchor`` points in
    total; each blob contributes ``n_blob_anchor`` subsampled points (at most
    ``n_per_cluster``), or all of them when None. The LAND metric sums over anchors, so corridor density sets
    how cheap travel along them is.
    """
    if n_per_cluster < 10:
        raise ValueError("n_per_cluster must be >= 10")
    rng = np.random.default_rng(seed)
    src = spread * rng.standard_normal((n_per_cluster, 2))
    centers = [np.array([-2.0, 2.0]), np.array([2.0, 2.0])]
    targets = [PointCloud(c + spread * rng.standard_normal((n_per_cluster, 2)), 1.0) for c in centers]
    corridor = []
    per = n_anchor // 2
    for c in centers:
        s = rng.uniform(0.0, 1.0, per)
        path = _bezier(np.zeros(2), np.array([0.0, 2.0]), c, s)
        corridor.append(path + 0.5 * spread * rng.standard_normal(path.shape))
    keep = n_per_cluster if n_blob_anchor is None else min(n_blob_anchor, n_per_cluster)
    blobs = [c[rng.permutation(n_per_cluster)[:keep]] for c in (src, targets[0].points, targets[1].points)]
    anchors = np.vstack(blobs + corridor)
    labels = np.repeat([0, 1], n_per_cluster)
    return BifurcationData(PointCloud(src, 0.0), targets, PointCloud(anchors), labels)


@dataclass
class TerrainData:
    source: PointCloud
    targets: list
    surface: Surface


def gen_terrain_3d(n=5000, seed=0, surface: Surface | None = None, n_surface=20000) -> TerrainData:
    """Source and two target mixtures projected onto a synthetic mountain."""
    ss = np.random.SeedSequence(seed).spawn(4)
    if surface is None:
        surface = make_terrain(n_surface, seed=int(ss[0].generate_state(1)[0]))
    means, sig = TERRAIN_SOURCE
    source = gen_gaussian_mixture(means, sig, n, int(ss[1].generate_state(1)[0]), surface)
    source.time_label = 0.0
    targets = []
    for (means, sig), s in zip(TERRAIN_TARGETS, ss[2:]):
        t = gen_gaussian_mixture(means, sig, n, int(s.generate_state(1)[0]), surface)
        t.time_label = 1.0
        targets.append(t)
    return TerrainData(source, targets, surface)


# ---------------------------------------------------------------------------
# endpoints and coupling


def split_endpoints(cloud, n_branches, seed=0):
    """Cluster terminal points into branch targets with weights ``N_k / N``.

    Clusters are ordered by decreasing size so branch 0 is the largest.
    """
    if n_branches < 1:
        raise ValueError("need at least one branch")
    pts = _points(cloud)
    if n_branches == 1:
        return [PointCloud(pts.copy(), 1.0)], np.array([1.0])
    _, labels = kmeans(pts, n_branches, seed=seed)
    sizes = np.bincount(labels, minlength=n_branches)
    order = np.argsort(-sizes, kind="stable")
    targets = [PointCloud(pts[labels == j], 1.0) for j in order]
    weights = sizes[order] / sizes.sum()
    return targets, weights


def assignment(cost):
    """Exact minimum-cost perfect matching on a square cost matrix."""
    rows, cols = linear_sum_assignment(cost)
    return cols[np.argsort(rows)]


def sqeuclidean_cost(a, b):
    return (
        np.sum(a ** 2, axis=1)[:, None] - 2.0 * a @ b.T + np.sum(b ** 2, axis=1)[None, :]
    ).clip(min=0.0)


def equalize(a, b, rng):
    """Index arrays that resample the smaller cloud (with replacement) up to the larger size.

    Every original index of the smaller cloud is kept at least once when the
    size ratio allows it.
    """
    na, nb = len(a), len(b)
    ia, ib = np.arange(na), np.arange(nb)
    if na < nb:
        ia = _upsample(na, nb, rng)
    elif nb < na:
        ib = _upsample(nb, na, rng)
    return ia, ib


def _upsample(n_small, n_large, rng):
    reps = n_large // n_small
    extra = rng.choice(n_small, size=n_large - reps * n_small, replace=False)
    return np.concatenate([np.tile(np.arange(n_small), reps), extra])


def ot_couple(source, target, seed=0, random_pairing=False):
    """Pair source and target samples under the exact squared-Euclidean OT plan.

    Returns ``(src_idx, tgt_idx)`` index arrays of equal length. With
    ``random_pairing`` the matching is a random permutation instead.
    """
    a, b = _points(source), _points(target)
    rng = np.random.default_rng(seed)
    ia, ib = equalize(a, b, rng)
    if random_pairing:
        return ia, ib[rng.permutation(len(ib))]
    perm = assignment(sqeuclidean_cost(a[ia], b[ib]))
    return ia, ib[perm]


def coupling_cost(source, target, pairing):
    a, b = _points(source), _points(target)
    ia, ib = pairing
    return float(np.sum((a[ia] - b[ib]) ** 2))


@dataclass
class BranchProblem:
    """Source cloud, branch targets, target weights and per-branch OT couplings.

    ``train_src`` / ``val_src`` split the source indices 0.9/0.1; a coupled pair
    belongs to the split of its source index.
    """

    source: PointCloud
    targets: list
    target_weights: np.ndarray
    couplings: list = field(default_factory=list)
    metric_data: Optional[PointCloud] = None
    seed: int = 0
    train_src: np.ndarray = None
    val_src: np.ndarray = None
    w_total: float = 1.0
    metric_spec: Optional[dict] = None  # suggested metric settings from the manifest

    def __post_init__(self):
        self.target_weights = np.asarray(self.target_weights, dtype=np.float64)
        if len(self.target_weights) != len(self.targets):
            raise ValueError("one target weight per branch is required")
        dims = {self.source.dim} | {t.dim for t in self.targets}
        if len(dims) != 1:
            raise ValueError(f"source and targets disagree on dimension: {sorted(dims)}")
        if self.train_src is None:
            rng = np.random.default_rng([self.seed, 10])
            perm = rng.permutation(len(self.source))
            n_val = max(1, int(round(0.1 * len(perm)))) if len(perm) > 1 else 0
            self.val_src = np.sort(perm[:n_val])
            self.train_src = np.sort(perm[n_val:])

    @property
    def n_branches(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.source.dim

    def couple(self, random_pairing=False):
        self.couplings = [
            ot_couple(self.source, t, seed=self.seed * 1000 + k, random_pairing=random_pairing)
            for k, t in enumerate(self.targets)
        ]
        return self

    def pairs(self, branch, split="train"):
        """Source/target index arrays of coupled pairs whose source lies in ``split``."""
        if not 0 <= branch < self.n_branches:
            raise IndexError(f"branch {branch} out of range for {self.n_branches} branches")
        if not self.couplings:
            raise RuntimeError("problem has no couplings; call couple() first")
        ia, ib = self.couplings[branch]
        keep = np.isin(ia, self.train_src if split == "train" else self.val_src)
        return ia[keep], ib[keep]

    def target_split(self, branch, split="train"):
        _, ib = self.pairs(branch, split)
        return self.targets[branch].points[np.unique(ib)]


def sample_batch(problem: BranchProblem, branch, batch, rng, split="train", replace=True):
    """Draw coupled pairs ``(x0, x1)`` for one branch."""
    ia, ib = problem.pairs(branch, split)
    if replace:
        sel = rng.integers(len(ia), size=batch)
    else:
        if batch > len(ia):
            raise ValueError("batch larger than the coupling without replacement")
        sel = rng.permutation(len(ia))[:batch]
    return problem.source.points[ia[sel]], problem.targets[branch].points[ib[sel]]


# ---------------------------------------------------------------------------
# files


def write_cloud_csv(path, points, t, labels):
    points = np.asarray(points)
    labels = np.broadcast_to(np.asarray(labels), (len(points),))
    d = points.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t"] + [f"x{j}" for j in range(d)] + ["branch_label"])
        for p, lab in zip(points, labels):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in p] + [int(lab)])


def read_cloud_csv(path):
    """Return ``(points, t, branch_label)`` arrays from a dataset CSV."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    if header[0] != "t" or header[-1] != "branch_label":
        raise ValueError(f"{path}: unexpected header {header}")
    body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    return body[:, 1:-1], body[:, 0], body[:, -1].astype(int)


def write_points_csv(path, points, header=("x", "y", "z")):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for p in np.asarray(points):
            w.writerow([repr(float(v)) for v in p])


def read_points_csv(path):
    """Points from either a dataset CSV or a plain coordinate CSV."""
    with open(path, newline="") as f:
        header = next(csv.reader(f))
    if header and header[0] == "t":
        return read_cloud_csv(path)[0]
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def save_problem_files(out_dir, source, targets, weights, seed, metric_data=None, surface=None, task=None,
                       metric=None):
    """Write dataset CSVs plus a ``problem.json`` manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cloud_csv(out / "source.csv", _points(source), 0.0, -1)
    files = []
    for k, t in enumerate(targets):
        name = f"target_{k}.csv"
        write_cloud_csv(out / name, _points(t), 1.0, k)
        files.append(name)
    manifest = {
        "task": task,
        "dim": int(_points(source).shape[1]),
        "source": "source.csv",
        "targets": files,
        "target_weights": [float(w) for w in weights],
        "seed": int(seed),
    }
    if metric is not None:
        manifest["metric"] = dict(metric)
    if metric_data is not None:
        write_cloud_csv(out / "metric_data.csv", _points(metric_data), 0.5, -1)
        manifest["metric_data"] = "metric_data.csv"
    if surface is not None:
        write_points_csv(out / "surface.csv", surface.cloud)
        manifest["surface"] = "surface.csv"
        manifest.setdefault("metric_data", "surface.csv")
    manifest["hashes"] = {
        name: file_hash(out / name)
        for name in [manifest["source"], *files, manifest.get("metric_data"), manifest.get("surface")]
        if name
    }
    path = out / "problem.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def load_problem(manifest_path, couple=True, random_pairing=False) -> BranchProblem:
    manifest_path = Path(manifest_path)
    with open(manifest_path) as f:
        m = json.load(f)
    base = manifest_path.parent
    src = PointCloud(read_cloud_csv(base / m["source"])[0], 0.0)
    targets = [PointCloud(read_cloud_csv(base / name)[0], 1.0) for name in m["targets"]]
    metric_data = None
    if m.get("metric_data"):
        metric_data = PointCloud(read_points_csv(base / m["metric_data"]))
    prob = BranchProblem(src, targets, m["target_weights"], metric_data=metric_data, seed=m.get("seed", 0),
                         metric_spec=m.get("metric"))
    if couple:
        prob.couple(random_pairing)
    return prob
