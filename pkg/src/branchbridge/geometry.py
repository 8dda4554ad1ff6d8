"""Data-dependent diagonal metrics, path energy, k-means and terrain projection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


# ---------------------------------------------------------------------------
# metrics


class LandMetric:
    """Kernel-weighted local variance metric anchored on a point cloud.

    ``h_j(x) = sum_i (a_ij - x_j)^2 exp(-|x - a_i|^2 / (2 sigma^2))``.

    With ``cutoff`` set, anchors farther than ``cutoff * sigma`` from the query
    are skipped (found with a KD-tree); at a cutoff of 8 the dropped kernel
    mass is below exp(-32) per anchor. Without it every anchor is summed.
    """

    kind = "land"

    def __init__(self, anchors, sigma=0.125, eps=1e-3, cutoff=None, anchor_file=None):
        anchors = np.asarray(anchors, dtype=np.float64)
        if anchors.ndim != 2 or len(anchors) == 0:
            raise ValueError("LAND metric needs a nonempty (N, d) anchor array")
        if sigma <= 0 or eps <= 0:
            raise ValueError("sigma and eps must be positive")
        self.anchors = anchors
        self.sigma = float(sigma)
        self.eps = float(eps)
        self.cutoff = cutoff
        self.anchor_file = anchor_file
        self._tree = cKDTree(anchors) if cutoff is not None else None
        self._a2 = anchors ** 2
        self._a2sum = self._a2.sum(axis=1)
        self._feat = np.concatenate([self._a2, anchors, np.ones((len(anchors), 1))], axis=1)
        self._chunk = max(1, 4_000_000 // len(anchors))

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def _dense_terms(self, x):
        # squared distances via |x|^2 - 2 x.a + |a|^2, built in place
        c = 0.5 / self.sigma ** 2
        arg = x @ self.anchors.T
        arg *= 2.0 * c
        arg -= (c * np.sum(x * x, axis=1))[:, None]
        arg -= (c * self._a2sum)[None, :]
        np.minimum(arg, 0.0, out=arg)
        return np.exp(arg, out=arg)

    def _sparse_pairs(self, x):
        lists = self._tree.query_ball_point(x, self.cutoff * self.sigma)
        counts = np.fromiter((len(l) for l in lists), dtype=np.int64, count=len(lists))
        rows = np.repeat(np.arange(len(x)), counts)
        cols = np.fromiter((j for l in lists for j in l), dtype=np.int64, count=int(counts.sum()))
        diff = self.anchors[cols] - x[rows]
        k = np.exp(-np.einsum("pd,pd->p", diff, diff) / (2 * self.sigma ** 2))
        return rows, diff, k

    def _rowsum(self, rows, vals, n):
        return np.stack([np.bincount(rows, vals[:, j], minlength=n) for j in range(vals.shape[1])], axis=1)

    def _chunks(self, x):
        for s in range(0, len(x), self._chunk):
            yield slice(s, s + self._chunk), self._dense_terms(x[s:s + self._chunk])

    def _moments(self, k):
        # k @ [a^2, a, 1] in one product
        d = self.dim
        m = k @ self._feat
        return m[:, :d], m[:, d:2 * d], m[:, 2 * d:]

    def _h_from(self, xs, k):
        ka2, ka, ksum = self._moments(k)
        return ka2 - 2.0 * xs * ka + xs ** 2 * ksum

    def _vjp_from(self, xs, gs, k):
        # d/dx_m of (a-x)_j^2 k = -2 (a-x)_j k [j == m] + (a-x)_j^2 k (a-x)_m / s2
        d = self.dim
        _, ka, ksum = self._moments(k)
        kd = ka - xs * ksum  # sum_i k_i (a_i - x)
        # S_i = k_i sum_j g_j (a_ij - x_j)^2
        S = np.concatenate([gs, -2.0 * gs * xs], axis=1) @ self._feat[:, :2 * d].T
        S += np.sum(gs * xs ** 2, axis=1)[:, None]
        S *= k
        sm = S @ self._feat[:, d:]
        return -2.0 * gs * kd + (sm[:, :d] - xs * sm[:, d:]) / self.sigma ** 2

    def h(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self._tree is not None:
            rows, diff, k = self._sparse_pairs(x)
            return self._rowsum(rows, k[:, None] * diff ** 2, len(x))
        out = np.empty_like(x)
        for sl, k in self._chunks(x):
            out[sl] = self._h_from(x[sl], k)
        return np.maximum(out, 0.0)

    def h_vjp(self, x, g):
        """Gradient of ``sum(g * h(x))`` with respect to ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.asarray(g, dtype=np.float64)
        if self._tree is not None:
            rows, diff, k = self._sparse_pairs(x)
            gs = g[rows]
            wsum = np.einsum("pd,pd->p", gs, diff ** 2) * k / self.sigma ** 2
            contrib = -2.0 * gs * (k[:, None] * diff) + wsum[:, None] * diff
            return self._rowsum(rows, contrib, len(x))
        out = np.empty_like(x)
        for sl, k in self._chunks(x):
            out[sl] = self._vjp_from(x[sl], g[sl], k)
        return out

    def h_and_vjp(self, x):
        """``h(x)`` and a function computing ``h_vjp(x, g)`` that reuses the kernel matrix."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self._tree is not None:
            return self.h(x), lambda g: self.h_vjp(x, g)
        parts = list(self._chunks(x))
        out = np.empty_like(x)
        for sl, k in parts:
            out[sl] = self._h_from(x[sl], k)

        def vjp(g):
            g = np.asarray(g, dtype=np.float64)
            res = np.empty_like(x)
            for sl, k in parts:
                res[sl] = self._vjp_from(x[sl], g[sl], k)
            return res

        return np.maximum(out, 0.0), vjp

    def to_dict(self, anchor_file=None) -> dict:
        d = {"kind": "land", "sigma": self.sigma, "eps": self.eps, "cutoff": self.cutoff}
        ref = anchor_file or self.anchor_file
        if ref is not None:
            d["anchor_file"] = str(ref)
        else:
            d["anchors"] = self.anchors.tolist()
        return d


class RbfMetric:
    """Learned kernel metric: ``h_j(x) = sum_n w_nj exp(-lam_nj / 2 |x - c_n|^2)``."""

    kind = "rbf"

    def __init__(self, centers, lambdas, omegas, kappa, eps=1e-3):
        self.centers = np.asarray(centers, dtype=np.float64)
        self.lambdas = np.asarray(lambdas, dtype=np.float64)
        self.omegas = np.asarray(omegas, dtype=np.float64)
        if np.any(self.lambdas <= 0):
            raise ValueError("RBF bandwidths must be positive")
        self.kappa = float(kappa)
        self.eps = float(eps)
        self.fit_history: list[float] = []

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def _features(self, x):
        diff = x[:, None, :] - self.centers[None, :, :]
        sq = np.einsum("bnd,bnd->bn", diff, diff)
        phi = np.exp(-0.5 * self.lambdas[None, :, :] * sq[:, :, None])  # (B, Nc, d)
        return diff, sq, phi

    def h(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, _, phi = self._features(x)
        return np.einsum("bnd,nd->bd", phi, self.omegas)

    def h_vjp(self, x, g):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff, _, phi = self._features(x)
        # dh_j/dx = -sum_n w_nj lam_nj phi_nj (x - c_n)
        coef = np.einsum("bd,bnd,nd->bn", g, phi, self.omegas * self.lambdas)
        return -np.einsum("bn,bnd->bd", coef, diff)

    def loss(self, data):
        return float(np.mean((1.0 - self.h(data)) ** 2))

    def to_dict(self) -> dict:
        return {
            "kind": "rbf",
            "kappa": self.kappa,
            "eps": self.eps,
            "centers": self.centers.tolist(),
            "lambdas": self.lambdas.tolist(),
            "omegas": self.omegas.tolist(),
        }


def rbf_bandwidths(data, centers, labels, kappa):
    """Per-cluster bandwidth ``0.5 * (kappa * mean |x - c_n|^2)^-2``, broadcast over dims."""
    n_c, d = centers.shape
    lam = np.empty((n_c, d))
    for n in range(n_c):
        members = data[labels == n]
        msd = np.mean(np.sum((members - centers[n]) ** 2, axis=1))
        # singleton cluster: fall back to the global spread so lam stays finite
        if msd <= 0:
            msd = np.mean(np.sum((data - data.mean(0)) ** 2, axis=1)) or 1.0
        lam[n] = 0.5 * (kappa * msd) ** -2
    return lam


def rbf_fit(data, n_centers, kappa, seed=0, eps=1e-3, lr=1e-2, max_steps=2000, rel_tol=1e-6):
    """Fit an RBF metric so that ``h(x_i) ~ 1`` on the training data.

    Centers come from k-means, bandwidths from the cluster spread rule, and the
    kernel weights from gradient descent on the mean of ``(1 - h_j(x_i))^2``
    started at omega = 1. The step size is halved whenever a step would
    increase the loss.
    """
    data = np.asarray(data, dtype=np.float64)
    centers, labels = kmeans(data, n_centers, seed=seed)
    lam = rbf_bandwidths(data, centers, labels, kappa)
    metric = RbfMetric(centers, lam, np.ones_like(lam), kappa, eps)
    _, _, phi = metric._features(data)  # (N, Nc, d), fixed during the fit
    n = len(data)

    def loss_and_grad(omegas):
        resid = 1.0 - np.einsum("bnd,nd->bd", phi, omegas)
        loss = np.mean(resid ** 2)
        grad = -2.0 * np.einsum("bd,bnd->nd", resid, phi) / (n * data.shape[1])
        return loss, grad

    omegas = metric.omegas
    loss, grad = loss_and_grad(omegas)
    history = [loss]
    step = lr
    for _ in range(max_steps):
        trial = omegas - step * grad
        new_loss, new_grad = loss_and_grad(trial)
        if new_loss > loss:
            step *= 0.5
            if step < 1e-12:
                break
            continue
        improvement = (loss - new_loss) / max(loss, 1e-300)
        omegas, loss, grad = trial, new_loss, new_grad
        history.append(loss)
        if improvement < rel_tol:
            break
    metric.omegas = omegas
    metric.fit_history = history
    return metric


def metric_from_dict(d: dict, base_dir=None):
    if d["kind"] == "land":
        if "anchors" in d:
            anchors = np.asarray(d["anchors"], dtype=np.float64)
            ref = None
        else:
            from pathlib import Path

            from .data import read_points_csv

            ref = Path(d["anchor_file"])
            if base_dir is not None and not ref.is_absolute():
                ref = Path(base_dir) / ref
            anchors = read_points_csv(ref)
        return LandMetric(anchors, d["sigma"], d["eps"], d.get("cutoff"), anchor_file=d.get("anchor_file"))
    if d["kind"] == "rbf":
        return RbfMetric(d["centers"], d["lambdas"], d["omegas"], d["kappa"], d["eps"])
    raise ValueError(f"unknown metric kind {d['kind']!r}")


def save_metric(metric, path, anchor_file=None):
    d = metric.to_dict(anchor_file) if metric.kind == "land" else metric.to_dict()
    with open(path, "w") as f:
        json.dump(d, f)


# ---------------------------------------------------------------------------
# path energy


def _denominator(h, eps):
    # h may dip below zero for fitted RBF weights; keep the form positive definite
    return np.maximum(h + eps, eps)


def path_energy(x, v, metric=None):
    """Riemannian kinetic energy ``sum_j v_j^2 / (h_j(x) + eps)`` per row.

    ``metric=None`` means the flat metric (denominator 1).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if metric is None:
        return np.sum(v * v, axis=1)
    return np.sum(v * v / _denominator(metric.h(x), metric.eps), axis=1)


def path_energy_from_h(h, v, eps):
    return np.sum(v * v / _denominator(h, eps), axis=-1)


def path_energy_grad(x, v, metric, upstream):
    """Energies plus gradients of ``sum(upstream * energy)`` w.r.t. ``x`` and ``v``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if metric is None:
        return np.sum(v * v, axis=1), np.zeros_like(x), 2.0 * upstream[:, None] * v
    if hasattr(metric, "h_and_vjp"):
        h, vjp = metric.h_and_vjp(x)
    else:
        h = metric.h(x)
        vjp = lambda g: metric.h_vjp(x, g)  # noqa: E731
    raw = h + metric.eps
    den = np.maximum(raw, metric.eps)
    e = np.sum(v * v / den, axis=1)
    gv = 2.0 * upstream[:, None] * v / den
    gh = np.where(raw > metric.eps, -upstream[:, None] * v * v / den ** 2, 0.0)
    gx = vjp(gh) if np.any(gh) else np.zeros_like(x)
    return e, gx, gv


# ---------------------------------------------------------------------------
# k-means


def kmeans_pp_init(data, k, rng):
    n = len(data)
    centers = [data[rng.integers(n)]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(data[idx])
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    return np.array(centers)


def _sqdist(data, centers):
    return (
        np.sum(data ** 2, axis=1)[:, None]
        - 2.0 * data @ centers.T
        + np.sum(centers ** 2, axis=1)[None, :]
    ).clip(min=0.0)


def kmeans(data, k, seed=0, max_iter=200, return_history=False):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its current center.
    Returns ``(centers, labels)`` and, with ``return_history``, the inertia after
    every iteration.
    """
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if k < 1 or k > n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if k == n:
        centers, labels = data.copy(), np.arange(n)
        return (centers, labels, [0.0]) if return_history else (centers, labels)
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(data, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = _sqdist(data, centers)
        new_labels = np.argmin(d2, axis=1)
        for j in range(k):
            counts = np.bincount(new_labels, minlength=k)
            if counts[j] == 0:
                # farthest point among clusters that can spare one
                dist = np.where(counts[new_labels] > 1, d2[np.arange(n), new_labels], -1.0)
                new_labels[np.argmax(dist)] = j
        converged = labels is not None and np.array_equal(new_labels, labels)
        labels = new_labels
        centers = np.array([data[labels == j].mean(axis=0) for j in range(k)])
        history.append(float(np.sum((data - centers[labels]) ** 2)))
        if converged:
            break
    return (centers, labels, history) if return_history else (centers, labels)


# ---------------------------------------------------------------------------
# terrain surface


@dataclass
class Surface:
    """3D point cloud of a height field plus the tangent-plane projection settings."""

    cloud: np.ndarray
    knn_k: int = 20
    tau: float = 1e-3
    _tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=np.float64)
        if self.cloud.ndim != 2 or self.cloud.shape[1] != 3:
            raise ValueError("surface cloud must be (N, 3)")
        if len(self.cloud) < self.knn_k:
            raise ValueError("surface cloud has fewer points than knn_k")
        self._tree = cKDTree(self.cloud)

    def tangent_plane(self, x):
        """Weighted least-squares plane ``z = a x + b y + c`` near each row of ``x``."""
        x = np.atleast_2d(x)
        dist, idx = self._tree.query(x, k=self.knn_k)
        coefs = np.empty((len(x), 3))
        for r in range(len(x)):
            nb = self.cloud[idx[r]]
            # shifting by the nearest distance rescales all weights equally
            w = np.exp(-(dist[r] - dist[r].min()) / self.tau)
            A = np.column_stack([nb[:, 0], nb[:, 1], np.ones(len(nb))])
            sw = np.sqrt(w)[:, None]
            Aw = A * sw
            if np.linalg.matrix_rank(Aw, tol=1e-8 * np.abs(Aw).max()) < 3:
                _, wide = self._tree.query(x[r], k=min(3 * self.knn_k, len(self.cloud)))
                nb = self.cloud[wide]
                A = np.column_stack([nb[:, 0], nb[:, 1], np.ones(len(nb))])
                coefs[r] = np.linalg.pinv(A) @ nb[:, 2]
            else:
                coefs[r] = np.linalg.pinv(Aw) @ (nb[:, 2] * sw[:, 0])
        return coefs

    def project_once(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a, b, c = self.tangent_plane(x).T
        v = np.column_stack([a, b, -np.ones_like(a)])
        s = (np.sum(x * v, axis=1) + c) / np.sum(v * v, axis=1)
        return x - s[:, None] * v

    def project(self, x, tol=1e-12, max_iter=50):
        """Project onto the surface, re-fitting the plane until the point stops moving."""
        single = np.ndim(x) == 1
        y = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
        active = np.arange(len(y))
        for _ in range(max_iter):
            if len(active) == 0:
                break
            moved = self.project_once(y[active])
            step = np.linalg.norm(moved - y[active], axis=1)
            y[active] = moved
            active = active[step > tol * (1.0 + np.linalg.norm(moved, axis=1))]
        return y[0] if single else y


def project_to_surface(x, surface: Surface):
    return surface.project(x)


def terrain_height(xy, bumps=None):
    """Gaussian-bump height field over the [-5, 5]^2 square."""
    if bumps is None:
        bumps = TERRAIN_BUMPS
    xy = np.atleast_2d(xy)
    z = np.zeros(len(xy))
    for cx, cy, amp, width in bumps:
        z += amp * np.exp(-((xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2) / (2 * width ** 2))
    return z


# (center x, center y, amplitude, width); the tall central peak separates the
# two endpoint regions of the terrain task
TERRAIN_BUMPS = (
    (-0.5, -1.0, 2.5, 1.1),
    (1.5, 1.5, 1.2, 1.4),
    (-3.0, 2.5, 0.8, 1.2),
    (3.5, -3.5, 0.6, 1.0),
)


def make_terrain(n_points=20000, seed=0, bumps=None, knn_k=20, tau=1e-3):
    """Sample a jittered grid over the height field and wrap it as a Surface."""
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_points)))
    g = np.linspace(-5.0, 5.0, side)
    gx, gy = np.meshgrid(g, g)
    xy = np.column_stack([gx.ravel(), gy.ravel()])[:n_points]
    xy = xy + rng.uniform(-0.25, 0.25, size=xy.shape) * (g[1] - g[0])
    xy = np.clip(xy, -5.0, 5.0)
    cloud = np.column_stack([xy, terrain_height(xy, bumps)])
    return Surface(cloud, knn_k=knn_k, tau=tau)
