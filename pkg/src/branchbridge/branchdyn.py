"""Per-branch drift and growth fields, their losses, and Euler rollouts.

Rollouts integrate ``x <- x + dt * u_k(x, t)`` and ``w <- w + dt * g_k(x, t)``
on a uniform grid with the left Riemann rule. Branch 0 starts with weight 1 and
the others with weight 0. Gradients of the rollout losses are computed by an
explicit reverse sweep over the grid.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .diffcore import Mlp, NonFiniteError, add_grads, zeros_like_params
from .geometry import path_energy, path_energy_grad
from .interpolant import expand_pairs, interp_state, interp_velocity, stratified_times


def make_flows(d, n_branches, hidden_dim, rngs=None):
    rngs = rngs or [None] * n_branches
    return [Mlp(d + 1, hidden_dim, d, "linear", rng=r) for r in rngs]


def make_growths(d, n_branches, hidden_dim, rngs=None):
    # secondary branches only ever gain mass, hence the softplus head
    rngs = rngs or [None] * n_branches
    return [Mlp(d + 1, hidden_dim, 1, "linear" if k == 0 else "softplus", rng=r) for k, r in enumerate(rngs)]


def _with_time(x, t):
    return np.concatenate([x, np.full((len(x), 1), t)], axis=1)


def _with_times(x, t):
    return np.concatenate([x, np.reshape(t, (-1, 1))], axis=1)


@dataclass
class LossWeights:
    energy: float = 1.0
    match: float = 1e3
    mass: float = 100.0
    growth: float = 0.01
    recons: float = 1.0


# ---------------------------------------------------------------------------
# flow matching


def flow_matching_targets(interpolant, x0, x1, t):
    return interp_state(interpolant, x0, x1, t), interp_velocity(interpolant, x0, x1, t)


def flow_loss_branch(flow, interpolant, x0, x1, t, need_grad=True):
    """Mean squared error between ``u(x_t, t)`` and the interpolant velocity.

    ``t`` has shape (n, n_t); the interpolant targets carry no gradient.
    """
    X0, X1, T = expand_pairs(x0, x1, t)
    xt, vt = flow_matching_targets(interpolant, X0, X1, T)
    out, cache = flow.forward_cached(_with_times(xt, T))
    r = out - vt
    n = len(T)
    loss = float(np.sum(r * r) / n)
    if not need_grad:
        return loss, None
    grads, _ = flow.backward(cache, 2.0 * r / n)
    return loss, grads


def flow_loss(flows, interpolant, batches, n_t=8, rng=None, times=None, need_grad=True):
    """Flow matching loss summed over branches; returns ``(loss, per-branch grads)``."""
    total = 0.0
    all_grads = []
    for k, (flow, (x0, x1)) in enumerate(zip(flows, batches)):
        t = times[k] if times is not None else stratified_times(len(x0), n_t, rng)
        loss, g = flow_loss_branch(flow, interpolant, x0, x1, t, need_grad)
        total += loss
        all_grads.append(g)
    return total, (all_grads if need_grad else None)


# ---------------------------------------------------------------------------
# rollout


@dataclass
class TrajectoryBundle:
    """Rolled-out paths: ``states`` (K+1, N+1, B, d), ``weights`` and ``cum_energy`` (K+1, N+1, B)."""

    times: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    cum_energy: np.ndarray

    @property
    def endpoints(self):
        return self.states[:, -1]

    @property
    def terminal_weights(self):
        return self.weights[:, -1]

    def to_csv(self, path):
        n_branches, n_nodes, n_samples, d = self.states.shape
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["sample_id", "branch", "step", "t", "w", "cum_energy"] + [f"x{j}" for j in range(d)])
            for b in range(n_samples):
                for k in range(n_branches):
                    for n in range(n_nodes):
                        w.writerow(
                            [b, k, n, repr(float(self.times[n])), repr(float(self.weights[k, n, b])),
                             repr(float(self.cum_energy[k, n, b]))]
                            + [repr(float(v)) for v in self.states[k, n, b]]
                        )


def read_trajectory_csv(path) -> TrajectoryBundle:
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ids, br, st = raw[:, 0].astype(int), raw[:, 1].astype(int), raw[:, 2].astype(int)
    n_s, n_b, n_n = ids.max() + 1, br.max() + 1, st.max() + 1
    d = raw.shape[1] - 6
    states = np.empty((n_b, n_n, n_s, d))
    weights = np.empty((n_b, n_n, n_s))
    energy = np.empty((n_b, n_n, n_s))
    times = np.empty(n_n)
    states[br, st, ids] = raw[:, 6:]
    weights[br, st, ids] = raw[:, 4]
    energy[br, st, ids] = raw[:, 5]
    times[st] = raw[:, 3]
    return TrajectoryBundle(times, states, weights, energy)


def rollout(flows, growths, x0, n_steps=100, sigma=0.0, rng=None, metric=None):
    """Euler(-Maruyama) rollout of every branch from the shared sources ``x0``.

    ``growths=None`` keeps the weights at their initial values. Noise is added
    only when ``sigma > 0``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n_branches = len(flows)
    b, d = x0.shape
    dt = 1.0 / n_steps
    times = np.linspace(0.0, 1.0, n_steps + 1)
    states = np.empty((n_branches, n_steps + 1, b, d))
    weights = np.zeros((n_branches, n_steps + 1, b))
    energy = np.zeros((n_branches, n_steps + 1, b))
    weights[0, 0] = 1.0
    for k in range(n_branches):
        x = x0.copy()
        states[k, 0] = x
        for n in range(n_steps):
            inp = _with_time(x, times[n])
            u = flows[k].forward(inp)
            w = weights[k, n]
            # negative mass carries no energy, otherwise the weighted energy is unbounded below
            energy[k, n + 1] = energy[k, n] + dt * path_energy(x, u, metric) * np.maximum(w, 0.0)
            if growths is not None:
                weights[k, n + 1] = w + dt * growths[k].forward(inp)[:, 0]
            else:
                weights[k, n + 1] = w
            x = x + dt * u
            if sigma > 0:
                x = x + np.sqrt(dt) * sigma * rng.standard_normal(x.shape)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite state at step {n + 1} of branch {k}")
            states[k, n + 1] = x
    return TrajectoryBundle(times, states, weights, energy)


# ---------------------------------------------------------------------------
# individual losses (forward only)


def energy_loss(flows, growths, x0, n_steps, metric):
    traj = rollout(flows, growths, x0, n_steps, 0.0, metric=metric)
    return float(np.mean(np.sum(traj.cum_energy[:, -1], axis=0)))


def match_loss(terminal_weights, target_weights):
    """``sum_k (w_1k - w*_k)^2`` averaged over samples; weights shaped (K+1, B) or (K+1,)."""
    w = np.asarray(terminal_weights, dtype=np.float64)
    tw = np.asarray(target_weights, dtype=np.float64)
    if w.ndim == 1:
        return float(np.sum((w - tw) ** 2))
    return float(np.mean(np.sum((w - tw[:, None]) ** 2, axis=0)))


def mass_loss(weights, w_total=1.0):
    """Grid-mean squared mass error plus a hinge on negative weights.

    ``weights`` is (K+1, N+1) for one path or (K+1, N+1, B) for a batch.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[:, :, None]
    per_node = (np.sum(w, axis=0) - w_total) ** 2 + np.sum(np.maximum(0.0, -w), axis=0)
    return float(np.mean(per_node))


def growth_loss(components, lambdas: LossWeights | None = None):
    lam = lambdas or LossWeights()
    return (
        lam.energy * components["energy"]
        + lam.match * components["match"]
        + lam.mass * components["mass"]
        + lam.growth * components["growth_penalty"]
    )


class ReconsTarget:
    """KD-tree over one branch's target cloud with the hinge radius used by the loss."""

    def __init__(self, points, n_neighbors=1, eps=None):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if len(points) == 0:
            raise ValueError("reconstruction target cloud is empty")
        self.points = points
        self.tree = cKDTree(points)
        self.n_neighbors = min(n_neighbors, len(points))
        if eps is None:
            eps = 0.1 * median_nn_distance(points, self.tree)
        self.eps = float(eps)

    def loss_grad(self, x):
        dist, idx = self.tree.query(x, k=self.n_neighbors)
        dist = dist.reshape(len(x), -1)
        idx = idx.reshape(len(x), -1)
        excess = dist - self.eps
        loss = float(np.mean(np.sum(np.maximum(0.0, excess), axis=1)))
        diff = x[:, None, :] - self.points[idx]
        active = (excess > 0) & (dist > 0)
        unit = np.where(active[:, :, None], diff / np.where(dist > 0, dist, 1.0)[:, :, None], 0.0)
        return loss, unit.sum(axis=1) / len(x)


def median_nn_distance(points, tree=None):
    if len(points) < 2:
        return 0.0
    tree = tree or cKDTree(points)
    d, _ = tree.query(points, k=2)
    return float(np.median(d[:, 1]))


def recons_loss(endpoints, targets, n_neighbors=1, eps=None):
    """Sum over branches of the mean neighbor hinge distance to that branch's target cloud."""
    total = 0.0
    for x, tgt in zip(endpoints, targets):
        rt = tgt if isinstance(tgt, ReconsTarget) else ReconsTarget(tgt, n_neighbors, eps)
        total += rt.loss_grad(np.atleast_2d(x))[0]
    return total


# ---------------------------------------------------------------------------
# joint rollout objective with gradients


def _simulate(flows, growths, x0, metric, N, keep, flow_grads):
    n_br = len(flows)
    b, d = x0.shape
    dt = 1.0 / N
    times = np.linspace(0.0, 1.0, N + 1)
    xs = np.empty((n_br, N + 1, b, d))
    us = np.empty((n_br, N, b, d))
    gs = np.empty((n_br, N, b))
    es = np.empty((n_br, N, b))
    ws = np.zeros((n_br, N + 1, b))
    ws[0, 0] = 1.0
    u_cache = [[None] * N for _ in range(n_br)]
    g_cache = [[None] * N for _ in range(n_br)]
    for k in range(n_br):
        x = x0
        xs[k, 0] = x
        for n in range(N):
            inp = _with_time(x, times[n])
            u, uc = flows[k].forward_cached(inp)
            g, gc = growths[k].forward_cached(inp)
            if keep:
                u_cache[k][n] = uc if flow_grads else None
                g_cache[k][n] = gc
            us[k, n] = u
            gs[k, n] = g[:, 0]
            es[k, n] = path_energy(x, u, metric)
            ws[k, n + 1] = ws[k, n] + dt * g[:, 0]
            x = x + dt * u
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite state at step {n + 1} of branch {k}")
            xs[k, n + 1] = x
    return xs, us, gs, es, ws, u_cache, g_cache


def frozen_paths(flows, x0, n_steps, metric):
    """States (K+1, N+1, B, d) and per-step energies (K+1, N, B) of the drift-only rollout."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    dt = 1.0 / n_steps
    times = np.linspace(0.0, 1.0, n_steps + 1)
    xs = np.empty((len(flows), n_steps + 1) + x0.shape)
    es = np.empty((len(flows), n_steps, len(x0)))
    for k, flow in enumerate(flows):
        x = x0
        xs[k, 0] = x
        for n in range(n_steps):
            u = flow.forward(_with_time(x, times[n]))
            es[k, n] = path_energy(x, u, metric)
            x = x + dt * u
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite state at step {n + 1} of branch {k}")
            xs[k, n + 1] = x
    return xs, es


def branched_objective(
    flows,
    growths,
    x0,
    metric,
    target_weights,
    lambdas: LossWeights,
    n_steps=100,
    recons=None,
    flow_grads=False,
    growth_grads=True,
    w_total=1.0,
    paths=None,
):
    """Rollout losses of stages 3 and 4 and their gradients.

    The objective is ``lambda_energy L_energy + lambda_match L_match +
    lambda_mass L_mass + lambda_growth L_growth_penalty`` plus
    ``lambda_recons L_recons`` when ``recons`` (one ReconsTarget per branch)
    is given.

    Returns
    -------
    total : float
    parts : dict of the unweighted components
    g_flow : list of per-branch gradients, or None
    g_growth : list of per-branch gradients, or None

    ``paths=(states, energies)`` from ``frozen_paths`` skips the flow
    networks entirely; only valid while the flows are not being trained.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n_br = len(flows)
    b, d = x0.shape
    N = n_steps
    dt = 1.0 / N
    times = np.linspace(0.0, 1.0, N + 1)
    tw = np.asarray(target_weights, dtype=np.float64)
    keep = flow_grads or growth_grads

    if paths is not None:
        if flow_grads:
            raise ValueError("precomputed paths cannot carry flow gradients")
        xs, es = paths
        grid_t = np.repeat(times[:N], b)
        gs = np.empty((n_br, N, b))
        g_cache = []
        for k in range(n_br):
            g, gc = growths[k].forward_cached(_with_times(xs[k, :N].reshape(N * b, d), grid_t))
            gs[k] = g.reshape(N, b)
            g_cache.append(gc)
        ws = np.zeros((n_br, N + 1, b))
        ws[0, 0] = 1.0
        ws[:, 1:] = ws[:, :1] + dt * np.cumsum(gs, axis=1)
    else:
        xs, us, gs, es, ws, u_cache, g_cache = _simulate(flows, growths, x0, metric, N, keep, flow_grads)

    parts = {
        "energy": float(np.mean(np.sum(dt * es * np.maximum(ws[:, :N], 0.0), axis=(0, 1)))),
        "match": match_loss(ws[:, N], tw),
        "mass": mass_loss(ws, w_total),
        "growth_penalty": float(np.sum(np.mean(gs ** 2, axis=(1, 2)))),
    }
    recon_grads = None
    if recons is not None:
        rl = [r.loss_grad(xs[k, N]) for k, r in enumerate(recons)]
        parts["recons"] = float(sum(v for v, _ in rl))
        recon_grads = [g for _, g in rl]
    total = growth_loss(parts, lambdas)
    if recons is not None:
        total += lambdas.recons * parts["recons"]
    if not keep:
        return total, parts, None, None

    # dL/dw at every node
    dw = np.zeros_like(ws)
    dw[:, :N] += lambdas.energy * dt * es * (ws[:, :N] > 0) / b
    dw[:, N] += lambdas.match * 2.0 * (ws[:, N] - tw[:, None]) / b
    mass_err = np.sum(ws, axis=0) - w_total
    dw += lambdas.mass * (2.0 * mass_err[None] - (ws < 0)) / (b * (N + 1))
    # w_n = w_0 + dt * sum_{m<n} g_m  =>  dL/dg_m = dt * sum_{n>m} dL/dw_n
    suffix = np.cumsum(dw[:, ::-1], axis=1)[:, ::-1]
    dg = dt * suffix[:, 1:] + lambdas.growth * 2.0 * gs / (b * N)

    g_growth = [zeros_like_params(g.params) for g in growths] if growth_grads else None
    g_flow = [zeros_like_params(f.params) for f in flows] if flow_grads else None
    if paths is not None:
        for k in range(n_br):
            g_growth[k] = growths[k].backward(g_cache[k], dg[k].reshape(N * b, 1))[0]
        return total, parts, None, g_growth
    for k in range(n_br):
        adj = lambdas.recons * recon_grads[k] if (flow_grads and recon_grads is not None) else np.zeros((b, d))
        for n in range(N - 1, -1, -1):
            pg, dinp_g = growths[k].backward(g_cache[k][n], dg[k, n][:, None])
            if growth_grads:
                add_grads(g_growth[k], pg)
            if not flow_grads:
                continue
            up = lambdas.energy * dt * np.maximum(ws[k, n], 0.0) / b
            _, ex, ev = path_energy_grad(xs[k, n], us[k, n], metric, up)
            pu, dinp_u = flows[k].backward(u_cache[k][n], dt * adj + ev)
            add_grads(g_flow[k], pu)
            adj = adj + dinp_u[:, :d] + dinp_g[:, :d] + ex
    return total, parts, g_flow, g_growth
