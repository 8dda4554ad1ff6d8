"""Endpoint-pinned neural interpolant between coupled pairs (training stage 1)."""
from __future__ import annotations

import numpy as np

from .diffcore import Mlp, add_grads, zeros_like_params
from .geometry import path_energy, path_energy_grad

FD_STEP = 1e-3


def make_interpolant(d, hidden_dim, rng=None) -> Mlp:
    return Mlp(2 * d + 1, hidden_dim, d, head="linear", rng=rng)


def _inputs(x0, x1, t):
    return np.concatenate([x0, x1, np.reshape(t, (-1, 1))], axis=1)


def _as_times(t, n):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()


def correction(net, x0, x1, t):
    return net.forward(_inputs(x0, x1, _as_times(t, len(x0))))


def interp_state(net, x0, x1, t):
    """``(1 - t) x0 + t x1 + t (1 - t) phi(x0, x1, t)``; exact at both ends."""
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    t = _as_times(t, len(x0))[:, None]
    return (1 - t) * x0 + t * x1 + t * (1 - t) * correction(net, x0, x1, t[:, 0])


def fd_times(t, h=FD_STEP):
    """Stencil ``(lo, hi)`` for the time derivative: central inside, one-sided near 0 and 1."""
    lo = np.where(t - h < 0.0, t, t - h)
    hi = np.where(t + h > 1.0, t, t + h)
    return lo, hi


def interp_velocity(net, x0, x1, t, h=FD_STEP):
    """Time derivative of ``interp_state`` with d(phi)/dt from a finite difference."""
    x0, x1 = np.atleast_2d(x0), np.atleast_2d(x1)
    t = _as_times(t, len(x0))
    lo, hi = fd_times(t, h)
    phi = correction(net, x0, x1, t)
    dphi = (correction(net, x0, x1, hi) - correction(net, x0, x1, lo)) / (hi - lo)[:, None]
    t = t[:, None]
    return x1 - x0 + t * (1 - t) * dphi + (1 - 2 * t) * phi


def stratified_times(n, n_t, rng):
    """One uniform draw in each of ``n_t`` equal bins, for each of ``n`` pairs."""
    return (np.arange(n_t)[None, :] + rng.uniform(size=(n, n_t))) / n_t


def expand_pairs(x0, x1, t):
    """Repeat each pair once per time draw; ``t`` has shape (n, n_t)."""
    n_t = t.shape[1]
    return np.repeat(x0, n_t, axis=0), np.repeat(x1, n_t, axis=0), t.reshape(-1)


def traj_terms(net, x0, x1, t, metric, need_grad=True, h=FD_STEP):
    """Mean path energy over rows and (optionally) its parameter gradient."""
    lo, hi = fd_times(t, h)
    o_t, c_t = net.forward_cached(_inputs(x0, x1, t))
    o_lo, c_lo = net.forward_cached(_inputs(x0, x1, lo))
    o_hi, c_hi = net.forward_cached(_inputs(x0, x1, hi))
    span = (hi - lo)[:, None]
    tt = t[:, None]
    c1 = tt * (1 - tt)
    c2 = 1 - 2 * tt
    x = (1 - tt) * x0 + tt * x1 + c1 * o_t
    v = x1 - x0 + c1 * (o_hi - o_lo) / span + c2 * o_t
    n = len(t)
    if not need_grad:
        return float(np.mean(path_energy(x, v, metric))), None
    e, gx, gv = path_energy_grad(x, v, metric, np.full(n, 1.0 / n))
    grads = zeros_like_params(net.params)
    add_grads(grads, net.backward(c_t, c1 * gx + c2 * gv)[0])
    add_grads(grads, net.backward(c_hi, c1 / span * gv)[0])
    add_grads(grads, net.backward(c_lo, -c1 / span * gv)[0])
    return float(np.mean(e)), grads


def stage1_loss(net, batches, metric, n_t=8, rng=None, times=None, need_grad=True):
    """Trajectory loss summed over branches.

    Parameters
    ----------
    batches : list of (x0, x1)
        One batch of coupled pairs per branch.
    times : list of arrays, optional
        Fixed (n, n_t) time draws per branch; drawn stratified from ``rng`` otherwise.

    Returns
    -------
    loss, grads
        ``grads`` is None when ``need_grad`` is False.
    """
    total = 0.0
    grads = zeros_like_params(net.params) if need_grad else None
    for k, (x0, x1) in enumerate(batches):
        t = times[k] if times is not None else stratified_times(len(x0), n_t, rng)
        X0, X1, T = expand_pairs(x0, x1, t)
        loss, g = traj_terms(net, X0, X1, T, metric, need_grad)
        total += loss
        if need_grad:
            add_grads(grads, g)
    return total, grads


def train_stage1(problem, metric, config, net=None, log=None):
    """Fit the interpolant on all branches' coupled pairs; see ``pipeline.run_stage``."""
    from .pipeline import NetBundle, run_stage

    bundle = NetBundle.initialize(problem.dim, problem.n_branches - 1, config)
    if net is not None:
        bundle.interpolant = net
    curves = run_stage(bundle, problem, metric, config, 1)
    return bundle.interpolant, curves[1]
