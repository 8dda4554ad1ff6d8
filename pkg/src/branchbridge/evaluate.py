"""Distribution distances and the branched versus single-branch comparison.

Wasserstein distances use the same exact assignment solver as the training
coupling. The MMD is the biased V-statistic with a five-scale Gaussian kernel
mixture.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .branchdyn import rollout
from .data import _points, assignment, equalize

MMD_SCALES = (0.01, 0.1, 1.0, 10.0, 100.0)


def wasserstein(p, q, order=1, seed=0):
    """Exact W1 or W2 between two uniform empirical measures.

    Unequal sizes are equalized by seeded resampling of the smaller cloud
    before the assignment.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    a, b = _points(p), _points(q)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("clouds must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    ia, ib = equalize(a, b, np.random.default_rng(seed))
    a, b = a[ia], b[ib]
    cost = cdist(a, b, "euclidean" if order == 1 else "sqeuclidean")
    # distances of matched pairs recomputed directly, so identical clouds give exactly 0
    matched = np.linalg.norm(a - b[assignment(cost)], axis=1)
    if order == 1:
        return float(np.mean(matched))
    return float(np.sqrt(np.mean(matched ** 2)))


def _kernel_mean(a, b, scales):
    sq = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    sq = np.maximum(sq, 0.0)
    return float(sum(np.mean(np.exp(-sq / (2.0 * s))) for s in scales))


def rbf_mmd(x, y, scales=MMD_SCALES):
    """Biased squared MMD with the kernel ``sum_s exp(-|a-b|^2 / (2 s))``."""
    a, b = _points(x), _points(y)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("clouds must be nonempty")
    kxx = _kernel_mean(a, a, scales)
    kyy = _kernel_mean(b, b, scales)
    kxy = _kernel_mean(a, b, scales)
    kyx = _kernel_mean(b, a, scales)
    # symmetric by construction: the cross term is averaged both ways
    return kxx + kyy - kxy - kyx


def allocate_counts(weights, n):
    """Largest-remainder rounding of ``weights * n`` to integers summing to ``n``."""
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
    if w.sum() <= 0:
        w = np.ones_like(w)
    share = w / w.sum() * n
    counts = np.floor(share).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def pooled_prediction(endpoints, terminal_weights, rng):
    """Mix branch endpoints with per-branch counts set by the mean learned weights.

    ``endpoints`` is (K+1, B, d) and ``terminal_weights`` (K+1, B). Branch k
    contributes a random subset of its B endpoints of the allotted size.
    """
    endpoints = np.asarray(endpoints)
    n = endpoints.shape[1]
    counts = allocate_counts(np.mean(terminal_weights, axis=1), n)
    parts = [endpoints[k, rng.permutation(n)[:c]] for k, c in enumerate(counts)]
    return np.vstack(parts), counts


def _summary(values):
    v = np.asarray(values, dtype=np.float64)
    out = {"mean": float(v.mean()), "values": [float(x) for x in v]}
    if len(v) > 1:
        out["sd"] = float(v.std(ddof=1))
    return out


@dataclass
class MetricReport:
    """Pooled and per-branch distances per model, plus weight errors and run metadata."""

    pooled: dict = field(default_factory=dict)
    per_branch: dict = field(default_factory=dict)
    weight_errors: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {"pooled": self.pooled, "per_branch": self.per_branch,
                "weight_errors": self.weight_errors, "metadata": self.metadata}

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    def rows(self):
        metrics = sorted({m for res in self.pooled.values() for m in res})
        out = []
        for model, res in self.pooled.items():
            row = {"model": model}
            for m in metrics:
                row[m] = res[m]["mean"]
                if "sd" in res[m]:
                    row[m + "_sd"] = res[m]["sd"]
            out.append(row)
        return out

    def to_csv(self, path):
        rows = self.rows()
        keys = list(dict.fromkeys(k for r in rows for k in r))
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    def table(self):
        lines = []
        for model, res in self.pooled.items():
            cells = []
            for m in sorted(res):
                s = res[m]
                cells.append(f"{m}={s['mean']:.4f}" + (f"±{s['sd']:.4f}" if "sd" in s else ""))
            lines.append(f"{model:<12s} " + "  ".join(cells))
        return "\n".join(lines)


def endpoint_metrics(pred, truth, metrics=("w1", "w2"), seed=0):
    """Selected distances between two clouds; keys follow ``metrics``."""
    out = {}
    for m in metrics:
        if m == "w1":
            out[m] = wasserstein(pred, truth, 1, seed)
        elif m == "w2":
            out[m] = wasserstein(pred, truth, 2, seed)
        elif m == "mmd":
            out[m] = rbf_mmd(pred, truth)
        else:
            raise ValueError(f"unknown metric {m!r}")
    return out


def evaluate_samples(endpoints, terminal_weights, truth, metrics=("w1", "w2"), seeds=5, base_seed=0):
    """Pooled metrics over ``seeds`` resampled pools; returns ``{metric: summary}``."""
    from .pipeline import substream

    truth = _points(truth)
    vals = {m: [] for m in metrics}
    for s in range(seeds):
        rng = substream(base_seed, "eval", s)
        pool, _ = pooled_prediction(endpoints, terminal_weights, rng)
        res = endpoint_metrics(pool, truth, metrics, seed=int(rng.integers(2 ** 31)))
        for m in metrics:
            vals[m].append(res[m])
    return {m: _summary(v) for m, v in vals.items()}


def default_metrics(d):
    return ("w1", "w2", "mmd") if d >= 10 else ("w1", "w2")


def compare(problem, bundle_branched, bundle_single, config, metric=None, seeds=5, metrics=None):
    """Branched against single-branch reconstruction of the pooled validation target.

    Both bundles are rolled out from the validation sources with the
    configured step count and noise level.
    """
    from .pipeline import substream

    if bundle_branched.d != bundle_single.d or bundle_branched.d != problem.dim:
        raise ValueError(
            f"dimension mismatch: problem {problem.dim}, branched {bundle_branched.d}, single {bundle_single.d}"
        )
    metrics = tuple(metrics or default_metrics(problem.dim))
    src = problem.source.points
    x0 = src[problem.val_src] if len(problem.val_src) else src
    truth = np.vstack([t.points for t in problem.targets])
    report = MetricReport(metadata={
        "n_val": int(len(x0)), "seeds": int(seeds), "n_steps": int(config.n_steps),
        "sigma": float(config.sigma), "metrics": list(metrics), "seed": int(config.seed),
        "target_weights": [float(w) for w in problem.target_weights],
    })
    for name, bundle in (("branched", bundle_branched), ("single", bundle_single)):
        rng = substream(config.seed, "rollout", name == "single")
        traj = rollout(bundle.flows, bundle.growths, x0, config.n_steps, config.sigma, rng, metric)
        report.pooled[name] = evaluate_samples(
            traj.endpoints, traj.terminal_weights, truth, metrics, seeds, config.seed
        )
        if name == "branched":
            learned = traj.terminal_weights.mean(axis=1)
            report.weight_errors = {
                "learned": [float(w) for w in learned],
                "abs_error": [float(abs(w - t)) for w, t in zip(learned, problem.target_weights)],
                "mass_error": float(np.max(np.abs(traj.weights.sum(axis=0) - problem.w_total))),
            }
            report.per_branch = {
                str(k): endpoint_metrics(traj.endpoints[k], problem.targets[k].points, metrics, config.seed)
                for k in range(problem.n_branches)
            }
    return report
