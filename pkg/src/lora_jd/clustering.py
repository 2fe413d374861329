"""Clustered joint diagonalization for large adapter collections.

Alternates between a JD solve per cluster (warm-started from the previous
bases) and reassigning every adapter to the cluster whose bases reconstruct
it best. Initial clusters come from k-means on the ``vec(Sigma_i)`` of one
global JD-Full solve.
"""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _linalg as la
from .adapter_store import (AdapterCollection, CompressedCollection, CompressedGroup, Mode, Sigma,
                            normalize_collection)
from .jd_core import SolveOptions, diag_sigma_update, optimal_sigma_full, solve


@dataclass(frozen=True)
class ClusterOptions:
    k: int
    per_cluster: SolveOptions
    max_outer_iters: int = 20
    kmeans_iters: int = 50
    seed: int = 0
    workers: int = 1
    n_init: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.max_outer_iters < 1 or self.kmeans_iters < 1 or self.n_init < 1:
            raise ValueError("iteration counts must be positive")


@dataclass
class ClusterReport:
    outer_iterations: int = 0
    total_objective_trace: list[float] = field(default_factory=list)
    assignment_history_hash: str = ""
    converged: bool = False
    assignment_history: list[list[int]] = field(default_factory=list)


def kmeans(points: np.ndarray, k: int, iters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; returns labels.

    Empty clusters are refilled with the point farthest from its centroid
    (taken from a cluster with more than one member). Ties go to the lowest
    index.
    """
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = [int(rng.integers(n))]
    d2 = np.sum((points - points[centers[0]]) ** 2, axis=1)
    while len(centers) < k:
        free = np.setdiff1d(np.arange(n), centers)
        w = d2[free]
        if w.sum() > 0:
            pick = int(free[rng.choice(free.size, p=w / w.sum())])
        else:
            pick = int(free[rng.integers(free.size)])
        centers.append(pick)
        d2 = np.minimum(d2, np.sum((points - points[pick]) ** 2, axis=1))
    c = points[centers].copy()

    labels = None
    for _ in range(iters):
        dist = np.sum((points[:, None, :] - c[None, :, :]) ** 2, axis=2)
        new = np.argmin(dist, axis=1)
        new = _refill_empty(new, dist[np.arange(n), new], k)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        c = np.stack([points[labels == j].mean(axis=0) for j in range(k)])
    return labels


def _refill_empty(labels: np.ndarray, cost: np.ndarray, k: int) -> np.ndarray:
    """Move the worst-served adapter into each empty cluster."""
    labels = labels.copy()
    cost = cost.astype(float).copy()
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        movable = counts[labels] > 1
        cand = np.where(movable, cost, -np.inf)
        worst = int(np.argmax(cand))
        labels[worst] = j
        cost[worst] = -np.inf
    return labels


def init_clusters(adapters: AdapterCollection, opts: ClusterOptions) -> np.ndarray:
    """k-means labels on ``vec(Sigma_i)`` from a single-group JD-Full solve."""
    n = len(adapters)
    if opts.k > n:
        raise ValueError(f"k={opts.k} exceeds the number of adapters ({n})")
    if opts.k == 1:
        return np.zeros(n, dtype=int)
    base = replace(opts.per_cluster, mode=Mode.FULL)
    group, _ = solve(adapters, base)
    emb = np.stack([group.sigmas[i].matrix().ravel() for i in adapters.ids])
    return kmeans(emb, opts.k, opts.kmeans_iters, opts.seed)


def _errors(adapters: AdapterCollection, groups: list[CompressedGroup], mode: Mode) -> np.ndarray:
    """n x k matrix of best-Sigma reconstruction errors; +inf for unusable groups."""
    n, k = len(adapters), len(groups)
    err = np.full((n, k), np.inf)
    for j, g in enumerate(groups):
        if g is None:
            continue
        for i, (b, a) in enumerate(adapters.pairs):
            if mode is Mode.FULL:
                s = (g.u.T @ b) @ (a @ g.v)
            else:
                s = np.diag(diag_sigma_update(g.u, g.v, [(b, a)])[0])
            err[i, j] = la.lowrank_residual_sq(b, a, g.u, s, g.v)
    return err


def assign_step(adapters: AdapterCollection, groups: list[CompressedGroup], mode: Mode = Mode.FULL) -> np.ndarray:
    """Assign each adapter to the group with the smallest best-Sigma error (lowest index on ties).

    FULL groups must have orthonormal bases, for which the best Sigma is
    ``U^T B A V`` and minimizing error equals maximizing ``||U^T B A V||_F``.
    """
    return np.argmin(_errors(adapters, groups, mode), axis=1)


def _hash(history: list[list[int]]) -> str:
    h = hashlib.sha256()
    for labels in history:
        h.update(np.asarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


def cluster_solve(adapters: AdapterCollection, opts: ClusterOptions) -> tuple[CompressedCollection, ClusterReport]:
    """Alternate per-cluster JD solves and reassignment until labels settle.

    The whole alternation is repeated for ``n_init`` k-means seeds
    (``seed, seed + 1, ...``) and the run with the lowest final objective is
    kept; the first run wins ties. With ``k == 1`` there is nothing to restart.
    """
    starts = 1 if opts.k == 1 else opts.n_init
    best = None
    for t in range(starts):
        out = _cluster_once(adapters, replace(opts, seed=opts.seed + t))
        if best is None or out[1].total_objective_trace[-1] < best[1].total_objective_trace[-1]:
            best = out
    return best


def _cluster_once(adapters: AdapterCollection, opts: ClusterOptions):
    per = opts.per_cluster
    norms = {ad.id: ad.original_norm for ad in adapters}
    work = normalize_collection(adapters) if per.normalize else adapters
    inner = replace(per, normalize=False)
    ids = work.ids
    k = opts.k

    labels = init_clusters(work, opts)
    report = ClusterReport()
    bases: list[tuple[np.ndarray, np.ndarray] | None] = [None] * k
    groups: list[CompressedGroup] = []

    def run(j):
        members = [ids[i] for i in np.flatnonzero(labels == j)]
        return solve(work.subset(members), inner, init=bases[j])[0]

    for _ in range(opts.max_outer_iters):
        report.assignment_history.append(labels.tolist())
        if opts.workers > 1 and k > 1:
            with ThreadPoolExecutor(max_workers=opts.workers) as pool:
                groups = list(pool.map(run, range(k)))
        else:
            groups = [run(j) for j in range(k)]
        bases = [(g.u, g.v) for g in groups]
        report.outer_iterations += 1
        report.total_objective_trace.append(_total(work, groups, labels, ids))

        err = _errors(work, groups, per.mode)
        new = np.argmin(err, axis=1)
        new = _refill_empty(new, err[np.arange(len(ids)), new], k)
        if np.array_equal(new, labels):
            report.converged = True
            break
        labels = new
    else:
        # budget exhausted right after a reassignment: refit sigmas to the new labels
        groups = _refit_sigmas(work, groups, labels, per.mode)

    report.assignment_history_hash = _hash(report.assignment_history)
    assignment = {i: int(labels[n]) for n, i in enumerate(ids)}
    return CompressedCollection(tuple(groups), assignment, per.mode, norms, normalized=per.normalize), report


def _total(work, groups, labels, ids) -> float:
    total = 0.0
    for n, (b, a) in enumerate(work.pairs):
        g = groups[labels[n]]
        total += la.lowrank_residual_sq(b, a, g.u, g.sigmas[ids[n]].matrix(), g.v)
    return total


def _refit_sigmas(work, groups, labels, mode):
    out = []
    for j, g in enumerate(groups):
        sig = {}
        for n in np.flatnonzero(labels == j):
            ad = work[n]
            if mode is Mode.FULL:
                sig[ad.id] = optimal_sigma_full(g.u, g.v, ad)
            else:
                sig[ad.id] = Sigma(Mode.DIAG, diag_sigma_update(g.u, g.v, [(ad.b, ad.a)])[0])
        out.append(CompressedGroup(g.u, g.v, sig))
    return out
