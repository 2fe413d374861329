"""Seeded generators for synthetic adapter collections.

Used by the demos and the test-suite; every function is a pure function of
its arguments.
"""
from __future__ import annotations

import numpy as np

from .adapter_store import AdapterCollection


def random_collection(n: int, d_B: int, d_A: int | None = None, ranks=2, seed: int = 0) -> AdapterCollection:
    """``n`` adapters with i.i.d. standard normal factors.

    ``ranks`` is a single rank or one rank per adapter.
    """
    d_A = d_B if d_A is None else d_A
    rng = np.random.default_rng(seed)
    rs = [ranks] * n if np.isscalar(ranks) else list(ranks)
    pairs = [(rng.standard_normal((d_B, r)), rng.standard_normal((r, d_A))) for r in rs]
    return AdapterCollection.from_pairs(pairs)


def random_instance(seed: int) -> tuple[AdapterCollection, int]:
    """A random small problem and a shared rank: n in [2, 16], d in [8, 32], r_i in [1, 4]."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 17))
    d = int(rng.integers(8, 33))
    ranks = rng.integers(1, 5, size=n)
    r = int(rng.integers(1, min(8, d) + 1))
    pairs = [(rng.standard_normal((d, k)), rng.standard_normal((k, d))) for k in ranks]
    return AdapterCollection.from_pairs(pairs), r


def random_orthonormal(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


def planted_families(n: int, d: int, families: int = 2, family_rank: int = 4, adapter_rank: int = 2,
                     seed: int = 0) -> tuple[AdapterCollection, np.ndarray]:
    """Adapters whose column and row spaces lie in one of ``families`` disjoint subspaces.

    Family ``f`` uses columns ``f*family_rank ... (f+1)*family_rank`` of two
    random orthogonal matrices; adapter ``i`` belongs to family ``i % families``.
    Returns the collection and the true labels.
    """
    if families * family_rank > d:
        raise ValueError("families do not fit in dimension d")
    rng = np.random.default_rng(seed)
    q = random_orthonormal(d, d, rng)
    p = random_orthonormal(d, d, rng)
    labels = np.arange(n) % families
    pairs = []
    for f in labels:
        cols = slice(f * family_rank, (f + 1) * family_rank)
        b = q[:, cols] @ rng.standard_normal((family_rank, adapter_rank))
        a = rng.standard_normal((adapter_rank, family_rank)) @ p[:, cols].T
        pairs.append((b, a))
    return AdapterCollection.from_pairs(pairs), labels


def common_component_collection(n: int, d: int, rank: int = 16, shared_rank: int = 8, noise: float = 0.3,
                                seed: int = 0) -> AdapterCollection:
    """Adapters built around one shared low-rank update.

    ``B_i = [B_0, noise * G_i]`` and ``A_i = [A_0; noise * H_i]`` with a common
    rank-``shared_rank`` pair ``(B_0, A_0)`` and private Gaussian parts.
    """
    rng = np.random.default_rng(seed)
    b0 = rng.standard_normal((d, shared_rank))
    a0 = rng.standard_normal((shared_rank, d))
    k = rank - shared_rank
    pairs = []
    for _ in range(n):
        b = np.hstack([b0, noise * rng.standard_normal((d, k))])
        a = np.vstack([a0, noise * rng.standard_normal((k, d))])
        pairs.append((b, a))
    return AdapterCollection.from_pairs(pairs)


def orthogonal_unit_collection(n: int, d: int, seed: int = 0) -> AdapterCollection:
    """``n`` rank-1 adapters ``q_j p_k^T`` that are mutually orthogonal with unit norm.

    Needs ``n <= d * d``; pairs ``(j, k)`` are taken in row-major order.
    """
    if n > d * d:
        raise ValueError("at most d^2 mutually orthogonal matrices exist")
    rng = np.random.default_rng(seed)
    q = random_orthonormal(d, d, rng)
    p = random_orthonormal(d, d, rng)
    pairs = []
    for m in range(n):
        j, k = divmod(m, d)
        pairs.append((q[:, [j]], p[:, [k]].T))
    return AdapterCollection.from_pairs(pairs)


def family_collection(n: int, d: int, families: int = 4, family_rank: int = 16, noise: float = 0.1,
                      seed: int = 0) -> tuple[AdapterCollection, np.ndarray]:
    """Families that share a common update inside disjoint subspaces.

    Adapter ``i`` of family ``f = i % families`` is ``B_i = Q_f (M_f + noise * G_i)``,
    ``A_i = P_f^T`` with ``M_f`` a random orthogonal matrix, so each family
    is exactly rank ``family_rank`` and has a flat spectrum. Returns the
    collection and the true labels.
    """
    if families * family_rank > d:
        raise ValueError("families do not fit in dimension d")
    rng = np.random.default_rng(seed)
    q = random_orthonormal(d, d, rng)
    p = random_orthonormal(d, d, rng)
    means = [random_orthonormal(family_rank, family_rank, rng) for _ in range(families)]
    labels = np.arange(n) % families
    pairs = []
    for f in labels:
        cols = slice(f * family_rank, (f + 1) * family_rank)
        core = means[f] + noise * rng.standard_normal((family_rank, family_rank))
        pairs.append((q[:, cols] @ core, p[:, cols].T))
    return AdapterCollection.from_pairs(pairs), labels
