"""Reconstruction metrics, the per-adapter SVD baseline, bound checks and
parameter / memory accounting.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _linalg as la
from .adapter_store import AdapterCollection, CompressedCollection, CompressedGroup, Mode, Sigma

BASELINE_RANK = 16


def truncated_svd(adapter, r: int):
    """Best rank-``r`` approximation of ``B A`` as ``(U, s, V)``.

    Works on the QR cores of the factors. When ``r`` exceeds the adapter rank
    the spectrum is padded with zeros and the bases are completed
    deterministically, so the outputs always have ``r`` columns.
    """
    if r < 0:
        raise ValueError("rank must be nonnegative")
    b, a = (adapter.b, adapter.a) if hasattr(adapter, "b") else adapter
    if r > min(b.shape[0], a.shape[1]):
        raise ValueError(f"rank {r} exceeds the adapter's dimensions")
    u, s, v = la.thin_svd(b, a)
    k = min(r, s.size)
    signs = la.column_signs(u[:, :k])
    u, s, v = u[:, :k] * signs, s[:k], v[:, :k] * signs
    if k < r:
        u = la.complete_basis(u, r)
        v = la.complete_basis(v, r)
        s = np.concatenate([s, np.zeros(r - k)])
    return u, s, v


def svd_compress(adapters: AdapterCollection, r: int, normalize: bool = True) -> CompressedCollection:
    """Independent rank-``r`` SVD of every adapter (one group per adapter)."""
    groups, assignment, norms = [], {}, {}
    for j, ad in enumerate(adapters):
        scale = ad.norm if normalize else 1.0
        if scale == 0:
            raise ValueError(f"adapter {ad.id!r} has zero norm and cannot be normalized")
        u, s, v = truncated_svd(ad, r)
        groups.append(CompressedGroup(u, v, {ad.id: Sigma(Mode.DIAG, s / scale)}))
        assignment[ad.id] = j
        norms[ad.id] = ad.original_norm
    return CompressedCollection(tuple(groups), assignment, Mode.DIAG, norms, normalized=normalize,
                                method="svd")


def relative_recon_error(adapters: AdapterCollection, compressed: CompressedCollection):
    """Per-adapter ``||U S_i V^T - B_i A_i||_F / ||B_i A_i||_F`` and the unweighted mean.

    Both sides are brought to the original (pre-normalization) scale.
    """
    per = {}
    for ad in adapters:
        if ad.id not in compressed.assignment:
            raise KeyError(f"adapter {ad.id!r} missing from the compressed collection")
        cur = ad.norm
        if cur == 0:
            raise ValueError(f"adapter {ad.id!r} has zero norm; relative error undefined")
        alpha = ad.restore_scale()
        g = compressed.group_of(ad.id)
        s = compressed.sigma(ad.id, original_scale=True).matrix()
        res = la.lowrank_residual_sq(ad.b * alpha, ad.a, g.u, s, g.v)
        per[ad.id] = float(np.sqrt(res) / (cur * alpha))
    return per, float(np.mean(list(per.values())))


def minimal_lossless_rank(adapters: AdapterCollection) -> int:
    """Smallest shared rank with zero JD-Full error: max rank of the stacked A's and B's."""
    a_stack = np.vstack([ad.a for ad in adapters])
    b_stack = np.hstack([ad.b for ad in adapters])
    return max(la.numerical_rank(a_stack), la.numerical_rank(b_stack))


def product_gram(adapters) -> np.ndarray:
    """n x n matrix of ``tr((B_i A_i)(B_j A_j)^T)`` from the thin factors."""
    pairs = adapters.pairs if isinstance(adapters, AdapterCollection) else list(adapters)
    n = len(pairs)
    g = np.empty((n, n))
    for i, (bi, ai) in enumerate(pairs):
        for j in range(i, n):
            bj, aj = pairs[j]
            g[i, j] = g[j, i] = np.sum((bj.T @ bi) * (aj @ ai.T))
    return g


@dataclass(frozen=True)
class BoundsReport:
    """Sandwich bounds on ``sum_i ||Sigma_i||_F^2`` for a JD-Full solution.

    ``lower`` is the top-r energy of the merged adapter ``sum_i B_i A_i`` as
    stated in the literature; it is not a valid lower bound once the adapters
    are correlated (n identical adapters give n^2 times the captured energy).
    ``lower_corrected = lower / n`` follows from Cauchy-Schwarz and is the
    bound that :meth:`holds` checks.
    """
    lower: float
    lower_corrected: float
    achieved: float
    upper: float
    total_energy: float
    rank: int
    n: int

    def violations(self, rtol: float = 1e-8, use_corrected: bool = True) -> list[str]:
        tol = rtol * max(self.total_energy, 1e-300)
        lo = self.lower_corrected if use_corrected else self.lower
        out = []
        if lo > self.achieved + tol:
            out.append("lower > achieved")
        if self.achieved > self.upper + tol:
            out.append("achieved > upper")
        if self.upper > self.total_energy + tol:
            out.append("upper > total_energy")
        return out

    def holds(self, rtol: float = 1e-8, use_corrected: bool = True) -> bool:
        return not self.violations(rtol, use_corrected)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("lower", "lower_corrected", "achieved", "upper", "total_energy", "rank", "n")}


def theorem_bounds(adapters, group: CompressedGroup) -> BoundsReport:
    """Evaluate the bounds for a FULL-mode group on the adapters' own scale."""
    pairs = adapters.pairs if isinstance(adapters, AdapterCollection) else list(adapters)
    ids = adapters.ids if isinstance(adapters, AdapterCollection) else list(group.sigmas)
    n, r = len(pairs), group.rank
    gram = product_gram(pairs)
    sig2 = np.clip(np.linalg.eigvalsh(gram)[::-1], 0.0, None)
    b_all = np.hstack([b for b, _ in pairs])
    a_all = np.vstack([a for _, a in pairs])
    _, merged, _ = la.thin_svd(b_all, a_all)
    lower = float(np.sum(merged[:r] ** 2))
    upper = float(np.sum(sig2[:min(r * r, n)]))
    achieved = float(sum(np.sum(group.sigmas[i].matrix() ** 2) for i in ids))
    return BoundsReport(lower=lower, lower_corrected=lower / n, achieved=achieved, upper=upper,
                        total_energy=float(np.trace(gram)), rank=r, n=n)


# ----------------------------------------------------------- accounting

class Setting(str, Enum):
    BASELINE16 = "baseline16"
    JD_FULL = "jd_full"
    JD_DIAG = "jd_diag"
    SVD = "svd"
    CLUSTERED = "clustered"


@dataclass(frozen=True)
class CompressionSetting:
    """Shape-only description of a compressed collection for one layer module.

    ``hidden_dim`` is D with d_A = d_B = D unless given explicitly.
    ``diagonal`` switches the clustered count to length-r sigmas.
    """
    mode: Setting
    adapter_count: int
    hidden_dim: int
    rank: int = BASELINE_RANK
    clusters: int = 1
    d_A: int | None = None
    d_B: int | None = None
    diagonal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Setting(self.mode))
        if self.mode is Setting.BASELINE16:
            object.__setattr__(self, "rank", BASELINE_RANK)
        for name in ("adapter_count", "hidden_dim", "rank", "clusters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    @property
    def dims(self) -> int:
        """d_A + d_B (2 D for square layers)."""
        return (self.d_A or self.hidden_dim) + (self.d_B or self.hidden_dim)


def param_count(s: CompressionSetting) -> int:
    dims, r, n, c = s.dims, s.rank, s.adapter_count, s.clusters
    if s.mode is Setting.BASELINE16:
        return n * dims * BASELINE_RANK
    if s.mode is Setting.SVD:
        return r * n * dims
    if s.mode is Setting.JD_DIAG:
        return dims * r + n * r
    if s.mode is Setting.JD_FULL:
        return dims * r + n * r * r
    per = r if s.diagonal else r * r
    return dims * r * c + n * (per + 1)


def saved_ratio(s: CompressionSetting, original: CompressionSetting | None = None) -> float:
    """``1 - compressed / original``; the default original is rank-16 LoRA of the same N and D."""
    if original is None:
        original = CompressionSetting(Setting.BASELINE16, s.adapter_count, s.hidden_dim,
                                      d_A=s.d_A, d_B=s.d_B)
    return 1.0 - param_count(s) / param_count(original)


def gpu_usage_ratio(s: CompressionSetting) -> float:
    """Parameters relative to one rank-16 LoRA; equals the matched baseline adapter count."""
    return param_count(s) / (s.dims * BASELINE_RANK)


def setting_for(compressed: CompressedCollection, d_A: int, d_B: int) -> CompressionSetting:
    """Describe an existing artifact for the accounting functions."""
    n = len(compressed.assignment)
    r = max(g.rank for g in compressed.groups)
    base = dict(adapter_count=n, hidden_dim=max(d_A, d_B), rank=max(r, 1), d_A=d_A, d_B=d_B)
    if compressed.method == "svd":
        return CompressionSetting(Setting.SVD, **base)
    k = len(compressed.groups)
    if k > 1:
        return CompressionSetting(Setting.CLUSTERED, clusters=k, diagonal=compressed.mode is Mode.DIAG, **base)
    mode = Setting.JD_FULL if compressed.mode is Mode.FULL else Setting.JD_DIAG
    return CompressionSetting(mode, **base)
