"""Joint diagonalization of a LoRA collection.

Finds shared bases ``U`` (d_B x r), ``V`` (d_A x r) and per-adapter
``Sigma_i`` minimizing ``sum_i ||B_i A_i - U Sigma_i V^T||_F^2``, either with
orthonormal bases and full ``Sigma_i`` (``Mode.FULL``) or with free bases and
diagonal ``Sigma_i`` (``Mode.DIAG``).

All kernels work on the thin factors; no d_B x d_A matrix is ever built.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from . import _linalg as la
from .adapter_store import (AdapterCollection, CompressedCollection, CompressedGroup, Mode, Sigma,
                            normalize_collection)

ORTHO_TOL = 1e-8
DIAG_RIDGE = 1e-10
_COND_LIMIT = 1e12


class Algorithm(str, Enum):
    ALTERNATING = "alt"
    EIG_ITERATION = "eig"


@dataclass(frozen=True)
class SolveOptions:
    rank: int
    mode: Mode = Mode.FULL
    max_iters: int | None = None  # 10 for alternating, 100 for eigenvalue iteration
    tolerance: float = 1e-3
    algorithm: Algorithm = Algorithm.ALTERNATING
    seed: int = 0
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        if self.rank < 0:
            raise ValueError("rank must be nonnegative")
        if self.max_iters is None:
            object.__setattr__(self, "max_iters", 100 if self.algorithm is Algorithm.EIG_ITERATION else 10)
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be nonnegative")
        if self.mode is Mode.DIAG and self.algorithm is Algorithm.EIG_ITERATION:
            raise ValueError("eigenvalue iteration is only defined for full sigmas")


@dataclass
class SolveReport:
    """Per-iteration record of a solve.

    ``objective_trace[0]`` is the objective at initialization and entry ``t``
    the objective after iteration ``t``. For DIAG solves ``substep_trace``
    holds ``(stage, objective)`` after every U, V and Sigma sub-solve.
    """
    objective_trace: list[float] = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False
    final_subspace_delta: float = float("inf")
    substep_trace: list[tuple[str, float]] = field(default_factory=list)
    norms: dict[str, float] = field(default_factory=dict)


@dataclass
class JDState:
    """Iterate of the solvers. ``sigmas`` is None while implicit (FULL mode)."""
    u: np.ndarray
    v: np.ndarray
    pairs: Sequence[tuple[np.ndarray, np.ndarray]]
    sigmas: list[np.ndarray] | None = None


def _pairs(adapters) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(adapters, AdapterCollection):
        return adapters.pairs
    out = []
    for item in adapters:
        if hasattr(item, "b"):
            out.append((item.b, item.a))
        else:
            b, a = item
            out.append((np.asarray(b, float), np.asarray(a, float)))
    return out


def _sigma_matrix(s) -> np.ndarray:
    if isinstance(s, Sigma):
        return s.matrix()
    s = np.asarray(s, dtype=np.float64)
    return np.diag(s) if s.ndim == 1 else s


def _sigma_list(sigmas, ids=None) -> list[np.ndarray]:
    if isinstance(sigmas, dict):
        return [_sigma_matrix(sigmas[i]) for i in ids]
    return [_sigma_matrix(s) for s in sigmas]


def objective(adapters, u: np.ndarray, v: np.ndarray, sigmas) -> float:
    """``sum_i ||B_i A_i - U Sigma_i V^T||_F^2``.

    ``sigmas`` may be a sequence of r x r matrices, length-r vectors (read as
    diagonals), :class:`Sigma` objects, or a dict keyed by adapter id.
    """
    ids = adapters.ids if isinstance(adapters, AdapterCollection) else None
    pairs = _pairs(adapters)
    sig = _sigma_list(sigmas, ids)
    if len(sig) != len(pairs):
        raise ValueError(f"{len(sig)} sigmas for {len(pairs)} adapters")
    r = u.shape[1]
    if v.shape[1] != r:
        raise ValueError("U and V must have the same number of columns")
    total = 0.0
    for (b, a), s in zip(pairs, sig):
        if s.shape != (r, r):
            raise ValueError(f"sigma shape {s.shape} does not match rank {r}")
        if b.shape[0] != u.shape[0] or a.shape[1] != v.shape[0]:
            raise ValueError("basis dimensions do not match the adapters")
        total += la.lowrank_residual_sq(b, a, u, s, v)
    return total


def objective_gradients(adapters, u: np.ndarray, v: np.ndarray, sigmas):
    """Analytic gradients of the objective with respect to U, V and each Sigma_i.

    Returns ``(grad_u, grad_v, [grad_sigma_i])``; the Sigma gradients are full
    r x r matrices (take the diagonal for the DIAG parameterization).
    """
    pairs = _pairs(adapters)
    ids = adapters.ids if isinstance(adapters, AdapterCollection) else None
    sig = _sigma_list(sigmas, ids)
    utu, vtv = u.T @ u, v.T @ v
    gu = np.zeros_like(u)
    gv = np.zeros_like(v)
    gs = []
    for (b, a), s in zip(pairs, sig):
        av = a @ v          # r_i x r
        btu = b.T @ u       # r_i x r
        # (U S V^T - B A) V S^T
        gu += u @ s @ vtv @ s.T - b @ (av @ s.T)
        # (V S^T U^T - A^T B^T) U S
        gv += v @ s.T @ utu @ s - a.T @ (btu @ s)
        # U^T (U S V^T - B A) V
        gs.append(2 * (utu @ s @ vtv - btu.T @ av))
    return 2 * gu, 2 * gv, gs


def _check_orthonormal(m: np.ndarray, name: str) -> None:
    err = np.linalg.norm(m.T @ m - np.eye(m.shape[1]))
    if err > ORTHO_TOL:
        raise ValueError(f"{name} is not orthonormal (||{name}^T {name} - I||_F = {err:.3g})")


def optimal_sigma_full(u: np.ndarray, v: np.ndarray, adapter) -> Sigma:
    """Best full Sigma for fixed orthonormal bases: ``U^T B A V``."""
    _check_orthonormal(u, "U")
    _check_orthonormal(v, "V")
    b, a = (adapter.b, adapter.a) if hasattr(adapter, "b") else adapter
    return Sigma(Mode.FULL, (u.T @ b) @ (a @ v))


def _full_sigmas(state: JDState) -> list[np.ndarray]:
    return [(state.u.T @ b) @ (a @ state.v) for b, a in state.pairs]


def jd_full_step(state: JDState) -> JDState:
    """One alternating sweep for orthonormal bases: U then V.

    Each update takes the top-r eigenvectors of ``sum_i B_i A_i V V^T A_i^T B_i^T``
    (resp. the V analogue) as left singular vectors of the stacked factor
    ``[B_1 (A_1 V), ..., B_n (A_n V)]``.
    """
    r = state.u.shape[1]
    wu = np.hstack([b @ (a @ state.v) for b, a in state.pairs])
    u = la.top_left_singular(wu, r)
    wv = np.hstack([a.T @ (b.T @ u) for b, a in state.pairs])
    v = la.top_left_singular(wv, r)
    return replace(state, u=u, v=v, sigmas=None)


def _solve_normal(g: np.ndarray, rhs: np.ndarray) -> np.ndarray | None:
    """Solve ``X g = rhs`` for symmetric PSD ``g``; None when ``g`` vanishes."""
    r = g.shape[0]
    scale = np.trace(g) / max(r, 1)
    if r == 0 or scale <= 0:
        return None
    if np.linalg.cond(g) > _COND_LIMIT:
        g = g + DIAG_RIDGE * scale * np.eye(r)
    try:
        return np.linalg.solve(g, rhs.T).T
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("singular normal matrix in diagonal update") from None


def diag_sigma_update(u: np.ndarray, v: np.ndarray, pairs) -> list[np.ndarray]:
    """Least-squares diagonal Sigma_i for fixed U, V (Hadamard normal equations)."""
    r = u.shape[1]
    h = (u.T @ u) * (v.T @ v)
    out = []
    for b, a in pairs:
        rhs = np.sum((u.T @ b) * (v.T @ a.T), axis=1)
        sol = _solve_normal(h, rhs[None, :])
        out.append(np.zeros(r) if sol is None else sol[0])
    return out


def jd_diag_step(state: JDState, callback: Callable[[str, JDState], None] | None = None,
                 rescale: bool = True) -> JDState:
    """One coordinate-descent cycle for diagonal sigmas: U, V, Sigma, then rescale.

    ``callback(stage, state)`` runs after each of the three sub-solves.
    """
    pairs = state.pairs
    sig = state.sigmas
    u, v = state.u, state.v

    # U <- (sum B A V S) (sum S V^T V S)^-1
    vtv = v.T @ v
    g = sum(np.outer(s, s) * vtv for s in sig)
    rhs = sum(b @ (a @ v) * s for (b, a), s in zip(pairs, sig))
    new = _solve_normal(g, rhs)
    if new is not None:
        u = new
    state = replace(state, u=u)
    if callback:
        callback("U", state)

    # V <- (sum A^T B^T U S) (sum S U^T U S)^-1
    utu = u.T @ u
    g = sum(np.outer(s, s) * utu for s in sig)
    rhs = sum(a.T @ (b.T @ u) * s for (b, a), s in zip(pairs, sig))
    new = _solve_normal(g, rhs)
    if new is not None:
        v = new
    state = replace(state, v=v)
    if callback:
        callback("V", state)

    sig = diag_sigma_update(u, v, pairs)
    state = replace(state, sigmas=sig)
    if callback:
        callback("Sigma", state)

    if rescale:
        scale = np.sqrt(sum(float(s @ s) for s in sig))
        if scale > 0:
            state = replace(state, u=u * scale, sigmas=[s / scale for s in sig])
    return state


def eig_iteration_step(state: JDState) -> JDState:
    """One simultaneous eigenvalue-iteration update of both bases.

    ``U0 = sum_i B_i (A_i V)(V^T A_i^T)(B_i^T U)`` and the V analogue, each
    followed by a thin-QR orthonormalization.
    """
    u, v = state.u, state.v
    u0 = np.zeros_like(u)
    v0 = np.zeros_like(v)
    for b, a in state.pairs:
        av = a @ v
        btu = b.T @ u
        u0 += b @ (av @ (av.T @ btu))
        v0 += a.T @ (btu @ (btu.T @ av))
    return replace(state, u=la.orthonormalize(u0), v=la.orthonormalize(v0), sigmas=None)


def subspace_delta(old: np.ndarray, new: np.ndarray) -> float:
    """``||new - Q Q^T new||_F / ||new||_F`` with Q an orthonormal basis of ``old``."""
    nn = np.linalg.norm(new)
    if nn == 0:
        return 0.0
    q = old if _is_orthonormal(old) else np.linalg.qr(old)[0]
    return float(np.linalg.norm(new - q @ (q.T @ new)) / nn)


def _is_orthonormal(m: np.ndarray) -> bool:
    return np.linalg.norm(m.T @ m - np.eye(m.shape[1])) < ORTHO_TOL


def initial_bases(pairs, r: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Top singular subspaces of ``sum_i B_i A_i A_i^T B_i^T`` and ``sum_i A_i^T B_i^T B_i A_i``.

    These are the column and row spaces that carry most of the collection's
    energy, computed from thin factors only.

    A single adapter starts from its exact truncated SVD. Rank-deficient
    stacks are completed with seeded random orthonormal columns.
    """
    rng = np.random.default_rng(seed)
    if len(pairs) == 1:
        b, a = pairs[0]
        uu, s, vv = la.thin_svd(b, a)
        keep = min(r, int(np.sum(s > la.RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0)
        signs = la.column_signs(uu[:, :keep])
        u = la.complete_basis(uu[:, :keep] * signs, r, rng)
        v = la.complete_basis(vv[:, :keep] * signs, r, rng)
        return u, v
    # B A A^T B^T = (B R_a^T)(B R_a^T)^T with A^T = Q_a R_a, and likewise for V
    wu = np.hstack([b @ np.linalg.qr(a.T, mode="r").T for b, a in pairs])
    wv = np.hstack([a.T @ np.linalg.qr(b, mode="r").T for b, a in pairs])
    return la.top_left_singular(wu, r, rng), la.top_left_singular(wv, r, rng)


def solve(adapters: AdapterCollection, opts: SolveOptions,
          init: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[CompressedGroup, SolveReport]:
    """Compress a collection into one shared-basis group.

    ``init`` warm-starts from given bases. With ``opts.normalize`` the
    adapters are scaled to unit norm first; the returned sigmas are then on
    the unit scale and ``report.norms`` holds the original norms.
    """
    n = len(adapters)
    if n < 1:
        raise ValueError("need at least one adapter")
    r = opts.rank
    if r > min(adapters.d_A, adapters.d_B):
        raise ValueError(f"rank {r} exceeds min(d_A, d_B) = {min(adapters.d_A, adapters.d_B)}")
    report = SolveReport()
    if opts.normalize:
        adapters = normalize_collection(adapters)
        report.norms = {ad.id: ad.original_norm for ad in adapters}
    pairs = adapters.pairs

    if init is not None and n > 1:
        u, v = (np.array(m, dtype=np.float64) for m in init)
        if u.shape != (adapters.d_B, r) or v.shape != (adapters.d_A, r):
            raise ValueError("warm-start bases have the wrong shape")
        if opts.mode is Mode.FULL:
            u, v = la.orthonormalize(u), la.orthonormalize(v)
    else:
        u, v = initial_bases(pairs, r, opts.seed)
    state = JDState(u, v, pairs)

    if opts.mode is Mode.DIAG:
        state.sigmas = diag_sigma_update(u, v, pairs)

        def current(st):
            return objective(pairs, st.u, st.v, st.sigmas)

        def record(stage, st):
            report.substep_trace.append((stage, current(st)))

        step = lambda st: jd_diag_step(st, callback=record)  # noqa: E731
    else:
        def current(st):
            return objective(pairs, st.u, st.v, _full_sigmas(st))

        step = jd_full_step if opts.algorithm is Algorithm.ALTERNATING else eig_iteration_step

    report.objective_trace.append(current(state))
    for _ in range(opts.max_iters):
        new = step(state)
        delta = max(subspace_delta(state.u, new.u), subspace_delta(state.v, new.v))
        state = new
        report.iterations_run += 1
        report.objective_trace.append(current(state))
        report.final_subspace_delta = delta
        if delta < opts.tolerance:
            report.converged = True
            break

    ids = adapters.ids
    if opts.mode is Mode.FULL:
        u, v = _canonical_signs(state.u, state.v, _full_sigmas(state))
        sig = {i: optimal_sigma_full(u, v, p) for i, p in zip(ids, pairs)}
    else:
        su, sv = _sign_flips(state.u, [np.diag(s) for s in state.sigmas])
        u, v = state.u * su, state.v * sv
        sig = {i: Sigma(Mode.DIAG, s * su * sv) for i, s in zip(ids, state.sigmas)}
    return CompressedGroup(u, v, sig), report


def _sign_flips(u: np.ndarray, sigmas: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Column signs for U (largest entry positive) and V (summed Sigma diagonal nonnegative)."""
    su = la.column_signs(u)
    diag = sum((np.diag(s) for s in sigmas), np.zeros(u.shape[1])) * su
    sv = np.where(diag < 0, -1.0, 1.0)
    return su, sv


def _canonical_signs(u, v, sigmas):
    su, sv = _sign_flips(u, sigmas)
    return u * su, v * sv


def compress(adapters: AdapterCollection, opts: SolveOptions) -> tuple[CompressedCollection, SolveReport]:
    """:func:`solve` wrapped into a single-group :class:`CompressedCollection`."""
    group, report = solve(adapters, opts)
    norms = report.norms if opts.normalize else {ad.id: ad.original_norm for ad in adapters}
    return CompressedCollection((group,), {i: 0 for i in adapters.ids}, opts.mode, norms,
                                normalized=opts.normalize), report
