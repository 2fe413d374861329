"""Applying compressed adapters to a batch of activations.

The compressed path never runs a per-row matrix product against a d x r
factor: ``V^T x`` and ``U t`` are shared across every row of a group and only
the small ``Sigma`` step is per-row (an elementwise scale for diagonal
sigmas, an r x r product for full ones).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter_store import CompressedCollection, Mode


@dataclass(frozen=True)
class Batch:
    x: np.ndarray               # b x l x d_A
    adapter_ids: Sequence[str]  # length b

    def __post_init__(self):
        x = np.asarray(self.x)
        if x.ndim != 3:
            raise ValueError(f"activations must be b x l x d, got shape {x.shape}")
        if len(self.adapter_ids) != x.shape[0] or x.shape[0] < 1:
            raise ValueError("need one adapter id per batch row")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "adapter_ids", list(self.adapter_ids))


def _check(batch: Batch, collection: CompressedCollection, base_output):
    for i in batch.adapter_ids:
        if i not in collection.assignment:
            raise KeyError(f"unknown adapter id {i!r}")
    g0 = collection.groups[0]
    d_A, d_B = g0.v.shape[0], g0.u.shape[0]
    b, l, d = batch.x.shape
    if d != d_A:
        raise ValueError(f"activation width {d} does not match d_A={d_A}")
    if base_output is not None and np.shape(base_output) != (b, l, d_B):
        raise ValueError(f"base_output must have shape {(b, l, d_B)}")
    return d_B


def _rows_by_group(batch: Batch, collection: CompressedCollection) -> dict[int, np.ndarray]:
    groups: dict[int, list[int]] = {}
    for row, id_ in enumerate(batch.adapter_ids):
        groups.setdefault(collection.assignment[id_], []).append(row)
    return {j: np.asarray(rows) for j, rows in sorted(groups.items())}


def forward_compressed(batch: Batch, collection: CompressedCollection, base_output=None,
                       dtype=np.float32, ops: list | None = None) -> np.ndarray:
    """``y_row = U Sigma_id V^T x_row (+ base)`` for every row, grouped by cluster.

    ``ops``, when given, receives one ``(name, kind, shape)`` record per
    array operation; ``kind`` is ``"shared"`` for products with a shared
    factor and ``"per_row"`` for anything that differs between rows.
    """
    d_B = _check(batch, collection, base_output)
    b, l, _ = batch.x.shape
    x = batch.x.astype(dtype, copy=False)
    y = np.zeros((b, l, d_B), dtype=dtype)
    for j, rows in _rows_by_group(batch, collection).items():
        g = collection.groups[j]
        u, v = g.u.astype(dtype), g.v.astype(dtype)
        r = g.rank
        ids = [batch.adapter_ids[i] for i in rows]
        t1 = x[rows] @ v
        if ops is not None:
            ops.append(("x@V", "shared", v.shape))
        if collection.mode is Mode.DIAG:
            s = np.stack([collection.sigma(i).values for i in ids]).astype(dtype)
            t2 = t1 * s[:, None, :]
            if ops is not None:
                ops.append(("scale", "per_row", (len(rows), r)))
        else:
            s = np.stack([collection.sigma(i).values for i in ids]).astype(dtype)
            t2 = np.einsum("blr,bqr->blq", t1, s)
            if ops is not None:
                ops.append(("sigma", "per_row", (len(rows), r, r)))
        y[rows] = t2 @ u.T
        if ops is not None:
            ops.append(("t@U^T", "shared", u.shape))
    if base_output is not None:
        y += np.asarray(base_output, dtype=dtype)
    return y


def forward_dense_reference(batch: Batch, collection: CompressedCollection, base_output=None) -> np.ndarray:
    """Float64 oracle: materialize each row's d_B x d_A update and apply it."""
    d_B = _check(batch, collection, base_output)
    b, l, _ = batch.x.shape
    x = batch.x.astype(np.float64)
    y = np.zeros((b, l, d_B))
    for row, id_ in enumerate(batch.adapter_ids):
        w = collection.reconstruct(id_)
        y[row] = x[row] @ w.T
    if base_output is not None:
        y += np.asarray(base_output, dtype=np.float64)
    return y


def flop_estimate(batch: Batch, collection: CompressedCollection, lora_rank: int = 16) -> dict:
    """Multiply counts of the compressed path and of a per-row BMM LoRA of rank ``lora_rank``."""
    b, l, d_A = batch.x.shape
    d_B = collection.groups[0].u.shape[0]
    shared_v = shared_u = sigma = 0
    for j, rows in _rows_by_group(batch, collection).items():
        r = collection.groups[j].rank
        m = len(rows) * l
        shared_v += m * d_A * r
        shared_u += m * d_B * r
        sigma += m * (r if collection.mode is Mode.DIAG else r * r)
    return {
        "shared_v": shared_v,
        "sigma": sigma,
        "shared_u": shared_u,
        "compressed_total": shared_v + sigma + shared_u,
        "bmm_total": b * l * lora_rank * (d_A + d_B),
    }
