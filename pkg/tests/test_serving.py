import numpy as np
import pytest
from conftest import rand_orth

from lora_jd import (Batch, CompressedCollection, CompressedGroup, Mode, Sigma, flop_estimate, forward_compressed,
                     forward_dense_reference)


def make_collection(mode, groups=3, per=4, d_A=32, d_B=24, r=5, seed=0):
    rng = np.random.default_rng(seed)
    gs, assign = [], {}
    for j in range(groups):
        u, v = rng.standard_normal((d_B, r)), rng.standard_normal((d_A, r))
        shape = (r, r) if mode is Mode.FULL else (r,)
        sig = {f"g{j}a{k}": Sigma(mode, rng.standard_normal(shape)) for k in range(per)}
        gs.append(CompressedGroup(u, v, sig))
        assign.update({i: j for i in sig})
    norms = {i: 1.0 + k for k, i in enumerate(assign)}
    return CompressedCollection(tuple(gs), assign, mode, norms, normalized=True)


def random_batch(col, b=16, l=4, seed=1):
    rng = np.random.default_rng(seed)
    ids = [col.ids[k] for k in rng.integers(len(col.ids), size=b)]
    return Batch(rng.standard_normal((b, l, col.groups[0].v.shape[0])), ids)


def einsum_oracle(batch, col):
    # independent of both code paths: explicit per-row U S V^T x
    out = []
    for row, i in enumerate(batch.adapter_ids):
        g = col.group_of(i)
        s = col.sigma(i).matrix()
        out.append(np.einsum("dr,rq,eq,le->ld", g.u, s, g.v, batch.x[row]))
    return np.stack(out)


@pytest.mark.parametrize("mode", [Mode.FULL, Mode.DIAG])
def test_compressed_matches_dense_float64(mode):
    col = make_collection(mode)
    batch = random_batch(col)
    ref = forward_dense_reference(batch, col)
    got = forward_compressed(batch, col, dtype=np.float64)
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-8
    np.testing.assert_allclose(ref, einsum_oracle(batch, col), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("mode", [Mode.FULL, Mode.DIAG])
def test_float32_path_close(mode):
    col = make_collection(mode, seed=2)
    batch = random_batch(col, seed=3)
    ref = forward_dense_reference(batch, col)
    got = forward_compressed(batch, col)
    assert got.dtype == np.float32
    assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-4


def test_zero_sigma_returns_base():
    rng = np.random.default_rng(4)
    g = CompressedGroup(rng.standard_normal((6, 2)), rng.standard_normal((5, 2)), {"z": Sigma(Mode.DIAG, [0, 0])})
    col = CompressedCollection((g,), {"z": 0}, Mode.DIAG)
    batch = Batch(rng.standard_normal((2, 3, 5)), ["z", "z"])
    base = rng.standard_normal((2, 3, 6))
    np.testing.assert_array_equal(forward_compressed(batch, col, dtype=np.float64), np.zeros((2, 3, 6)))
    np.testing.assert_allclose(forward_compressed(batch, col, base, dtype=np.float64), base)


def test_single_row_full():
    col = make_collection(Mode.FULL, groups=1, per=1, seed=5)
    i = col.ids[0]
    x = np.random.default_rng(5).standard_normal((1, 3, 32))
    want = x[0] @ col.reconstruct(i).T
    got = forward_compressed(Batch(x, [i]), col, dtype=np.float64)[0]
    assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-10


def test_identity_sigma_projects():
    rng = np.random.default_rng(6)
    q = rand_orth(rng, 8, 3)
    col = CompressedCollection((CompressedGroup(q, q, {"p": Sigma(Mode.DIAG, np.ones(3))}),), {"p": 0}, Mode.DIAG)
    x = rng.standard_normal((1, 4, 8))
    np.testing.assert_allclose(forward_dense_reference(Batch(x, ["p"]), col)[0], x[0] @ q @ q.T, atol=1e-12)


def test_zero_input_zero_output():
    col = make_collection(Mode.FULL)
    batch = Batch(np.zeros((3, 2, 32)), col.ids[:3])
    assert not np.any(forward_dense_reference(batch, col))
    assert not np.any(forward_compressed(batch, col))


def test_linearity_and_permutation():
    col = make_collection(Mode.DIAG, seed=7)
    b1, b2 = random_batch(col, seed=8), random_batch(col, seed=9)
    b2 = Batch(b2.x, b1.adapter_ids)
    f = lambda bt: forward_compressed(bt, col, dtype=np.float64)  # noqa: E731
    np.testing.assert_allclose(f(Batch(2 * b1.x + b2.x, b1.adapter_ids)), 2 * f(b1) + f(b2), atol=1e-10)
    perm = np.random.default_rng(10).permutation(16)
    pb = Batch(b1.x[perm], [b1.adapter_ids[p] for p in perm])
    np.testing.assert_allclose(f(pb), f(b1)[perm], atol=1e-12)


@pytest.mark.parametrize("mode", [Mode.FULL, Mode.DIAG])
def test_only_sigma_step_is_per_row(mode):
    col = make_collection(mode)
    ops = []
    forward_compressed(random_batch(col), col, ops=ops)
    per_row = [op for op in ops if op[1] == "per_row"]
    assert per_row and all(op[0] in ("scale", "sigma") for op in per_row)
    r = col.groups[0].rank
    if mode is Mode.DIAG:
        assert all(op[2][1:] == (r,) for op in per_row)


def test_unknown_id_and_shape_errors():
    col = make_collection(Mode.FULL)
    with pytest.raises(KeyError, match="nope"):
        forward_compressed(Batch(np.zeros((1, 1, 32)), ["nope"]), col)
    with pytest.raises(ValueError, match="d_A"):
        forward_compressed(Batch(np.zeros((1, 1, 31)), col.ids[:1]), col)
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 1, 32)), col.ids[:1])


@pytest.mark.parametrize("mode, per_row", [(Mode.DIAG, 16), (Mode.FULL, 256)])
def test_flop_estimate_closed_form(mode, per_row):
    d, r, b, l = 4096, 16, 32, 128
    shape = (r, r) if mode is Mode.FULL else (r,)
    g = CompressedGroup(np.zeros((d, r)), np.zeros((d, r)), {"a": Sigma(mode, np.zeros(shape))})
    col = CompressedCollection((g,), {"a": 0}, mode)
    batch = Batch(np.broadcast_to(np.zeros(1), (b, l, d)), ["a"] * b)
    f = flop_estimate(batch, col)
    assert f["shared_v"] == b * l * d * r and f["shared_u"] == b * l * d * r
    assert f["sigma"] == b * l * per_row
    assert f["bmm_total"] == b * l * 16 * 2 * d
    assert f["shared_v"] + f["shared_u"] == f["bmm_total"]
