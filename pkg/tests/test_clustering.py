import numpy as np
import pytest
from conftest import rand_orth

from lora_jd import (AdapterCollection, ClusterOptions, CompressedGroup, Mode, Sigma, SolveOptions, assign_step,
                     cluster_solve, compress, init_clusters, relative_recon_error)
from lora_jd.clustering import kmeans
from lora_jd.synthetic import planted_families, random_collection


def purity(labels, truth):
    """Fraction of adapters in the majority true family of their cluster."""
    labels, truth = np.asarray(labels), np.asarray(truth)
    hit = sum(np.bincount(truth[labels == j]).max() for j in np.unique(labels))
    return hit / len(truth)


def shared_family_collection(n=16, d=24, seed=0):
    """Two families whose members share a common update plus a small private part."""
    rng = np.random.default_rng(seed)
    q, p = rand_orth(rng, d, d), rand_orth(rng, d, d)
    pairs, labels = [], []
    means = [rng.standard_normal((4, 4)) for _ in range(2)]
    for i in range(n):
        f = i % 2
        core = means[f] + 0.1 * rng.standard_normal((4, 4))
        pairs.append((q[:, 4 * f:4 * f + 4] @ core, p[:, 4 * f:4 * f + 4].T))
        labels.append(f)
    return AdapterCollection.from_pairs(pairs), np.array(labels)


# ------------------------------------------------------------- k-means

def test_kmeans_separates_blobs():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal(0, 0.1, (10, 2)), rng.normal(5, 0.1, (10, 2))])
    labels = kmeans(pts, 2, 50, seed=0)
    assert purity(labels, [0] * 10 + [1] * 10) == 1.0


def test_kmeans_k_equals_n_gives_singletons():
    pts = np.random.default_rng(1).standard_normal((7, 3))
    assert sorted(kmeans(pts, 7, 50, seed=3)) == list(range(7))


def test_kmeans_identical_points_no_empty_cluster():
    labels = kmeans(np.zeros((5, 2)), 3, 10, seed=0)
    assert set(labels) == {0, 1, 2}


def test_kmeans_deterministic():
    pts = np.random.default_rng(2).standard_normal((30, 4))
    assert np.array_equal(kmeans(pts, 4, 50, 9), kmeans(pts, 4, 50, 9))


# ------------------------------------------------------------- init

def test_init_separates_well_separated_families():
    c, truth = shared_family_collection()
    labels = init_clusters(c, ClusterOptions(k=2, per_cluster=SolveOptions(rank=4)))
    assert purity(labels, truth) == 1.0


def test_init_k1_and_kn():
    c = random_collection(6, 10, ranks=2, seed=3)
    assert not np.any(init_clusters(c, ClusterOptions(k=1, per_cluster=SolveOptions(rank=3))))
    labels = init_clusters(c, ClusterOptions(k=6, per_cluster=SolveOptions(rank=3)))
    assert sorted(labels) == list(range(6))


def test_init_rejects_k_above_n():
    c = random_collection(3, 8, ranks=1)
    with pytest.raises(ValueError, match="exceeds"):
        init_clusters(c, ClusterOptions(k=4, per_cluster=SolveOptions(rank=2)))


# ------------------------------------------------------------- assign

def test_assign_exact_match_wins():
    rng = np.random.default_rng(4)
    groups = [CompressedGroup(rand_orth(rng, 12, 2), rand_orth(rng, 12, 2), {}) for _ in range(3)]
    g = groups[2]
    b, a = g.u @ rng.standard_normal((2, 2)), g.v.T
    c = AdapterCollection.from_pairs([(b, a)])
    assert assign_step(c, groups).tolist() == [2]


def test_assign_ties_go_to_lowest_index():
    rng = np.random.default_rng(5)
    u, v = rand_orth(rng, 10, 2), rand_orth(rng, 10, 2)
    groups = [CompressedGroup(u, v, {})] * 3
    c = random_collection(4, 10, ranks=2, seed=5)
    assert assign_step(c, groups).tolist() == [0, 0, 0, 0]


@pytest.mark.parametrize("mode", [Mode.FULL, Mode.DIAG])
def test_assign_matches_dense_brute_force(mode):
    rng = np.random.default_rng(6)
    c = random_collection(12, 14, ranks=3, seed=6)
    groups = [CompressedGroup(rand_orth(rng, 14, 3), rand_orth(rng, 14, 3), {}) for _ in range(3)]
    err = np.zeros((12, 3))
    for i, ad in enumerate(c):
        w = (ad.b @ ad.a).ravel()
        for j, g in enumerate(groups):
            if mode is Mode.FULL:
                cols = np.column_stack([np.outer(g.u[:, p], g.v[:, q]).ravel() for p in range(3) for q in range(3)])
            else:
                cols = np.column_stack([np.outer(g.u[:, p], g.v[:, p]).ravel() for p in range(3)])
            coef = np.linalg.lstsq(cols, w, rcond=None)[0]
            err[i, j] = np.linalg.norm(w - cols @ coef) ** 2
    assert assign_step(c, groups, mode).tolist() == np.argmin(err, axis=1).tolist()


# ------------------------------------------------------------- cluster solve

def test_cluster_planted_recovery():
    c, truth = planted_families(20, 32, seed=0)
    col, rep = cluster_solve(c, ClusterOptions(k=2, per_cluster=SolveOptions(rank=4)))
    labels = [col.assignment[i] for i in c.ids]
    assert purity(labels, truth) == 1.0
    assert rep.total_objective_trace[-1] < 1e-10
    assert rep.converged


def test_cluster_k_equals_n_is_truncated_svd():
    c = random_collection(6, 16, ranks=3, seed=7)
    col, _ = cluster_solve(c, ClusterOptions(k=6, per_cluster=SolveOptions(rank=2)))
    per, _ = relative_recon_error(c, col)
    for ad in c:
        s = np.linalg.svd(ad.b @ ad.a, compute_uv=False)
        want = np.sqrt(np.sum(s[2:] ** 2)) / np.sqrt(np.sum(s ** 2))
        assert per[ad.id] == pytest.approx(want, abs=1e-8)


def test_cluster_k1_equals_plain_solve():
    c = random_collection(6, 12, ranks=2, seed=8)
    col, _ = cluster_solve(c, ClusterOptions(k=1, per_cluster=SolveOptions(rank=3, seed=4), seed=4))
    ref, _ = compress(c, SolveOptions(rank=3, seed=4))
    g, h = col.groups[0], ref.groups[0]
    np.testing.assert_array_equal(g.u, h.u)
    for i in c.ids:
        np.testing.assert_array_equal(g.sigmas[i].values, h.sigmas[i].values)


@pytest.mark.parametrize("mode", [Mode.FULL, Mode.DIAG])
def test_cluster_objective_non_increasing(mode):
    c = random_collection(16, 12, ranks=2, seed=9)
    _, rep = cluster_solve(c, ClusterOptions(k=3, per_cluster=SolveOptions(rank=3, mode=mode)))
    t = rep.total_objective_trace
    assert all(b <= a + 1e-8 for a, b in zip(t, t[1:]))


def test_cluster_threads_do_not_change_result():
    c = random_collection(12, 12, ranks=2, seed=10)
    opts = ClusterOptions(k=3, per_cluster=SolveOptions(rank=3))
    a, ra = cluster_solve(c, opts)
    b, rb = cluster_solve(c, ClusterOptions(k=3, per_cluster=SolveOptions(rank=3), workers=3))
    assert ra.assignment_history_hash == rb.assignment_history_hash
    for g, h in zip(a.groups, b.groups):
        np.testing.assert_array_equal(g.u, h.u)


def test_cluster_no_empty_groups():
    c = random_collection(5, 8, ranks=1, seed=11)
    col, _ = cluster_solve(c, ClusterOptions(k=4, per_cluster=SolveOptions(rank=1)))
    assert all(g.sigmas for g in col.groups)


def test_cluster_options_validate():
    with pytest.raises(ValueError):
        ClusterOptions(k=0, per_cluster=SolveOptions(rank=1))
    with pytest.raises(ValueError):
        ClusterOptions(k=2, per_cluster=SolveOptions(rank=1), n_init=0)


def test_sigma_is_on_original_scale():
    c = random_collection(6, 10, ranks=1, seed=12)
    col, _ = cluster_solve(c, ClusterOptions(k=6, per_cluster=SolveOptions(rank=1)))
    for ad in c:
        s = col.sigma(ad.id)
        assert isinstance(s, Sigma)
        assert abs(s.values[0, 0]) == pytest.approx(ad.norm, rel=1e-9)
