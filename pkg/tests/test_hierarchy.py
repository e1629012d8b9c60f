import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import low_rank_tensor
from multifactor.factorization import TrainingConfig, m_mode_svd
from multifactor.hierarchy import (
    BlockTree,
    ClusterIndex,
    PartSegmentation,
    cluster_matrices,
    constrained_cluster_pca,
    expected_tree,
    incremental_block_m_mode_svd,
    part_based_reorder,
)
from multifactor.linalg import max_principal_angle, truncated_svd
from multifactor.tensor import unfold


def angles(a, b):
    return max(max_principal_angle(u, v) for u, v in zip(a.factors, b.factors))


@given(st.lists(st.integers(1, 3), min_size=2, max_size=4), st.data())
def test_cluster_numbering_is_a_bijection(extents, data):
    dims = (2,) + tuple(extents)
    m = data.draw(st.integers(1, len(extents)))
    idx = ClusterIndex(m, dims)
    free = [range(dims[k]) for k in idx.free_modes]
    numbers = [idx.number(s) for s in itertools.product(*free)]
    assert sorted(numbers) == list(range(idx.count))
    for n in range(idx.count):
        assert idx.number(idx.subscripts(n)) == n


def test_cluster_numbering_lowest_free_mode_fastest():
    idx = ClusterIndex(2, (1, 2, 5, 3))
    assert idx.free_modes == (1, 3)
    assert idx.number((1, 0)) == 1 and idx.number((0, 1)) == 2
    with pytest.raises(ValueError):
        ClusterIndex(0, (2, 2))
    with pytest.raises(IndexError):
        idx.number((2, 0))


def test_single_mode_has_one_cluster(rng):
    d = rng.standard_normal((4, 3))
    clusters = cluster_matrices(d, 1)
    assert len(clusters) == 1 and np.array_equal(clusters[0], d)


def test_clusters_against_index_loops(rng):
    d = rng.standard_normal((2, 2, 3))
    clusters = cluster_matrices(d, 1)
    assert len(clusters) == 3 and all(c.shape == (2, 2) for c in clusters)
    for i0, i1, i2 in itertools.product(range(2), range(2), range(3)):
        assert clusters[i2][i0, i1] == d[i0, i1, i2]
    with pytest.raises(ValueError):
        cluster_matrices(d, 0)


@pytest.mark.parametrize("m", [1, 2, 3])
def test_clusters_reassemble_unfolding(rng, m):
    d = rng.standard_normal((3, 2, 4, 3))
    clusters = cluster_matrices(d, m)
    stacked = np.hstack([c.T for c in clusters])
    assert np.array_equal(stacked, unfold(d, m))


def test_constrained_pca_single_cluster(rng):
    c = rng.standard_normal((5, 8))
    res = constrained_cluster_pca([c], 3)
    ref = truncated_svd(c, 3)
    assert max_principal_angle(res.u, ref.u) <= 1e-10
    assert np.allclose(res.s, ref.s)


def test_constrained_pca_shared_generator(rng):
    u, _ = np.linalg.qr(rng.standard_normal((6, 2)))
    clusters = [u @ rng.standard_normal((2, 5)), u @ rng.standard_normal((2, 7))]
    res = constrained_cluster_pca(clusters, 2)
    assert max_principal_angle(res.u, u) <= 1e-8


def test_constrained_pca_matches_direct_and_rebuilds_clusters(rng):
    clusters = [rng.standard_normal((5, k)) for k in (3, 4, 2, 6)]
    res = constrained_cluster_pca(clusters, 5)
    direct = truncated_svd(np.hstack(clusters), 5)
    assert max_principal_angle(res.u, direct.u) <= 1e-8
    for c, w, v in zip(clusters, res.w, res.v):
        assert np.allclose(c, res.u @ np.diag(res.s) @ (v @ w).T, atol=1e-10)


def test_constrained_pca_errors(rng):
    with pytest.raises(ValueError):
        constrained_cluster_pca([np.ones((3, 2)), np.ones((4, 2))], 1)
    with pytest.raises(ValueError):
        constrained_cluster_pca([], 1)


def test_block_tree_arithmetic():
    tree = BlockTree.even(10, 5)
    assert tree.n_leaves == 5 and tree.depth == 3 and tree.n_nodes == 9
    assert tree.leaf_rows[0][0] == 0 and tree.leaf_rows[-1][1] == 10
    t = expected_tree(7, 2)
    assert t.n_leaves == 4 and t.leaf_rows[-1] == (6, 7)


def test_one_leaf_equals_flat_model(rng):
    d = rng.standard_normal((4, 3, 5))
    cfg = TrainingConfig((2, 3), tol=1e-12)
    flat = m_mode_svd(d, cfg)
    tree = incremental_block_m_mode_svd(d, cfg, leaf_size=3, node_rank=None)
    assert angles(flat, tree) <= 1e-8
    assert abs(flat.final_cost - tree.final_cost) <= 1e-8


def test_binary_tree_no_truncation(rng):
    d = rng.standard_normal((3, 4, 4))
    cfg = TrainingConfig((2, 2), tol=1e-12)
    flat = m_mode_svd(d, cfg)
    tree = incremental_block_m_mode_svd(d, cfg, leaf_size=1, node_rank=None)
    assert angles(flat, tree) <= 1e-8


def test_auto_node_rank_on_low_rank_data(rng):
    d, _ = low_rank_tensor(rng, 6, (5, 4, 6), (2, 2, 3))
    cfg = TrainingConfig((2, 2, 3))
    assert angles(m_mode_svd(d, cfg), incremental_block_m_mode_svd(d, cfg)) <= 1e-5


def test_trace_records_log_depth(rng):
    # clusters come from the projected tensor, so mode m sees prod of the other ranks
    d = rng.standard_normal((2, 3, 6))
    model = incremental_block_m_mode_svd(d, TrainingConfig((3, 6)), leaf_size=1, node_rank=None)
    for mode, leaves in ((1, 6), (2, 3)):
        nodes = [n for n in model.trace if n["mode"] == mode and n["iteration"] == 1]
        assert sum(n["level"] == 0 for n in nodes) == leaves
        assert len(nodes) == 2 * leaves - 1
        assert max(n["level"] for n in nodes) == int(np.ceil(np.log2(leaves)))
        assert all(n["seconds"] >= 0 for n in nodes)


def test_leaf_size_validation(rng):
    d = rng.standard_normal((2, 3, 3))
    with pytest.raises(ValueError):
        incremental_block_m_mode_svd(d, TrainingConfig((2, 2)), leaf_size=4)


def test_hebbian_leaves(rng):
    d, _ = low_rank_tensor(rng, 6, (4, 4), (2, 2))
    cfg = TrainingConfig((2, 2))
    model = incremental_block_m_mode_svd(d, cfg, leaf_size=2, node_rank=None, leaf_engine="hebbian")
    assert angles(m_mode_svd(d, cfg), model) <= 1e-3


# -- part-based -------------------------------------------------------------------


def test_identity_single_segment_is_whole_matrix(rng):
    d = rng.standard_normal((4, 3, 2))
    blocks = part_based_reorder(d, PartSegmentation.identity(4), 1)
    assert len(blocks) == 1
    rows = blocks[0]
    assert np.array_equal(np.sort(rows, axis=0), np.sort(unfold(d, 1).T, axis=0))
    assert max_principal_angle(truncated_svd(rows, 2).v, truncated_svd(unfold(d, 1), 2).u) <= 1e-10


def test_row_level_identity_reproduces_stacked_form(rng):
    d = rng.standard_normal((3, 2, 4))
    n = 3 * 4
    blocks = part_based_reorder(d, PartSegmentation(np.arange(n), np.zeros(n)), 1)
    assert np.array_equal(blocks[0], unfold(d, 1).T)


def test_swap_permutation_keeps_subspace(rng):
    d = rng.standard_normal((2, 4, 3))
    swap = PartSegmentation(np.array([1, 0]), np.zeros(2))
    plain = part_based_reorder(d, PartSegmentation.identity(2), 1)[0]
    swapped = part_based_reorder(d, swap, 1)[0]
    assert not np.array_equal(plain, swapped)
    assert max_principal_angle(truncated_svd(plain.T, 3).u, truncated_svd(swapped.T, 3).u) <= 1e-10


def test_two_segment_hierarchy_matches_whole(rng):
    d = rng.standard_normal((6, 4, 3))
    cfg = TrainingConfig((2, 2), tol=1e-12)
    seg = PartSegmentation(rng.permutation(6), np.array([0, 0, 0, 1, 1, 1]))
    parts = incremental_block_m_mode_svd(d, cfg, segmentation=seg, node_rank=None)
    assert angles(m_mode_svd(d, cfg), parts) <= 1e-6


def test_segmentation_errors(rng):
    with pytest.raises(ValueError):
        PartSegmentation(np.array([0, 0]), np.zeros(2))
    with pytest.raises(ValueError):
        PartSegmentation(np.arange(2), filters=np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        PartSegmentation(np.arange(2))
    d = rng.standard_normal((3, 2, 2))
    with pytest.raises(ValueError):
        part_based_reorder(d, PartSegmentation.identity(5), 1)


def test_soft_filters_are_flagged(rng):
    d = rng.standard_normal((2, 3, 2))
    seg = PartSegmentation(np.arange(2), filters=np.array([[1.0, 0.5]]))
    with pytest.warns(UserWarning, match="experimental"):
        blocks = part_based_reorder(d, seg, 1)
    assert len(blocks) == 1


def test_segmentation_from_csv(tmp_path):
    (tmp_path / "seg.csv").write_text("measurement_index,part_id\n0,1\n1,0\n2,1\n")
    (tmp_path / "perm.csv").write_text("from_index,to_index\n0,2\n1,0\n2,1\n")
    seg = PartSegmentation.from_csv(tmp_path / "seg.csv", tmp_path / "perm.csv")
    assert seg.permutation.tolist() == [1, 2, 0]
    assert seg.labels.tolist() == [1, 0, 1] and seg.n_parts == 2
    (tmp_path / "bad.csv").write_text("0,0\n0,1\n")
    with pytest.raises(ValueError):
        PartSegmentation.from_csv(tmp_path / "bad.csv")
