import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from tfscreen.matrix import CountMatrix, mito_genes_by_prefix, per_cell_stats
from tfscreen.qc import QcConfig, filter_cells, filter_genes, normalize_log1p

from conftest import make_counts


def test_boundary_cells_retained():
    genes = ["MT-1"] + [f"G{j:03d}" for j in range(1, 400)]
    exact_genes = np.zeros(400, dtype=int)
    exact_genes[1:201] = 1
    short = np.zeros(400, dtype=int)
    short[1:200] = 1
    # 199 nuclear genes carrying 207 counts plus 23 mito counts:
    # 200 genes detected and 23 / 230 = exactly 10% mito
    exact_mito = np.zeros(400, dtype=int)
    exact_mito[1:200] = 1
    exact_mito[1:9] = 2
    exact_mito[0] = 23
    over_mito = exact_mito.copy()
    over_mito[0] = 24
    m = CountMatrix(np.array([exact_genes, short, exact_mito, over_mito]),
                    ("exact_genes", "short", "exact_mito", "over_mito"), tuple(genes))
    stats = per_cell_stats(m, mito_genes_by_prefix(m.gene_ids))
    assert stats.genes_detected.tolist() == [200, 199, 200, 200]
    assert stats.pct_mito[2] == 10.0
    assert stats.pct_mito[3] > 10.0
    kept = filter_cells(m, stats, QcConfig())
    assert kept.cell_ids == ("exact_genes", "exact_mito")


def test_filter_genes_min_cells():
    m = make_counts([[1, 1, 0], [1, 1, 0], [1, 0, 1]])
    kept = filter_genes(m, QcConfig(min_cells_per_gene=2))
    assert kept.gene_ids == ("g0", "g1")
    assert filter_genes(m, QcConfig(min_cells_per_gene=3)).gene_ids == ("g0",)


def test_filter_everything_warns(caplog):
    m = make_counts([[1, 0]])
    kept = filter_cells(m, per_cell_stats(m), QcConfig())
    assert kept.n_cells == 0
    assert "removed every cell" in caplog.text


def test_qc_config_validation():
    with pytest.raises(ValueError):
        QcConfig(min_genes_per_cell=0)
    with pytest.raises(ValueError):
        QcConfig(max_pct_mito=101)


def test_normalize_known_values():
    m = make_counts([[1, 3], [2, 0]])
    e = normalize_log1p(m, QcConfig(target_sum=4.0))
    np.testing.assert_allclose(e.toarray(), [[np.log1p(1.0), np.log1p(3.0)], [np.log1p(4.0), 0.0]])


def test_normalize_rejects_empty_cell():
    m = make_counts([[1, 3], [0, 0]])
    with pytest.raises(ValueError, match="filter_cells"):
        normalize_log1p(m)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalize_sums_property(seed):
    rng = np.random.default_rng(seed)
    x = sp.random(20, 30, density=0.3, random_state=rng, data_rvs=lambda n: rng.integers(1, 1000, n))
    x = x.toarray()
    x[:, 0] += 1  # no empty cells
    m = CountMatrix(x, tuple(f"c{i}" for i in range(20)), tuple(f"g{j}" for j in range(30)))
    e = normalize_log1p(m)
    sums = np.asarray(np.expm1(e.x).sum(axis=1)).ravel()
    np.testing.assert_allclose(sums, 10_000.0, rtol=1e-6)
    # sparsity pattern is unchanged
    assert e.x.nnz == m.x.nnz


def test_normalize_hand_values():
    m = make_counts([[1, 1, 2, 0]])
    e = normalize_log1p(m)
    np.testing.assert_allclose(e.toarray()[0], [np.log(2501), np.log(2501), np.log(5001), 0.0])
    np.testing.assert_allclose(e.toarray()[0, :3], [7.8244, 7.8244, 8.5174], atol=1e-4)


def test_normalize_scale_factor_one():
    m = make_counts([[4000, 6000]])
    np.testing.assert_allclose(normalize_log1p(m).toarray(), np.log1p([[4000, 6000]]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=3, max_size=10), st.integers(2, 9))
def test_normalize_invariant_to_cell_scaling(counts, k):
    a = normalize_log1p(make_counts([counts]))
    b = normalize_log1p(make_counts([[c * k for c in counts]]))
    np.testing.assert_allclose(a.toarray(), b.toarray(), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_filters_idempotent_and_order_stable(seed):
    rng = np.random.default_rng(seed)
    dense = rng.integers(0, 3, size=(15, 12)) * (rng.random((15, 12)) < 0.5)
    m = make_counts(dense, genes=["MT-A"] + [f"g{j}" for j in range(11)])
    cfg = QcConfig(min_genes_per_cell=4, max_pct_mito=30, min_cells_per_gene=3)
    once = filter_cells(m, per_cell_stats(m, {"MT-A"}), cfg)
    twice = filter_cells(once, per_cell_stats(once, {"MT-A"}), cfg)
    assert once == twice
    assert list(once.cell_ids) == [c for c in m.cell_ids if c in set(once.cell_ids)]
    g1 = filter_genes(m, cfg)
    assert filter_genes(g1, cfg) == g1
    assert list(g1.gene_ids) == [g for g in m.gene_ids if g in set(g1.gene_ids)]


def test_filter_genes_identity_when_all_pass():
    m = make_counts(np.ones((3, 4), dtype=int))
    assert filter_genes(m, QcConfig()) == m
