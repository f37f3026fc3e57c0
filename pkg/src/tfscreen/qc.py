"""Cell/gene quality filters and library-size normalization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .matrix import CellStats, CountMatrix, ExprMatrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QcConfig:
    min_genes_per_cell: int = 200
    max_pct_mito: float = 10.0
    min_cells_per_gene: int = 3
    target_sum: float = 10_000.0

    def __post_init__(self):
        for name in ("min_genes_per_cell", "max_pct_mito", "min_cells_per_gene", "target_sum"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_pct_mito > 100:
            raise ValueError("max_pct_mito must be at most 100")


def filter_cells(m: CountMatrix, stats: CellStats, cfg: QcConfig) -> CountMatrix:
    """Keep cells with enough detected genes and low mitochondrial fraction.

    Both thresholds are inclusive.
    """
    if stats.cell_ids != m.cell_ids:
        raise ValueError("stats were not computed from this matrix")
    keep = (stats.genes_detected >= cfg.min_genes_per_cell) & (stats.pct_mito <= cfg.max_pct_mito)
    rows = np.flatnonzero(keep)
    if len(rows) == 0:
        logger.warning("cell filter removed every cell")
    return m._replace(m.x[rows], cell_ids=tuple(m.cell_ids[i] for i in rows))


def filter_genes(m: CountMatrix, cfg: QcConfig) -> CountMatrix:
    detected_in = np.bincount(m.x.indices, minlength=m.n_genes)
    cols = np.flatnonzero(detected_in >= cfg.min_cells_per_gene)
    return m._replace(m.x[:, cols], gene_ids=tuple(m.gene_ids[j] for j in cols))


def normalize_log1p(m: CountMatrix, cfg: QcConfig = QcConfig()) -> ExprMatrix:
    """ln(1 + count * target_sum / cell total), keeping the sparsity pattern."""
    x = m.x
    totals = np.asarray(x.sum(axis=1)).ravel()
    empty = np.flatnonzero(totals == 0)
    if len(empty):
        raise ValueError(
            f"cell {m.cell_ids[empty[0]]!r} has no counts; run filter_cells before normalizing"
        )
    scale = cfg.target_sum / totals.astype(np.float64)
    data = np.log1p(x.data * np.repeat(scale, np.diff(x.indptr)))
    out = sp.csr_matrix((data, x.indices.copy(), x.indptr.copy()), shape=x.shape)
    return ExprMatrix(out, m.cell_ids, m.gene_ids)
