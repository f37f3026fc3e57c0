"""Labeled sparse matrices for cells x genes count and expression data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

DEFAULT_MITO_PREFIX = "MT-"


def _check_unique(ids: Sequence[str], what: str) -> None:
    if len(set(ids)) != len(ids):
        seen = set()
        for i in ids:
            if i in seen:
                raise ValueError(f"duplicate {what} id: {i!r}")
            seen.add(i)


def _freeze(x: sp.csr_matrix) -> sp.csr_matrix:
    for arr in (x.data, x.indices, x.indptr):
        arr.flags.writeable = False
    return x


@dataclass(frozen=True, eq=False)
class _LabeledMatrix:
    """Common base: a CSR matrix with ordered unique cell and gene ids."""

    x: sp.csr_matrix
    cell_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]

    _dtype = np.float64

    def __post_init__(self):
        x = self.x
        if not sp.issparse(x):
            x = sp.csr_matrix(np.asarray(x))
        x = sp.csr_matrix(x, copy=True)
        self._validate_values(x.data)
        x = x.astype(self._dtype)
        x.sum_duplicates()
        x.sort_indices()
        x.eliminate_zeros()
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "cell_ids", tuple(str(c) for c in self.cell_ids))
        object.__setattr__(self, "gene_ids", tuple(str(g) for g in self.gene_ids))
        if x.shape != (len(self.cell_ids), len(self.gene_ids)):
            raise ValueError(
                f"matrix shape {x.shape} does not match "
                f"{len(self.cell_ids)} cell ids x {len(self.gene_ids)} gene ids"
            )
        _check_unique(self.cell_ids, "cell")
        _check_unique(self.gene_ids, "gene")

    def _validate_values(self, data: np.ndarray) -> None:
        if not np.all(np.isfinite(data)):
            raise ValueError("matrix contains non-finite values")
        if np.any(data < 0):
            raise ValueError("matrix contains negative values")

    @property
    def n_cells(self) -> int:
        return self.x.shape[0]

    @property
    def n_genes(self) -> int:
        return self.x.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.x.shape

    @cached_property
    def cell_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.cell_ids)}

    @cached_property
    def gene_index(self) -> dict[str, int]:
        return {g: i for i, g in enumerate(self.gene_ids)}

    @cached_property
    def csc(self) -> sp.csc_matrix:
        """Column-major copy for per-gene access."""
        return self.x.tocsc()

    def rows_of(self, cells: Iterable[str]) -> np.ndarray:
        """Row indices of `cells`, raising on the first unknown id."""
        index = self.cell_index
        out = []
        for c in cells:
            try:
                out.append(index[c])
            except KeyError:
                raise KeyError(f"unknown cell id: {c!r}") from None
        return np.asarray(out, dtype=np.int64)

    def toarray(self) -> np.ndarray:
        return self.x.toarray()

    def _replace(self, x, cell_ids=None, gene_ids=None):
        return type(self)(
            x,
            self.cell_ids if cell_ids is None else cell_ids,
            self.gene_ids if gene_ids is None else gene_ids,
        )

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (
            self.cell_ids == other.cell_ids
            and self.gene_ids == other.gene_ids
            and (self.x != other.x).nnz == 0
        )

    __hash__ = None


class CountMatrix(_LabeledMatrix):
    """Raw non-negative integer UMI counts, cells x genes."""

    _dtype = np.int64

    def _validate_values(self, data):
        if np.any(data < 0):
            raise ValueError("negative count in matrix")
        if data.dtype.kind == "f" and not np.all(np.floor(data) == data):
            raise ValueError("non-integer count in matrix")


class ExprMatrix(_LabeledMatrix):
    """Normalized log1p expression with the identifiers of its source counts."""


@dataclass(frozen=True)
class CellStats:
    cell_ids: tuple[str, ...]
    genes_detected: np.ndarray
    total_counts: np.ndarray
    pct_mito: np.ndarray


@dataclass(frozen=True)
class CellAnnotations:
    """Per-cell metadata aligned to the rows of a matrix."""

    cell_ids: tuple[str, ...]
    sample: tuple[str, ...]
    replicate: tuple[str, ...]
    tf_label: tuple[str | None, ...] = field(default=None)
    status: tuple[str | None, ...] = field(default=None)

    def __post_init__(self):
        n = len(self.cell_ids)
        for name in ("tf_label", "status"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, (None,) * n)
        for name in ("sample", "replicate", "tf_label", "status"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"annotation column {name!r} has wrong length")

    def __len__(self):
        return len(self.cell_ids)


def slice_cells(m, keep):
    """Restrict `m` to the cells in `keep`, preserving the original row order."""
    keep = set(keep)
    unknown = keep.difference(m.cell_index)
    if unknown:
        raise KeyError(f"unknown cell id: {sorted(unknown)[0]!r}")
    rows = np.array([i for i, c in enumerate(m.cell_ids) if c in keep], dtype=np.int64)
    return m._replace(m.x[rows], cell_ids=tuple(m.cell_ids[i] for i in rows))


def slice_genes(m, keep):
    keep = set(keep)
    unknown = keep.difference(m.gene_index)
    if unknown:
        raise KeyError(f"unknown gene id: {sorted(unknown)[0]!r}")
    cols = np.array([j for j, g in enumerate(m.gene_ids) if g in keep], dtype=np.int64)
    return m._replace(m.x[:, cols], gene_ids=tuple(m.gene_ids[j] for j in cols))


def group_means(e: ExprMatrix, labels: Mapping[str, str], groups: Sequence[str] | None = None):
    """Mean expression per group and gene.

    Parameters
    ----------
    e : ExprMatrix
    labels : mapping cell id -> group name
        Every cell of `e` must be labeled.
    groups : sequence of str, optional
        Output row order. Defaults to the sorted distinct labels; a listed
        group without cells is an error.

    Returns
    -------
    groups : tuple of str
    means : ndarray, shape (n_groups, n_genes)
    """
    missing = [c for c in e.cell_ids if c not in labels]
    if missing:
        raise KeyError(f"cell {missing[0]!r} has no group label")
    if groups is None:
        groups = sorted(set(labels[c] for c in e.cell_ids))
    groups = tuple(groups)
    pos = {g: k for k, g in enumerate(groups)}
    row_group = np.empty(e.n_cells, dtype=np.int64)
    for i, c in enumerate(e.cell_ids):
        g = labels[c]
        if g not in pos:
            raise KeyError(f"cell {c!r} labeled with unlisted group {g!r}")
        row_group[i] = pos[g]
    sizes = np.bincount(row_group, minlength=len(groups))
    for g, n in zip(groups, sizes):
        if n == 0:
            raise ValueError(f"group {g!r} has no cells")
    indicator = sp.csr_matrix(
        (np.ones(e.n_cells), (row_group, np.arange(e.n_cells))),
        shape=(len(groups), e.n_cells),
    )
    sums = np.asarray((indicator @ e.x).todense())
    return groups, sums / sizes[:, None]


def mito_genes_by_prefix(gene_ids: Iterable[str], prefix: str = DEFAULT_MITO_PREFIX) -> set[str]:
    return {g for g in gene_ids if g.startswith(prefix)}


def per_cell_stats(m: CountMatrix, mito_genes: Iterable[str] = ()) -> CellStats:
    mito_genes = set(mito_genes)
    absent = mito_genes.difference(m.gene_index)
    if absent:
        logger.warning("%d mitochondrial gene ids are not in the matrix and are ignored", len(absent))
    cols = np.array(sorted(m.gene_index[g] for g in mito_genes if g in m.gene_index), dtype=np.int64)
    x = m.x
    total = np.asarray(x.sum(axis=1)).ravel().astype(np.int64)
    detected = np.diff(x.indptr).astype(np.int64)
    if len(cols):
        mito = np.asarray(x[:, cols].sum(axis=1)).ravel().astype(np.float64)
    else:
        mito = np.zeros(m.n_cells)
    pct = np.zeros(m.n_cells)
    nz = total > 0
    pct[nz] = 100.0 * mito[nz] / total[nz]
    return CellStats(m.cell_ids, detected, total, pct)


def merge_samples(samples: Sequence[tuple[str, CountMatrix]], replicate_of: Mapping[str, str] | None = None):
    """Outer-join samples on the gene axis.

    Cell ids become ``"<sample>_<cell id>"``. The gene axis is the sorted
    union of all inputs; genes absent from a sample are zero there.
    """
    names = [name for name, _ in samples]
    _check_unique(names, "sample")
    genes = sorted(set().union(*(m.gene_ids for _, m in samples))) if samples else []
    gpos = {g: j for j, g in enumerate(genes)}
    blocks, cell_ids, sample_col, rep_col = [], [], [], []
    for name, m in samples:
        remap = np.array([gpos[g] for g in m.gene_ids], dtype=np.int64)
        coo = m.x.tocoo()
        blocks.append(
            sp.csr_matrix((coo.data, (coo.row, remap[coo.col])), shape=(m.n_cells, len(genes)))
        )
        cell_ids.extend(f"{name}_{c}" for c in m.cell_ids)
        sample_col.extend([name] * m.n_cells)
        rep = replicate_of.get(name, name) if replicate_of else name
        rep_col.extend([rep] * m.n_cells)
    if blocks:
        x = sp.vstack(blocks, format="csr")
    else:
        x = sp.csr_matrix((0, 0), dtype=np.int64)
    merged = CountMatrix(x, tuple(cell_ids), tuple(genes))
    ann = CellAnnotations(tuple(cell_ids), tuple(sample_col), tuple(rep_col))
    return merged, ann
