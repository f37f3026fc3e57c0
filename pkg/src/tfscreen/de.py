"""Wilcoxon rank-sum differential expression and shared-background removal."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtr

from .io import FormatError, parse_bool, read_table, write_table
from .matrix import ExprMatrix

logger = logging.getLogger(__name__)

DE_COLUMNS = ("gene", "log2fc", "z", "pval", "qval", "significant", "in_background")
DEFAULT_EPS = 1e-9
REST = "rest"


def _two_sided_p(z):
    return 2.0 * ndtr(-np.abs(z))


def rank_sum_z(a: Sequence[float], b: Sequence[float], tie_correct: bool = True) -> tuple[float, float]:
    """Normal approximation to the Wilcoxon rank-sum test of `a` against `b`.

    No continuity correction. Returns ``(z, p)`` with a two-sided p; a
    zero variance (all values tied) gives ``(0.0, 1.0)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("rank_sum_z needs at least one value in each group")
    na, nb = a.size, b.size
    n = na + nb
    ranks = stats.rankdata(np.concatenate([a, b]))
    r_a = ranks[:na].sum()
    mu = na * (n + 1) / 2.0
    if tie_correct:
        _, t = np.unique(np.concatenate([a, b]), return_counts=True)
        t = t.astype(np.float64)
        ties = (t ** 3 - t).sum()
        var = na * nb / 12.0 * ((n + 1) - ties / (n * (n - 1)))
    else:
        var = na * nb * (n + 1) / 12.0
    if var <= 0:
        return 0.0, 1.0
    z = (r_a - mu) / math.sqrt(var)
    return float(z), float(_two_sided_p(z))


def _tie_term(sorted_block: np.ndarray) -> np.ndarray:
    """Sum of t^3 - t over tie runs, per column of a column-sorted block."""
    n, g = sorted_block.shape
    if n < 2 or g == 0:
        return np.zeros(g)
    change = np.ones((g, n + 1), dtype=bool)
    change[:, 1:n] = (sorted_block[1:] != sorted_block[:-1]).T
    pos = np.flatnonzero(change.ravel())
    # runs that straddle two columns have length 1 and contribute 0
    t = np.diff(pos).astype(np.float64)
    col = pos[:-1] // (n + 1)
    return np.bincount(col, weights=t ** 3 - t, minlength=g)


def rank_sum_block(block: np.ndarray, n_a: int, tie_correct: bool = True) -> np.ndarray:
    """Column-wise rank-sum z scores; the first `n_a` rows are the test group."""
    n, g = block.shape
    n_b = n - n_a
    if n_a == 0 or n_b == 0:
        raise ValueError("rank-sum test needs cells on both sides")
    ranks = stats.rankdata(block, axis=0)
    r_a = ranks[:n_a].sum(axis=0)
    mu = n_a * (n + 1) / 2.0
    if tie_correct:
        ties = _tie_term(np.sort(block, axis=0))
        var = n_a * n_b / 12.0 * ((n + 1) - ties / (n * (n - 1)))
    else:
        var = np.full(g, n_a * n_b * (n + 1) / 12.0)
    z = np.zeros(g)
    ok = var > 0
    z[ok] = (r_a[ok] - mu) / np.sqrt(var[ok])
    return z


def bh_adjust(p: Sequence[float]) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("bh_adjust expects a 1-d sequence")
    if np.any(~np.isfinite(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def log2fc(mean_a, mean_b, eps: float = DEFAULT_EPS):
    """log2 ratio of linear-scale means recovered from log1p means."""
    out = np.log2((np.expm1(mean_a) + eps) / (np.expm1(mean_b) + eps))
    return float(out) if np.ndim(out) == 0 else out


class DERecord(NamedTuple):
    gene: str
    group: str
    log2fc: float
    z: float
    p: float
    q: float
    significant: bool
    in_background: bool = False


@dataclass(frozen=True, eq=False)
class DETable:
    """Per-gene statistics for one group-vs-reference comparison."""

    group: str
    reference: str
    genes: tuple[str, ...]
    log2fc: np.ndarray
    z: np.ndarray
    p: np.ndarray
    q: np.ndarray
    significant: np.ndarray
    lfc_threshold: float
    alpha: float
    in_background: np.ndarray = field(default=None)
    n_group: int = 0
    n_reference: int = 0

    def __post_init__(self):
        n = len(self.genes)
        if self.in_background is None:
            object.__setattr__(self, "in_background", np.zeros(n, dtype=bool))
        for name in ("log2fc", "z", "p", "q", "significant", "in_background"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"DETable column {name} has wrong length")

    def records(self) -> list[DERecord]:
        return [
            DERecord(g, self.group, float(l), float(z), float(p), float(q), bool(s), bool(b))
            for g, l, z, p, q, s, b in zip(
                self.genes, self.log2fc, self.z, self.p, self.q, self.significant, self.in_background
            )
        ]

    def significant_genes(self) -> set[str]:
        return {g for g, s in zip(self.genes, self.significant) if s}

    @property
    def n_significant(self) -> int:
        return int(np.count_nonzero(self.significant))

    @property
    def n_up(self) -> int:
        return int(np.count_nonzero(self.significant & (self.log2fc > 0)))

    @property
    def n_down(self) -> int:
        return int(np.count_nonzero(self.significant & (self.log2fc < 0)))

    def top_up(self, n: int = 5) -> list[str]:
        idx = [i for i in range(len(self.genes)) if self.significant[i] and self.log2fc[i] > 0]
        idx.sort(key=lambda i: (-self.log2fc[i], self.genes[i]))
        return [self.genes[i] for i in idx[:n]]


def call_significant(lfc: np.ndarray, q: np.ndarray, lfc_threshold: float, alpha: float) -> np.ndarray:
    return (np.abs(lfc) > lfc_threshold) & (q < alpha)


def differential_expression(
    e: ExprMatrix,
    group_cells: Iterable[str],
    reference_cells: Iterable[str] | str,
    lfc_threshold: float,
    alpha: float = 0.05,
    tie_correct: bool = True,
    group: str = "group",
    reference: str | None = None,
    eps: float = DEFAULT_EPS,
    block_size: int = 256,
) -> DETable:
    """Test every gene of `e` for a shift between two disjoint cell sets.

    `reference_cells` may be the string ``"rest"``: every cell of `e` that
    is not in the group. BH correction runs across the genes of this one
    comparison.
    """
    group_set = set(group_cells)
    if isinstance(reference_cells, str):
        if reference_cells != REST:
            raise ValueError(f"unknown reference {reference_cells!r}")
        ref_set = set(e.cell_ids) - group_set
        reference = reference or REST
    else:
        ref_set = set(reference_cells)
        reference = reference or "reference"
    if not group_set:
        raise ValueError(f"group {group!r} has no cells")
    if not ref_set:
        raise ValueError(f"reference for {group!r} has no cells")
    overlap = group_set & ref_set
    if overlap:
        raise ValueError(f"group {group!r} and its reference share cell {sorted(overlap)[0]!r}")
    rows_a = np.sort(e.rows_of(group_set))
    rows_b = np.sort(e.rows_of(ref_set))
    n_a = len(rows_a)
    sub = e.x[np.concatenate([rows_a, rows_b])].tocsc()
    n_genes = e.n_genes
    z = np.empty(n_genes)
    for j0 in range(0, n_genes, block_size):
        j1 = min(j0 + block_size, n_genes)
        z[j0:j1] = rank_sum_block(sub[:, j0:j1].toarray(), n_a, tie_correct)
    p = _two_sided_p(z)
    mean_a = np.asarray(sub[:n_a].mean(axis=0)).ravel()
    mean_b = np.asarray(sub[n_a:].mean(axis=0)).ravel()
    lfc = log2fc(mean_a, mean_b, eps)
    q = bh_adjust(p)
    sig = call_significant(lfc, q, lfc_threshold, alpha)
    return DETable(
        group, reference, e.gene_ids, lfc, z, p, q, sig,
        lfc_threshold=lfc_threshold, alpha=alpha, n_group=n_a, n_reference=len(rows_b),
    )


def differential_expression_many(
    e: ExprMatrix,
    groups: Mapping[str, Iterable[str]],
    reference_cells,
    lfc_threshold: float,
    alpha: float = 0.05,
    tie_correct: bool = True,
    reference: str | None = None,
    threads: int = 1,
) -> dict[str, DETable]:
    """Run one comparison per group; results are keyed and ordered by group name.

    `reference_cells` is a cell collection shared by all groups, the string
    ``"rest"``, or a mapping group -> cell collection.
    """
    names = sorted(groups)

    def one(name):
        ref = reference_cells[name] if isinstance(reference_cells, Mapping) else reference_cells
        return differential_expression(
            e, groups[name], ref, lfc_threshold, alpha, tie_correct, group=name, reference=reference
        )

    if threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tables = list(pool.map(one, names))
    else:
        tables = [one(n) for n in names]
    return dict(zip(names, tables))


@dataclass(frozen=True)
class BackgroundSet:
    genes: frozenset[str]
    n_groups: int
    threshold_groups: int
    fraction: float
    group_counts: Mapping[str, int] = field(default_factory=dict)


def background_threshold(n_groups: int, fraction: float) -> int:
    """ceil(fraction * n_groups), computed on the decimal value of `fraction`."""
    return math.ceil(Fraction(repr(float(fraction))) * n_groups)


def identify_background(per_group_significant: Mapping[str, Iterable[str]], fraction: float = 0.70) -> BackgroundSet:
    """Genes significant in at least ceil(fraction * n_groups) groups."""
    if not per_group_significant:
        raise ValueError("background needs at least one group")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = len(per_group_significant)
    need = background_threshold(n, fraction)
    counts: dict[str, int] = {}
    for genes in per_group_significant.values():
        for g in set(genes):
            counts[g] = counts.get(g, 0) + 1
    bg = frozenset(g for g, k in counts.items() if k >= need)
    return BackgroundSet(bg, n, need, fraction, dict(sorted(counts.items())))


def subtract_background(t: DETable, bg: BackgroundSet) -> DETable:
    """Mark background genes and drop them from the significant calls."""
    inbg = np.array([g in bg.genes for g in t.genes], dtype=bool)
    return replace(t, significant=t.significant & ~inbg, in_background=inbg)


# --- table files -----------------------------------------------------------------


def write_de_table(t: DETable, path) -> None:
    order = sorted(range(len(t.genes)), key=lambda i: t.genes[i])
    rows = [
        (t.genes[i], float(t.log2fc[i]), float(t.z[i]), float(t.p[i]), float(t.q[i]),
         bool(t.significant[i]), bool(t.in_background[i]))
        for i in order
    ]
    write_table(rows, DE_COLUMNS, path)


def read_de_table(path, group: str, reference: str = "reference", lfc_threshold: float = float("nan"), alpha: float = float("nan")) -> DETable:
    header, rows = read_table(path, ",")
    missing = [c for c in DE_COLUMNS if c not in header]
    if missing:
        raise FormatError(f"{path}: missing column {missing[0]!r}")
    genes = tuple(r["gene"] for r in rows)

    def col(name):
        return np.array([float(r[name]) for r in rows], dtype=np.float64)

    def flag(name):
        return np.array([parse_bool(r[name]) for r in rows], dtype=bool)

    return DETable(
        group, reference, genes, col("log2fc"), col("z"), col("pval"), col("qval"),
        flag("significant"), lfc_threshold, alpha, in_background=flag("in_background"),
    )
