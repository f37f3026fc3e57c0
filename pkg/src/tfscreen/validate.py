"""Rank correlation of per-TF DEG counts against published TF rankings."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .io import RankTable

logger = logging.getLogger(__name__)

# rank 1 is the strongest TF, so agreement shows up as a negative rho
EXPECTED_SIGN = -1


def spearman_pvalue(rho: float, n: int) -> float:
    """Two-sided p for a rank correlation via the t distribution on n - 2 df."""
    if n < 3:
        raise ValueError("need at least 3 pairs")
    if abs(rho) >= 1.0:
        return 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 pairs")
    rx = stats.rankdata(x) - (x.size + 1) / 2.0
    ry = stats.rankdata(y) - (y.size + 1) / 2.0
    sx, sy = np.sqrt(rx @ rx), np.sqrt(ry @ ry)
    if sx == 0 or sy == 0:
        raise ValueError("correlation undefined for a constant vector")
    rho = float(np.clip((rx @ ry) / (sx * sy), -1.0, 1.0))
    if abs(abs(rho) - 1.0) < 1e-12:
        rho = math.copysign(1.0, rho)
    return rho, spearman_pvalue(rho, x.size)


@dataclass(frozen=True)
class ColumnValidation:
    rank_column: str
    n_matched: int
    rho: float
    p: float
    matched: tuple[tuple[str, int, float], ...]

    @property
    def agrees(self) -> bool:
        return math.copysign(1, self.rho) == EXPECTED_SIGN


@dataclass(frozen=True)
class ValidationReport:
    columns: tuple[ColumnValidation, ...]
    n_tested: int
    expected_sign: int = EXPECTED_SIGN

    def __getitem__(self, name: str) -> ColumnValidation:
        for c in self.columns:
            if c.rank_column == name:
                return c
        raise KeyError(name)


def compare_to_published(deg_counts: Mapping[str, int], ranks: RankTable, uppercase: bool = False, min_matched: int = 3) -> ValidationReport:
    """Spearman correlation of DEG counts with each rank column.

    TFs are joined on symbol (case-sensitive unless `uppercase`); rows with
    a blank rank are left out of that column.
    """

    def key(s):
        return s.upper() if uppercase else s

    counts = {key(t): (t, n) for t, n in deg_counts.items()}
    out = []
    for col in ranks.columns:
        present = {key(t): r for t, r in ranks.ranks(col).items()}
        matched = sorted(
            ((counts[k][0], int(counts[k][1]), float(present[k])) for k in counts if k in present),
            key=lambda m: m[0],
        )
        if len(matched) < min_matched:
            logger.warning("rank column %r: only %d TFs matched; skipped", col, len(matched))
            continue
        rho, p = spearman([m[1] for m in matched], [m[2] for m in matched])
        out.append(ColumnValidation(col, len(matched), rho, p, tuple(matched)))
    return ValidationReport(tuple(out), len(deg_counts))
