"""Over-representation analysis, preranked GSEA and term recurrence."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import hypergeom

from .de import bh_adjust
from .io import GeneSetLibrary

logger = logging.getLogger(__name__)

ORA_COLUMNS = ("group", "library", "term", "k", "K", "n", "N", "pval", "qval", "genes")
GSEA_COLUMNS = ("group", "library", "term", "size", "es", "nes", "pval", "qval", "leading_edge")
RECURRENCE_CLIP = 10.0


@dataclass(frozen=True)
class OraRecord:
    term: str
    library: str
    group: str
    k: int
    K: int
    n: int
    N: int
    p: float
    q: float
    genes: tuple[str, ...]

    @property
    def significant(self) -> bool:
        return self.q < 0.05

    def row(self):
        return (self.group, self.library, self.term, self.k, self.K, self.n, self.N, self.p, self.q, self.genes)


def hypergeom_tail(k: int, K: int, n: int, N: int) -> float:
    """P(X >= k) for X ~ Hypergeometric(N, K, n)."""
    if k <= 0:
        return 1.0
    return float(min(1.0, max(0.0, hypergeom.sf(k - 1, N, K, n))))


def ora(
    query: Iterable[str],
    lib: GeneSetLibrary,
    universe: Iterable[str],
    min_set: int = 5,
    max_set: int = 500,
    group: str = "query",
) -> list[OraRecord]:
    """One-sided hypergeometric test of `query` against every sized-in term.

    Term sets and the query are first intersected with `universe`. Records
    come back sorted by term with BH q-values across the tested terms.
    """
    universe = frozenset(universe)
    if not universe:
        raise ValueError("empty universe")
    query = set(query)
    inside = query & universe
    if len(inside) < len(query):
        logger.warning("%s: %d query genes are outside the universe and dropped", group, len(query) - len(inside))
    if not inside:
        raise ValueError(f"{group}: nothing to test, query is empty after intersecting with the universe")
    N, n = len(universe), len(inside)
    tested = []
    for term in sorted(lib.sets):
        members = lib.sets[term] & universe
        K = len(members)
        if K < min_set or K > max_set:
            continue
        hits = members & inside
        tested.append((term, len(hits), K, tuple(sorted(hits))))
    if not tested:
        return []
    pvals = [hypergeom_tail(k, K, n, N) for _, k, K, _ in tested]
    qvals = bh_adjust(pvals)
    return [
        OraRecord(term, lib.name, group, k, K, n, N, p, float(q), hits)
        for (term, k, K, hits), p, q in zip(tested, pvals, qvals)
    ]


# --- preranked GSEA ----------------------------------------------------------------


@dataclass(frozen=True)
class GseaRecord:
    term: str
    library: str
    group: str
    size: int
    es: float
    nes: float
    p: float
    q: float
    leading_edge: tuple[str, ...]

    def row(self):
        return (self.group, self.library, self.term, self.size, self.es, self.nes, self.p, self.q, self.leading_edge)


def _extremes(pos: np.ndarray, w: np.ndarray, n_genes: int):
    """Running-sum maximum and minimum for hits at sorted positions `pos`.

    `pos` and `w` have shape (..., k); hit weights are normalized to sum
    to one along the last axis. The walk only rises at hits and only falls
    between them, so the maximum sits just after a hit and the minimum
    just before one (or is the starting 0).
    """
    k = pos.shape[-1]
    miss = 1.0 / (n_genes - k)
    cw = np.cumsum(w, axis=-1)
    i = np.arange(1, k + 1)
    after_hit = cw - (pos + 1 - i) * miss
    before_hit = (cw - w) - (pos - (i - 1)) * miss
    top = after_hit.max(axis=-1)
    bottom = np.minimum(before_hit.min(axis=-1), 0.0)
    return top, bottom, after_hit, before_hit


# max and min deviations closer than this count as tied; ties go to the positive side
TIE_TOL = 1e-12


def _signed(top, bottom):
    return np.where(top + bottom >= -TIE_TOL, top, bottom)


def _hit_weights(abs_scores: np.ndarray, weight: float) -> np.ndarray:
    w = abs_scores ** weight
    total = w.sum(axis=-1, keepdims=True)
    uniform = np.full_like(w, 1.0 / w.shape[-1])
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, w / np.where(total > 0, total, 1.0), uniform)


def enrichment_score(scores: Sequence[float], in_set: Sequence[bool], weight: float = 1.0) -> float:
    """Signed maximum deviation of the weighted running sum (scores descending)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.flatnonzero(np.asarray(in_set, dtype=bool))
    if len(pos) == 0 or len(pos) == len(scores):
        raise ValueError("gene set must be a non-empty proper subset of the ranking")
    w = _hit_weights(np.abs(scores[pos]), weight)
    top, bottom, _, _ = _extremes(pos, w, len(scores))
    return float(_signed(top, bottom))


def running_sum(scores: Sequence[float], in_set: Sequence[bool], weight: float = 1.0) -> np.ndarray:
    """The full running-sum walk, one value per ranked gene."""
    scores = np.asarray(scores, dtype=np.float64)
    hit = np.asarray(in_set, dtype=bool)
    k = int(hit.sum())
    w = np.zeros(len(scores))
    w[hit] = _hit_weights(np.abs(scores[hit]), weight)
    step = np.where(hit, w, -1.0 / (len(scores) - k))
    return np.cumsum(step)


def term_seed(seed: int, library: str, term: str) -> np.random.SeedSequence:
    """Per-term random stream, independent of evaluation order."""
    h = hashlib.sha256(f"{library}\x00{term}".encode()).digest()
    return np.random.SeedSequence([int(seed), *np.frombuffer(h[:16], dtype=np.uint32).tolist()])


def gsea_preranked(
    ranking: Sequence[tuple[str, float]],
    lib: GeneSetLibrary,
    n_perm: int = 1000,
    weight: float = 1.0,
    seed: int = 0,
    min_set: int = 1,
    max_set: int | None = None,
    group: str = "ranking",
) -> list[GseaRecord]:
    """Preranked GSEA with a gene-set permutation null.

    `ranking` is ``(gene, score)`` pairs sorted by descending score. Each
    term draws `n_perm` random gene sets of its size from its own seeded
    stream (PCG64 keyed on seed, library and term).
    """
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    genes = [g for g, _ in ranking]
    scores = np.array([s for _, s in ranking], dtype=np.float64)
    if len(set(genes)) != len(genes):
        raise ValueError("ranking has duplicate genes")
    if not np.all(np.isfinite(scores)):
        raise ValueError("ranking has non-finite scores")
    if np.any(np.diff(scores) > 0):
        raise ValueError("ranking must be sorted by descending score")
    index = {g: i for i, g in enumerate(genes)}
    n_genes = len(genes)
    abs_scores = np.abs(scores)

    terms, results = [], []
    for term in sorted(lib.sets):
        pos = np.array(sorted(index[g] for g in lib.sets[term] if g in index), dtype=np.int64)
        k = len(pos)
        if k == 0:
            logger.warning("%s: term %r has no genes in the ranking; skipped", group, term)
            continue
        if k < min_set or (max_set is not None and k > max_set):
            continue
        if k == n_genes:
            raise ValueError(f"term {term!r} covers the whole ranking")
        w = _hit_weights(abs_scores[pos], weight)
        top, bottom, after_hit, before_hit = _extremes(pos, w, n_genes)
        es = float(_signed(top, bottom))
        if es == top:
            peak = int(np.argmax(after_hit))
            edge = [genes[p] for p in pos[: peak + 1]]
        else:
            trough = int(np.argmin(before_hit))
            edge = [genes[p] for p in pos[trough:]]

        rng = np.random.Generator(np.random.PCG64(term_seed(seed, lib.name, term)))
        null_pos = np.sort(
            np.stack([rng.choice(n_genes, size=k, replace=False) for _ in range(n_perm)]), axis=1
        )
        null_w = _hit_weights(abs_scores[null_pos], weight)
        ntop, nbottom, _, _ = _extremes(null_pos, null_w, n_genes)
        null_es = _signed(ntop, nbottom)

        if es >= 0:
            same = null_es[null_es >= 0]
            exceed = np.count_nonzero(same >= es)
        else:
            same = null_es[null_es < 0]
            exceed = np.count_nonzero(same <= es)
        p = (1 + exceed) / (1 + len(same))
        nes = es / np.mean(np.abs(same)) if len(same) and np.mean(np.abs(same)) > 0 else float("nan")
        terms.append(term)
        results.append((k, es, float(nes), float(p), tuple(edge)))

    if not results:
        return []
    q = bh_adjust([r[3] for r in results])
    return [
        GseaRecord(term, lib.name, group, k, es, nes, p, float(qq), edge)
        for term, (k, es, nes, p, edge), qq in zip(terms, results, q)
    ]


# --- recurrence ----------------------------------------------------------------------


@dataclass(frozen=True)
class RecurrenceMatrix:
    terms: tuple[str, ...]
    groups: tuple[str, ...]
    values: np.ndarray
    counts: tuple[int, ...]

    def rows(self):
        for t, c, v in zip(self.terms, self.counts, self.values):
            yield (t, c, *[float(x) for x in v])


def recurrence(per_group: Mapping[str, Iterable[OraRecord]], q_threshold: float = 0.05) -> RecurrenceMatrix:
    """-log10(q) of significant terms per group, clipped at 10.

    A term found in several libraries for one group keeps its smallest q.
    Rows are ordered by recurrence (descending) then term name.
    """
    best: dict[str, dict[str, float]] = {}
    for group, records in per_group.items():
        for r in records:
            if r.q < q_threshold:
                cur = best.setdefault(r.term, {})
                cur[group] = min(cur.get(group, 1.0), r.q)
    groups = tuple(sorted(per_group))
    terms = sorted(best, key=lambda t: (-len(best[t]), t))
    values = np.zeros((len(terms), len(groups)))
    gpos = {g: j for j, g in enumerate(groups)}
    for i, t in enumerate(terms):
        for g, q in best[t].items():
            values[i, gpos[g]] = RECURRENCE_CLIP if q <= 0 else min(RECURRENCE_CLIP, -math.log10(q))
    counts = tuple(int(np.count_nonzero(row)) for row in values)
    return RecurrenceMatrix(tuple(terms), groups, values, counts)
