"""Acceptance gate. Each test prints one ``ACCEPTANCE`` line with its verdict.

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import itertools
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from tfscreen import io as tio
from tfscreen.de import background_threshold, bh_adjust, rank_sum_z
from tfscreen.demux import STATUSES
from tfscreen.enrich import gsea_preranked, hypergeom_tail
from tfscreen.io import GeneSetLibrary
from tfscreen.matrix import CountMatrix, mito_genes_by_prefix, per_cell_stats
from tfscreen.pipeline import STEPS, Pipeline, load_config
from tfscreen.qc import QcConfig, filter_cells, normalize_log1p
from tfscreen.simulate import SimConfig, simulate_screen, write_simulation
from tfscreen.validate import spearman, spearman_pvalue

# the screen used for the end-to-end criteria
SCREEN = dict(n_tfs=20, cells_per_tf=100, n_control_cells=500, n_genes=2000, n_specific_per_tf=20,
              effect_fold=4.0, n_artifact_genes=200, artifact_fold=3.0, frac_ambiguous=0.05,
              frac_undetected=0.05, seed=0)


def verdict(capsys, label, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {label}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, f"{label}: {detail}"


def snapshot(out):
    out = Path(out)
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name not in ("run_manifest.json", ".tfscreen.lock")}


@pytest.fixture(scope="module")
def screen(tmp_path_factory):
    root = tmp_path_factory.mktemp("screen")
    sim = simulate_screen(SimConfig(**SCREEN))
    write_simulation(sim, root / "data")
    cfg = load_config(root / "data" / "config.toml")
    out = root / "data" / cfg.output_dir
    logs = []
    t0 = time.perf_counter()
    res = Pipeline(cfg, threads=1, log=logs.append).run()
    elapsed = time.perf_counter() - t0
    return dict(root=root, sim=sim, cfg=cfg, out=out, result=res, elapsed=elapsed, logs=logs)


# --- 1 -------------------------------------------------------------------------------


def _bh_brute(p):
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    q = [0.0] * m
    for pos, i in enumerate(order):
        q[i] = min(1.0, min(p[order[j]] * m / (j + 1) for j in range(pos, m)))
    return q


def _tail_exact(k, K, n, N):
    hits = sum(math.comb(K, i) * math.comb(N - K, n - i) for i in range(k, min(K, n) + 1))
    return Fraction(hits, math.comb(N, n))


def test_criterion_1_statistical_oracles(capsys):
    rng = np.random.default_rng(1)
    bh_err = 0.0
    for _ in range(1000):
        p = rng.random(int(rng.integers(1, 60)))
        if rng.random() < 0.3:
            p = np.round(p, 2)
        bh_err = max(bh_err, float(np.max(np.abs(bh_adjust(p) - _bh_brute(p.tolist())))))

    ora_err, n_cfg = 0.0, 0
    for N in range(1, 21):
        for K in range(N + 1):
            for n in range(N + 1):
                for k in range(max(0, n - (N - K)), min(K, n) + 1):
                    ora_err = max(ora_err, abs(hypergeom_tail(k, K, n, N) - float(_tail_exact(k, K, n, N))))
                    n_cfg += 1

    z, _ = rank_sum_z([1, 2, 3], [4, 5, 6])

    order_ok = True
    for n in range(3, 8):
        rhos = np.round(np.abs([spearman(np.arange(n), p)[0] for p in itertools.permutations(range(n))]), 12)
        levels = np.unique(rhos)
        exact = [np.mean(rhos >= r) for r in levels]
        approx = [spearman_pvalue(r, n) for r in levels]
        order_ok &= bool(np.all(np.diff(exact) <= 0) and np.all(np.diff(approx) <= 0))

    ok = bh_err <= 1e-12 and ora_err <= 1e-12 and abs(z - (-1.9640)) <= 1e-3 and order_ok
    verdict(capsys, "criterion 1 (statistical oracles)", ok,
            f"bh max err {bh_err:.1e} over 1000 vectors; ora max err {ora_err:.1e} over {n_cfg} configs; "
            f"z={z:.4f}; spearman ordering n<=7 {'agrees' if order_ok else 'DISAGREES'}")


# --- 2 -------------------------------------------------------------------------------


def test_criterion_2_published_arithmetic(capsys):
    t0 = time.perf_counter()
    thr = background_threshold(61, 0.70)
    p1 = spearman_pvalue(0.316, 61)
    p2 = spearman_pvalue(0.219, 46)
    ms = (time.perf_counter() - t0) * 1000
    ok = thr == 43 and abs(p1 - 0.013) <= 0.002 and abs(p2 - 0.14) <= 0.01 and ms < 100
    verdict(capsys, "criterion 2 (published arithmetic)", ok,
            f"ceil(0.70*61)={thr}; p(0.316,61)={p1:.4f}; p(0.219,46)={p2:.4f}; {ms:.2f} ms")


# --- 3 -------------------------------------------------------------------------------


def _sig_genes(path):
    _, rows = tio.read_table(path, ",")
    return {r["gene"] for r in rows if tio.parse_bool(r["significant"])}


def test_criterion_3_planted_structure_recovered(screen, capsys):
    out, truth = screen["out"], screen["sim"].truth
    _, bg_rows = tio.read_table(out / "background" / "background_genes.csv", ",")
    bg = {r["gene"] for r in bg_rows}
    bg_recall = len(bg & truth.artifact) / len(truth.artifact)
    bg_precision = len(bg & truth.artifact) / len(bg) if bg else 0.0

    tp = fp = fn = 0
    per_tf_recall, per_tf_precision = [], []
    for tf, planted in sorted(truth.specific.items()):
        found = _sig_genes(out / "background" / "specific" / f"{tf}.csv")
        hit = len(found & planted)
        tp, fp, fn = tp + hit, fp + len(found - planted), fn + len(planted - found)
        per_tf_recall.append(hit / len(planted))
        per_tf_precision.append(hit / len(found) if found else 0.0)
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp else 0.0
    elapsed = screen["elapsed"]
    ok = (bg_recall >= 0.95 and bg_precision >= 0.90 and recall >= 0.80 and precision >= 0.80
          and np.mean(per_tf_recall) >= 0.80 and np.mean(per_tf_precision) >= 0.80 and elapsed <= 60)
    verdict(capsys, "criterion 3 (recovery + runtime)", ok,
            f"background recall {bg_recall:.3f} precision {bg_precision:.3f}; specific recall {recall:.3f} "
            f"precision {precision:.3f} (per-TF means {np.mean(per_tf_recall):.3f}/{np.mean(per_tf_precision):.3f}); "
            f"pipeline {elapsed:.1f} s single-threaded")


def test_criterion_3_control_reference_beats_one_vs_rest(screen, capsys):
    out = screen["out"]
    _, rows = tio.read_table(out / "background" / "pertf_summary.csv", ",")
    n_specific = sum(int(r["n_specific_degs"]) >= 1 for r in rows)
    n_ovr = sum(bool(r["n_ovr_degs"]) and int(r["n_ovr_degs"]) >= 1 for r in rows)
    verdict(capsys, "criterion 3 (control+subtraction vs one-vs-rest)", n_specific > n_ovr,
            f"TFs with >=1 specific DEG: {n_specific}; with >=1 one-vs-rest DEG: {n_ovr} "
            f"(strictly greater required)")


# --- 4 -------------------------------------------------------------------------------


def test_criterion_4_determinism(screen, capsys):
    root, cfg = screen["root"], screen["cfg"]
    base = snapshot(screen["out"])
    import dataclasses

    again = dataclasses.replace(cfg, output_dir=root / "again")
    eight = dataclasses.replace(cfg, output_dir=root / "threads8")
    Pipeline(again, threads=1).run()
    Pipeline(eight, threads=8).run()
    same_seed = snapshot(root / "again") == base
    same_threads = snapshot(root / "threads8") == base
    verdict(capsys, "criterion 4 (determinism)", same_seed and same_threads and len(base) > 0,
            f"{len(base)} output files; repeat run identical: {same_seed}; threads 1 vs 8 identical: {same_threads}")


# --- 5 -------------------------------------------------------------------------------


def test_criterion_5_idempotence(screen, capsys):
    before = snapshot(screen["out"])
    logs = []
    res = Pipeline(screen["cfg"], log=logs.append).run()
    runs = [l for l in logs if "action=run" in l]
    skips = [l for l in logs if "action=skip" in l]
    unchanged = snapshot(screen["out"]) == before
    ok = not runs and len(skips) == len(STEPS) and not res.executed and unchanged
    verdict(capsys, "criterion 5 (idempotence)", ok,
            f"second run: {len(runs)} step bodies executed, {len(skips)} skipped per log; outputs unchanged: {unchanged}")


# --- 6 -------------------------------------------------------------------------------


def test_criterion_6_normalization_and_qc_boundary(capsys):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        n_cells, n_genes = int(rng.integers(1, 40)), int(rng.integers(1, 60))
        x = sp.random(n_cells, n_genes, density=float(rng.uniform(0.05, 0.8)), random_state=rng,
                      data_rvs=lambda k: rng.integers(1, 10_000, k)).toarray()
        x[:, 0] += 1
        m = CountMatrix(x, tuple(f"c{i}" for i in range(n_cells)), tuple(f"g{j}" for j in range(n_genes)))
        sums = np.asarray(np.expm1(normalize_log1p(m).x).sum(axis=1)).ravel()
        worst = max(worst, float(np.max(np.abs(sums / 10_000.0 - 1))))

    genes = ["MT-1"] + [f"G{j}" for j in range(1, 300)]
    exact_genes = np.zeros(300, dtype=int)
    exact_genes[1:201] = 1
    exact_mito = np.zeros(300, dtype=int)
    exact_mito[1:200] = 1
    exact_mito[1:9] = 2  # 207 nuclear counts
    exact_mito[0] = 23   # 23 / 230 = 10%
    m = CountMatrix(np.array([exact_genes, exact_mito]), ("genes200", "mito10"), tuple(genes))
    stats = per_cell_stats(m, mito_genes_by_prefix(m.gene_ids))
    kept = filter_cells(m, stats, QcConfig())
    boundary_ok = (stats.genes_detected.tolist() == [200, 200] and stats.pct_mito[1] == 10.0
                   and kept.cell_ids == ("genes200", "mito10"))
    verdict(capsys, "criterion 6 (normalization + QC boundary)", worst <= 1e-6 and boundary_ok,
            f"max relative error of expm1 sums {worst:.1e} over 100 matrices; boundary cells retained: {boundary_ok}")


# --- 7 -------------------------------------------------------------------------------


def test_criterion_7_demux_partition_and_gsea(screen, capsys):
    out, truth = screen["out"], screen["sim"].truth
    _, rows = tio.read_table(out / "demux" / "assignments.csv", ",")
    match = sum((r["tf"] if r["status"] == "assigned" else r["status"]) == truth.cell_label[r["cell_id"]]
                for r in rows)
    pooled = sum(1 for l in truth.cell_label.values() if l != "control")
    _, summ = tio.read_table(out / "demux" / "demux_summary.csv", ",")
    partition_ok = all(
        int(r["n_assigned"]) + int(r["n_ambiguous"]) + int(r["n_undetected"]) + int(r["n_not_in_map"]) == int(r["n_cells"])
        for r in summ
    ) and all(r["status"] in STATUSES for r in rows)

    ranking = [("g1", 3.0), ("g2", 2.0), ("g3", 1.0), ("g4", 0.5)]
    lib = GeneSetLibrary("hand", {"first": frozenset({"g1"}), "last": frozenset({"g4"})})
    recs = {r.term: r for r in gsea_preranked(ranking, lib, n_perm=100, seed=0)}
    es_ok = recs["first"].es == 1.0 and recs["last"].es == -1.0
    rng = np.random.default_rng(7)
    genes = [f"g{i}" for i in range(300)]
    big = list(zip(genes, np.sort(rng.normal(size=300))[::-1].tolist()))
    blib = GeneSetLibrary("b", {f"T{t}": frozenset(rng.choice(genes, 20, replace=False)) for t in range(5)})
    reproducible = gsea_preranked(big, blib, n_perm=500, seed=11) == gsea_preranked(big, blib, n_perm=500, seed=11)

    ok = match == len(rows) == pooled and partition_ok and es_ok and reproducible
    verdict(capsys, "criterion 7 (demux partition + GSEA)", ok,
            f"{match}/{len(rows)} pooled cells match truth; partition exact: {partition_ok}; "
            f"ES {recs['first'].es:+.1f}/{recs['last'].es:+.1f}; permutation p reproducible: {reproducible}")
