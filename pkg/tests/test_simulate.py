import numpy as np
import pytest

from tfscreen import io as tio
from tfscreen.demux import ASSIGNED, assign_identities, tf_cell_counts
from tfscreen.simulate import SimConfig, SimConfigError, simulate_screen, synthetic_rank_table, write_simulation

SMALL = dict(n_tfs=4, cells_per_tf=30, n_control_cells=40, n_genes=300, n_specific_per_tf=10,
             n_artifact_genes=20, n_replicates=2)


def test_deterministic():
    a = simulate_screen(SimConfig(**SMALL, seed=3))
    b = simulate_screen(SimConfig(**SMALL, seed=3))
    c = simulate_screen(SimConfig(**SMALL, seed=4))
    assert a.counts == b.counts
    assert a.tfmap.labels == b.tfmap.labels
    assert a.truth == b.truth
    assert a.counts != c.counts


def test_written_files_identical(tmp_path):
    sim = simulate_screen(SimConfig(**SMALL, seed=1))
    write_simulation(sim, tmp_path / "a")
    write_simulation(simulate_screen(SimConfig(**SMALL, seed=1)), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_truth_disjoint_for_many_seeds():
    for seed in range(10):
        t = simulate_screen(SimConfig(**SMALL, seed=seed)).truth
        sets = list(t.specific.values()) + [t.artifact]
        union = set().union(*sets)
        assert len(union) == sum(len(s) for s in sets)
        assert not any(g.startswith("MT-") for g in union)


def test_budget_and_field_errors():
    with pytest.raises(SimConfigError, match="budget"):
        SimConfig(n_genes=100)
    with pytest.raises(SimConfigError, match="frac_ambiguous"):
        SimConfig(frac_ambiguous=1.0)
    with pytest.raises(SimConfigError, match="cells_per_tf"):
        SimConfig(n_tfs=3, cells_per_tf=(1, 2))
    with pytest.raises(SimConfigError, match="bogus"):
        SimConfig.from_mapping({"bogus": 1})
    with pytest.raises(SimConfigError, match="n_tfs"):
        SimConfig.from_mapping({"n_tfs": "many"})
    assert SimConfig.from_mapping(SimConfig(**SMALL).to_mapping()) == SimConfig(**SMALL)


def test_demux_matches_truth():
    sim = simulate_screen(SimConfig(**SMALL, seed=2))
    pooled = [c for c, l in sim.truth.cell_label.items() if l != "control"]
    r = assign_identities(pooled, sim.tfmap)
    for c, s, tf in zip(r.cell_ids, r.status, r.tf):
        want = sim.truth.cell_label[c]
        if s == ASSIGNED:
            assert tf == want
        else:
            assert s == want


def test_fraction_counts_exact():
    sim = simulate_screen(SimConfig(**SMALL, seed=2))
    labels = list(sim.truth.cell_label.values())
    assert labels.count("ambiguous") == round(0.05 * 120)
    assert labels.count("undetected") == round(0.05 * 120)
    assert labels.count("control") == 40


def test_planted_25_15_gives_one_eligible():
    sim = simulate_screen(SimConfig(n_tfs=2, cells_per_tf=(25, 15), n_control_cells=10, n_genes=100,
                                    n_specific_per_tf=5, n_artifact_genes=5, frac_ambiguous=0, frac_undetected=0))
    pooled = [c for c, l in sim.truth.cell_label.items() if l != "control"]
    counts = tf_cell_counts(assign_identities(pooled, sim.tfmap))
    assert [(c.tf, c.n_cells, c.eligible) for c in counts] == [("TF01", 25, True), ("TF02", 15, False)]


def test_library_size_scales_linearly():
    cfg = SimConfig(n_tfs=1, cells_per_tf=1, n_control_cells=3000, n_genes=500, n_specific_per_tf=0,
                    n_artifact_genes=0, library_size_min=0.2, library_size_max=2.0, seed=8)
    sim = simulate_screen(cfg)
    ctrl = [i for i, c in enumerate(sim.counts.cell_ids) if sim.truth.cell_label[c] == "control"]
    totals = np.asarray(sim.counts.x.sum(axis=1)).ravel()[ctrl]
    # recover s_c from the same stream used to draw it
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(0,))))
    rates = rng.lognormal(cfg.base_mu, cfg.base_sigma, size=cfg.n_genes)
    rng.permutation(np.arange(cfg.n_mito_genes, cfg.n_genes))
    n_pert = 1
    rng.integers(0, cfg.n_replicates, size=n_pert)
    rng.permutation(np.arange(cfg.n_control_cells, cfg.n_control_cells + 1))
    s = rng.uniform(cfg.library_size_min, cfg.library_size_max, size=cfg.n_control_cells + 1)[:cfg.n_control_cells]
    slope, intercept = np.polyfit(s, totals, 1)
    assert slope == pytest.approx(rates.sum(), rel=0.05)
    assert abs(intercept) < 0.05 * rates.sum()


def test_fold_one_is_null():
    cfg = SimConfig(**{**SMALL, "effect_fold": 1.0}, artifact_fold=1.0, seed=6)
    sim = simulate_screen(cfg)
    assert sim.truth.effect == {tf: 0.0 for tf in cfg.tf_names}


def test_rank_table_orders_by_effect():
    cfg = SimConfig(n_tfs=4, cells_per_tf=5, n_control_cells=5, n_genes=200,
                    n_specific_per_tf=(5, 20, 10, 15), n_artifact_genes=10)
    ranks = synthetic_rank_table(simulate_screen(cfg).truth, blank_every=4)
    assert ranks.ranks("scrna_rank") == {"TF01": 4.0, "TF02": 1.0, "TF03": 3.0, "TF04": 2.0}
    assert "TF04" not in ranks.ranks("avg_rank")


def test_written_dataset_reads_back(tmp_path):
    sim = simulate_screen(SimConfig(**SMALL, seed=1))
    write_simulation(sim, tmp_path)
    for name, m in sim.samples.items():
        assert tio.read_10x_dir(tmp_path / "samples" / name) == m
    assert tio.read_tfmap(tmp_path / "tfmap.csv").labels == sim.tfmap.labels
    assert (tmp_path / "config.toml").is_file()


def test_null_simulation_false_positive_rate():
    from tfscreen.de import differential_expression
    from tfscreen.qc import normalize_log1p

    rates = []
    for seed in range(5):
        cfg = SimConfig(n_tfs=3, cells_per_tf=60, n_control_cells=120, n_genes=300, n_specific_per_tf=10,
                        n_artifact_genes=20, effect_fold=1.0, artifact_fold=1.0, seed=seed)
        sim = simulate_screen(cfg)
        e = normalize_log1p(sim.counts)
        control = [c for c, l in sim.truth.cell_label.items() if l == "control"]
        for tf in cfg.tf_names:
            cells = [c for c, l in sim.truth.cell_label.items() if l == tf]
            t = differential_expression(e, cells, control, lfc_threshold=0.5)
            rates.append(np.mean(t.p < 0.05))
            assert t.n_significant <= 0.05 * e.n_genes
    assert np.mean(rates) <= 0.05 + 0.01
