"""Seeded synthetic pooled screens with planted TF effects and a shared artifact.

Randomness comes from numpy's PCG64 bit generator. A run with seed ``s``
uses ``SeedSequence(s, spawn_key=(0,))`` for every global draw (gene rates,
planted gene sets, cell layout, barcodes) and
``SeedSequence(s, spawn_key=(1, i))`` for the counts of cell ``i``, so a
cell's counts do not depend on how many other cells are generated or in
what order.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import io as tio
from .demux import AMB, NA, TfLabel, TfMap
from .matrix import CellAnnotations, CountMatrix, merge_samples

CONTROL = "control"


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_tfs: int = 20
    cells_per_tf: int | tuple[int, ...] = 100
    n_control_cells: int = 500
    n_genes: int = 2000
    n_specific_per_tf: int | tuple[int, ...] = 20
    n_artifact_genes: int = 200
    effect_fold: float | tuple[float, ...] = 4.0
    artifact_fold: float = 3.0
    base_mu: float = 3.0
    base_sigma: float = 0.7
    library_size_min: float = 0.5
    library_size_max: float = 1.5
    frac_ambiguous: float = 0.05
    frac_undetected: float = 0.05
    n_replicates: int = 2
    n_mito_genes: int = 13
    control_sample: str = "EB"
    pooled_prefix: str = "perturb_S"
    seed: int = 0

    def __post_init__(self):
        for name in ("cells_per_tf", "n_specific_per_tf", "effect_fold"):
            v = getattr(self, name)
            if isinstance(v, (list, tuple)):
                if len(v) != self.n_tfs:
                    raise SimConfigError(f"{name}: expected {self.n_tfs} values, got {len(v)}")
                object.__setattr__(self, name, tuple(v))
        for name in ("n_tfs", "n_genes", "n_replicates"):
            if getattr(self, name) < 1:
                raise SimConfigError(f"{name}: must be at least 1")
        for name in ("n_control_cells", "n_artifact_genes", "n_mito_genes"):
            if getattr(self, name) < 0:
                raise SimConfigError(f"{name}: must be non-negative")
        if min(self.tf_cells) < 1:
            raise SimConfigError("cells_per_tf: every TF needs at least one cell")
        if min(self.tf_specific) < 0:
            raise SimConfigError("n_specific_per_tf: must be non-negative")
        if min(self.tf_fold) < 1 or self.artifact_fold < 1:
            raise SimConfigError("effect_fold/artifact_fold: folds must be at least 1")
        if self.base_sigma < 0:
            raise SimConfigError("base_sigma: must be non-negative")
        if not 0 < self.library_size_min <= self.library_size_max:
            raise SimConfigError("library_size_min: need 0 < min <= max")
        for name in ("frac_ambiguous", "frac_undetected"):
            if not 0 <= getattr(self, name) < 1:
                raise SimConfigError(f"{name}: must be in [0, 1)")
        if self.frac_ambiguous + self.frac_undetected >= 1:
            raise SimConfigError("frac_ambiguous: ambiguous plus undetected must stay below 1")
        budget = sum(self.tf_specific) + self.n_artifact_genes + self.n_mito_genes
        if budget > self.n_genes:
            raise SimConfigError(
                f"n_genes: gene budget exceeded ({budget} planted/mito genes > {self.n_genes})"
            )

    def _per_tf(self, v):
        return tuple(v) if isinstance(v, tuple) else (v,) * self.n_tfs

    @property
    def tf_cells(self) -> tuple[int, ...]:
        return self._per_tf(self.cells_per_tf)

    @property
    def tf_specific(self) -> tuple[int, ...]:
        return self._per_tf(self.n_specific_per_tf)

    @property
    def tf_fold(self) -> tuple[float, ...]:
        return self._per_tf(self.effect_fold)

    @property
    def tf_names(self) -> tuple[str, ...]:
        width = max(2, len(str(self.n_tfs)))
        return tuple(f"TF{i + 1:0{width}d}" for i in range(self.n_tfs))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SimConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in fields:
                raise SimConfigError(f"{key}: unknown simulation setting")
            default = fields[key].default
            try:
                kwargs[key] = _coerce(value, default)
            except (TypeError, ValueError):
                raise SimConfigError(f"{key}: invalid value {value!r}") from None
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}


def _coerce(value, default):
    if isinstance(value, bool) or isinstance(default, bool):
        raise TypeError
    if isinstance(value, (list, tuple)):
        return tuple(_coerce(v, default) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise TypeError
        return value
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass(frozen=True)
class SimTruth:
    specific: Mapping[str, frozenset[str]]
    artifact: frozenset[str]
    cell_label: Mapping[str, str]
    cell_tf: Mapping[str, str | None]
    effect: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        seen = set(self.artifact)
        for tf, genes in self.specific.items():
            if seen & genes:
                raise ValueError(f"planted set of {tf} overlaps another planted set")
            seen |= genes


@dataclass(frozen=True)
class SimResult:
    counts: CountMatrix
    annotations: CellAnnotations
    tfmap: TfMap
    truth: SimTruth
    samples: Mapping[str, CountMatrix]
    config: SimConfig


_BASES = np.array(list("ACGT"))


def _barcodes(rng: np.random.Generator, n: int) -> list[str]:
    out, seen = [], set()
    while len(out) < n:
        draw = rng.integers(0, 4, size=(n - len(out), 16))
        for row in draw:
            bc = "".join(_BASES[row])
            if bc not in seen:
                seen.add(bc)
                out.append(bc)
    return out


def _cell_counts(seed: int, index: int, rate: np.ndarray) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, index))))
    return rng.poisson(rate)


def simulate_screen(cfg: SimConfig) -> SimResult:
    """Generate a control sample plus pooled replicates with a barcode map.

    count(c, g) ~ Poisson(s_c * rate_g * f(c, g)) where f is the TF fold on
    the cell's planted genes, the artifact fold on artifact genes in every
    perturbed cell, and 1 otherwise. Ambiguous and undetected cells are
    perturbed cells whose map label is withheld.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(0,))))
    width = len(str(cfg.n_genes))
    n_mito = cfg.n_mito_genes
    gene_ids = [f"MT-G{i + 1:02d}" for i in range(n_mito)]
    gene_ids += [f"G{i + 1:0{width}d}" for i in range(cfg.n_genes - n_mito)]
    rates = rng.lognormal(cfg.base_mu, cfg.base_sigma, size=cfg.n_genes)

    pool = rng.permutation(np.arange(n_mito, cfg.n_genes))
    artifact_idx = np.sort(pool[: cfg.n_artifact_genes])
    start = cfg.n_artifact_genes
    specific_idx = {}
    for tf, k in zip(cfg.tf_names, cfg.tf_specific):
        specific_idx[tf] = np.sort(pool[start:start + k])
        start += k

    # cell layout: controls first, then perturbed cells grouped by TF
    cell_tf: list[str | None] = [None] * cfg.n_control_cells
    for tf, n in zip(cfg.tf_names, cfg.tf_cells):
        cell_tf.extend([tf] * n)
    n_cells = len(cell_tf)
    n_pert = n_cells - cfg.n_control_cells
    pert_idx = np.arange(cfg.n_control_cells, n_cells)
    replicate = np.full(n_cells, -1)
    replicate[pert_idx] = rng.integers(0, cfg.n_replicates, size=n_pert)
    label = [CONTROL] * cfg.n_control_cells + ["assigned"] * n_pert
    shuffled = rng.permutation(pert_idx)
    n_amb = int(round(cfg.frac_ambiguous * n_pert))
    n_und = int(round(cfg.frac_undetected * n_pert))
    for i in shuffled[:n_amb]:
        label[i] = "ambiguous"
    for i in shuffled[n_amb:n_amb + n_und]:
        label[i] = "undetected"
    libsize = rng.uniform(cfg.library_size_min, cfg.library_size_max, size=n_cells)
    barcodes = _barcodes(rng, n_cells)

    fold_of = dict(zip(cfg.tf_names, cfg.tf_fold))
    rows = []
    for i in range(n_cells):
        rate = rates * libsize[i]
        tf = cell_tf[i]
        if tf is not None:
            rate = rate.copy()
            rate[artifact_idx] *= cfg.artifact_fold
            rate[specific_idx[tf]] *= fold_of[tf]
        rows.append(sp.csr_matrix(_cell_counts(cfg.seed, i, rate)))
    full = sp.vstack(rows, format="csr") if rows else sp.csr_matrix((0, cfg.n_genes))

    width_rep = len(str(cfg.n_replicates))
    rep_names = [f"{cfg.pooled_prefix}{r + 1:0{width_rep}d}" for r in range(cfg.n_replicates)]
    samples: dict[str, CountMatrix] = {}
    order = [(cfg.control_sample, np.arange(cfg.n_control_cells))]
    order += [(rep_names[r], pert_idx[replicate[pert_idx] == r]) for r in range(cfg.n_replicates)]
    sample_of = {}
    for name, idx in order:
        samples[name] = CountMatrix(full[idx], tuple(f"{barcodes[i]}-1" for i in idx), tuple(gene_ids))
        for i in idx:
            sample_of[int(i)] = name

    labels: dict[str, TfLabel] = {}
    for i in pert_idx:
        if label[i] == "ambiguous":
            labels[barcodes[i]] = AMB
        elif label[i] == "undetected":
            labels[barcodes[i]] = NA
        else:
            tf = cell_tf[i]
            labels[barcodes[i]] = TfLabel.tf(tf, f"NM_{int(tf[2:]):06d}")
    tfmap = TfMap(labels)

    merged, ann = merge_samples(list(samples.items()))
    merged_id = {i: f"{sample_of[i]}_{barcodes[i]}-1" for i in range(n_cells)}
    true_tf = {merged_id[i]: cell_tf[i] for i in range(n_cells)}
    true_label = {merged_id[i]: (cell_tf[i] if label[i] == "assigned" else label[i]) for i in range(n_cells)}
    status_of = {merged_id[i]: (None if label[i] == CONTROL else label[i]) for i in range(n_cells)}
    ann = dataclasses.replace(
        ann,
        tf_label=tuple(true_tf[c] for c in ann.cell_ids),
        status=tuple(status_of[c] for c in ann.cell_ids),
    )
    truth = SimTruth(
        specific={tf: frozenset(gene_ids[j] for j in idx) for tf, idx in specific_idx.items()},
        artifact=frozenset(gene_ids[j] for j in artifact_idx),
        cell_label=true_label,
        cell_tf=true_tf,
        effect={tf: n * math.log(f) for tf, n, f in zip(cfg.tf_names, cfg.tf_specific, cfg.tf_fold)},
    )
    return SimResult(merged, ann, tfmap, truth, samples, cfg)


def synthetic_rank_table(truth: SimTruth, blank_every: int = 4) -> tio.RankTable:
    """Ranks ordered by planted effect (1 = strongest); a second, sparser column
    leaves every `blank_every`-th TF blank."""
    order = sorted(truth.effect, key=lambda t: (-truth.effect[t], t))
    rank = {t: float(i + 1) for i, t in enumerate(order)}
    tfs = tuple(sorted(truth.effect))
    avg = tuple(None if blank_every and (i + 1) % blank_every == 0 else rank[t] for i, t in enumerate(tfs))
    return tio.RankTable(tfs, {"scrna_rank": tuple(rank[t] for t in tfs), "avg_rank": avg})


def synthetic_library(truth: SimTruth, gene_ids: Sequence[str], seed: int, n_decoys: int = 40) -> tio.GeneSetLibrary:
    """Target sets for each TF, the artifact set, and random decoy sets."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(2,))))
    sets = {f"{tf}_TARGETS": genes for tf, genes in truth.specific.items() if genes}
    if truth.artifact:
        sets["ARTIFACT_RESPONSE"] = truth.artifact
    genes = np.array(sorted(gene_ids))
    for d in range(n_decoys):
        size = int(rng.integers(10, 61))
        sets[f"RANDOM_SET_{d + 1:03d}"] = frozenset(rng.choice(genes, size=min(size, len(genes)), replace=False).tolist())
    return tio.GeneSetLibrary("simulated", sets)


def pipeline_config_text(result: SimResult, output_dir: str = "results") -> str:
    cfg = result.config
    lines = [
        "# pipeline configuration for a simulated screen",
        f'output_dir = "{output_dir}"',
        'tfmap = "tfmap.csv"',
        'rank_table = "ranks.csv"',
        'gmt = ["simulated.gmt"]',
        f'control_pattern = "^{cfg.control_sample}$"',
        f"seed = {cfg.seed}",
        "",
    ]
    for name in result.samples:
        pooled = name != cfg.control_sample
        lines += [
            f'[samples."{name}"]',
            f'path = "samples/{name}"',
            f'condition = "{"perturb" if pooled else name}"',
            f"pooled = {'true' if pooled else 'false'}",
            "",
        ]
    return "\n".join(lines)


def write_simulation(result: SimResult, out_dir) -> None:
    """Write samples, barcode map, truth tables, ranks, a GMT and a run config."""
    out = Path(out_dir)
    for name, m in result.samples.items():
        tio.write_10x_dir(m, out / "samples" / name)
    tio.write_tfmap(result.tfmap, out / "tfmap.csv")
    truth = result.truth
    ann = result.annotations
    tio.write_table(
        sorted(
            (c, s, r, truth.cell_label[c], truth.cell_tf[c])
            for c, s, r in zip(ann.cell_ids, ann.sample, ann.replicate)
        ),
        ["cell_id", "sample", "replicate", "label", "tf"],
        out / "truth_cells.csv",
    )
    gene_rows = [(g, "artifact", None) for g in truth.artifact]
    gene_rows += [(g, "specific", tf) for tf, genes in truth.specific.items() for g in genes]
    tio.write_table(sorted(gene_rows), ["gene", "role", "tf"], out / "truth_genes.csv")
    tio.write_rank_table(synthetic_rank_table(truth), out / "ranks.csv")
    tio.write_gmt(synthetic_library(truth, result.counts.gene_ids, result.config.seed), out / "simulated.gmt")
    tio.write_text(out / "config.toml", pipeline_config_text(result))
