"""Idempotent, resumable end-to-end pipeline.

Every step writes into ``<output_dir>/<step>/`` and finishes by writing a
``_step.json`` marker holding a digest of its parameters, its raw input
files (by content) and the digests of the steps it depends on, plus a
content hash of every file it produced. A step is skipped when its marker
digest matches and all recorded outputs are intact.
"""

from __future__ import annotations

import dataclasses
import fcntl
import hashlib
import json
import logging
import os
import platform
import re
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import scipy

from . import __version__
from . import io as tio
from .de import (
    DETable, differential_expression_many, identify_background, read_de_table,
    subtract_background, write_de_table,
)
from .demux import (
    DEFAULT_CELL_ID_PATTERN, DemuxResult, assign_identities, barcode_extractor,
    demux_summary, tf_cell_counts,
)
from .enrich import GSEA_COLUMNS, ORA_COLUMNS, gsea_preranked, ora, recurrence
from .matrix import merge_samples, mito_genes_by_prefix, per_cell_stats
from .qc import QcConfig, filter_cells, filter_genes, normalize_log1p
from .validate import EXPECTED_SIGN, compare_to_published

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("tfscreen.pipeline")

STEPS = (
    "qc", "merge", "demux", "de-condition", "de-pertf",
    "background", "enrich", "gsea", "validate", "report",
)
DEPENDS = {
    "qc": (),
    "merge": ("qc",),
    "demux": ("merge",),
    "de-condition": ("merge",),
    "de-pertf": ("merge", "demux"),
    "background": ("de-pertf",),
    "enrich": ("background", "de-condition"),
    "gsea": ("de-condition",),
    "validate": ("de-pertf", "background"),
    "report": (),  # every other active step, filled in at run time
}
MARKER = "_step.json"
THREADS_ENV = "TFSCREEN_THREADS"


class PipelineError(RuntimeError):
    def __init__(self, step: str, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SampleSpec:
    name: str
    path: Path
    condition: str
    replicate: str
    pooled: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    """All pipeline settings. Defaults reproduce the published analysis settings."""

    output_dir: Path
    samples: tuple[SampleSpec, ...]
    tfmap: Path | None = None
    gmt: tuple[Path, ...] = ()
    rank_table: Path | None = None
    # qc
    min_genes: int = 200
    max_pct_mito: float = 10.0
    min_cells: int = 3
    target_sum: float = 10_000.0
    mito_prefix: str = "MT-"
    # demux
    tfmap_barcode_column: str = "barcode"
    tfmap_label_column: str = "tf"
    tfmap_isoform_delimiter: str = "|"
    cell_id_pattern: str = DEFAULT_CELL_ID_PATTERN
    min_cells_per_tf: int = 20
    # de
    control_pattern: str = "^EB"
    condition_lfc: float = 1.0
    pertf_lfc: float = 0.5
    alpha: float = 0.05
    tie_correct: bool = True
    background_fraction: float = 0.70
    top_n_genes: int = 5
    # enrichment
    min_degs_for_ora: int = 5
    ora_min_set: int = 5
    ora_max_set: int = 500
    gsea_n_perm: int = 1000
    gsea_weight: float = 1.0
    seed: int = 0
    # validation
    rank_tf_column: str = "tf"
    uppercase_symbols: bool = False
    # run control
    threads: int = 1
    strict: bool = False

    def __post_init__(self):
        for name in ("min_genes", "max_pct_mito", "min_cells", "target_sum", "condition_lfc",
                     "pertf_lfc", "alpha", "background_fraction", "min_cells_per_tf",
                     "gsea_n_perm", "threads"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        if self.alpha >= 1 or self.background_fraction > 1:
            raise ConfigError("alpha/background_fraction: must not exceed 1")
        if self.ora_min_set > self.ora_max_set:
            raise ConfigError("ora_min_set: must not exceed ora_max_set")
        names = [s.name for s in self.samples]
        if len(set(names)) != len(names):
            raise ConfigError("samples: duplicate sample name")
        try:
            re.compile(self.control_pattern)
            re.compile(self.cell_id_pattern)
        except re.error as exc:
            raise ConfigError(f"pattern: {exc}") from None

    @property
    def qc_config(self) -> QcConfig:
        return QcConfig(self.min_genes, self.max_pct_mito, self.min_cells, self.target_sum)

    def is_control(self, sample: SampleSpec) -> bool:
        return re.search(self.control_pattern, sample.condition) is not None


_PATH_KEYS = {"output_dir", "tfmap", "rank_table"}


def _coerce_field(key: str, value: Any, default: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def config_from_mapping(data: Mapping[str, Any], base: Path = Path(".")) -> PipelineConfig:
    """Build a config from parsed TOML; relative paths resolve against `base`."""
    fields = {f.name: f for f in dataclasses.fields(PipelineConfig)}
    kw: dict[str, Any] = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{key}: unknown configuration key")
        if key == "samples":
            continue
        if key in _PATH_KEYS:
            if not isinstance(value, str):
                raise ConfigError(f"{key}: expected a path string")
            kw[key] = base / value
        elif key == "gmt":
            if isinstance(value, str):
                value = [value]
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError("gmt: expected a list of paths")
            kw[key] = tuple(base / v for v in value)
        else:
            kw[key] = _coerce_field(key, value, fields[key].default)
    if "output_dir" not in kw:
        raise ConfigError("output_dir: required")
    samples = []
    raw = data.get("samples", {})
    if not isinstance(raw, Mapping) or not raw:
        raise ConfigError("samples: at least one [samples.<name>] table is required")
    for name in sorted(raw):
        spec = raw[name]
        if not isinstance(spec, Mapping) or "path" not in spec:
            raise ConfigError(f"samples.{name}.path: required")
        extra = set(spec) - {"path", "condition", "replicate", "pooled"}
        if extra:
            raise ConfigError(f"samples.{name}.{sorted(extra)[0]}: unknown sample key")
        pooled = spec.get("pooled", False)
        if not isinstance(pooled, bool):
            raise ConfigError(f"samples.{name}.pooled: expected true/false")
        samples.append(SampleSpec(
            name, base / spec["path"], str(spec.get("condition", name)),
            str(spec.get("replicate", name)), pooled,
        ))
    kw["samples"] = tuple(samples)
    return PipelineConfig(**kw)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_mapping(data, path.parent)


# --- helpers ---------------------------------------------------------------------------


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode()


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def resolve_threads(explicit: int | None, configured: int) -> int:
    if explicit is not None:
        return max(1, explicit)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: not an integer: {env!r}") from None
    return configured


@dataclass
class RunResult:
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, force: bool = False, threads: int | None = None,
                 strict: bool | None = None, log: Callable[[str], None] | None = None):
        self.cfg = cfg
        self.force = force
        self.threads = resolve_threads(threads, cfg.threads)
        self.strict = cfg.strict if strict is None else strict
        self.out = Path(cfg.output_dir)
        self._log = log or logger.info
        self._digests: dict[str, str] = {}

    # -- step graph ---------------------------------------------------------

    def _missing_config(self, step: str) -> str | None:
        cfg = self.cfg
        if step in ("demux",) and cfg.tfmap is None:
            return "no tfmap configured"
        if step in ("demux",) and not any(s.pooled for s in cfg.samples):
            return "no pooled samples configured"
        if step in ("enrich", "gsea") and not cfg.gmt:
            return "no gmt libraries configured"
        if step == "validate" and cfg.rank_table is None:
            return "no rank_table configured"
        if step == "de-condition" and not any(cfg.is_control(s) for s in cfg.samples):
            return f"no sample condition matches control_pattern {cfg.control_pattern!r}"
        for dep in DEPENDS[step]:
            why = self._missing_config(dep)
            if why:
                return why
        return None

    def available_steps(self) -> list[str]:
        return [s for s in STEPS if self._missing_config(s) is None]

    def dependencies(self, step: str) -> tuple[str, ...]:
        if step == "report":
            return tuple(s for s in self.available_steps() if s != "report")
        return DEPENDS[step]

    # -- digests and markers ------------------------------------------------

    def _params(self, step: str) -> dict:
        c = self.cfg
        samples = [[s.name, s.condition, s.replicate, s.pooled] for s in c.samples]
        return {
            "qc": {"min_genes": c.min_genes, "max_pct_mito": c.max_pct_mito, "min_cells": c.min_cells,
                   "mito_prefix": c.mito_prefix, "samples": samples},
            "merge": {"samples": samples},
            "demux": {"barcode_column": c.tfmap_barcode_column, "label_column": c.tfmap_label_column,
                      "isoform_delimiter": c.tfmap_isoform_delimiter, "cell_id_pattern": c.cell_id_pattern,
                      "min_cells_per_tf": c.min_cells_per_tf},
            "de-condition": {"target_sum": c.target_sum, "lfc": c.condition_lfc, "alpha": c.alpha,
                             "tie_correct": c.tie_correct, "control_pattern": c.control_pattern},
            "de-pertf": {"target_sum": c.target_sum, "lfc": c.pertf_lfc, "alpha": c.alpha,
                         "tie_correct": c.tie_correct, "control_pattern": c.control_pattern},
            "background": {"fraction": c.background_fraction, "top_n_genes": c.top_n_genes},
            "enrich": {"min_degs": c.min_degs_for_ora, "min_set": c.ora_min_set,
                       "max_set": c.ora_max_set, "alpha": c.alpha},
            "gsea": {"n_perm": c.gsea_n_perm, "weight": c.gsea_weight, "seed": c.seed,
                     "min_set": c.ora_min_set, "max_set": c.ora_max_set},
            "validate": {"tf_column": c.rank_tf_column, "uppercase": c.uppercase_symbols},
            "report": {},
        }[step]

    def _input_files(self, step: str) -> list[tuple[str, Path]]:
        c = self.cfg
        if step == "qc":
            out = []
            for s in c.samples:
                if not s.path.is_dir():
                    raise PipelineError(step, f"missing input directory {s.path}")
                try:
                    files = tio.find_10x_files(s.path)
                except FileNotFoundError as exc:
                    raise PipelineError(step, f"missing input: {exc}") from None
                out += [(f"{s.name}/{p.name}", p) for p in files]
            return out
        if step == "demux":
            return [("tfmap", c.tfmap)]
        if step in ("enrich", "gsea"):
            return [(f"gmt/{i}/{p.name}", p) for i, p in enumerate(c.gmt)]
        if step == "validate":
            return [("rank_table", c.rank_table)]
        return []

    def step_digest(self, step: str) -> str:
        inputs = {}
        for key, path in self._input_files(step):
            if path is None or not Path(path).is_file():
                raise PipelineError(step, f"missing input file {path}")
            inputs[key] = tio.file_digest(path)
        upstream = {}
        for dep in self.dependencies(step):
            if dep not in self._digests:
                marker = self._read_marker(dep)
                if marker is None or not self._outputs_intact(dep, marker):
                    if step == "report":
                        continue  # the report covers whatever has been computed
                    raise PipelineError(step, f"requires completed step {dep}; run {dep} first")
                self._digests[dep] = marker["digest"]
            upstream[dep] = self._digests[dep]
        if step == "report" and not upstream:
            raise PipelineError(step, "no completed steps to report on")
        return _digest({"step": step, "version": __version__, "params": self._params(step),
                        "inputs": inputs, "upstream": upstream})

    def _step_dir(self, step: str) -> Path:
        return self.out / step

    def _read_marker(self, step: str) -> dict | None:
        p = self._step_dir(step) / MARKER
        if not p.is_file():
            return None
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError:
            return None

    def _outputs_intact(self, step: str, marker: dict) -> bool:
        d = self._step_dir(step)
        for rel, digest in marker.get("outputs", {}).items():
            p = d / rel
            if not p.is_file() or tio.file_digest(p) != digest:
                return False
        return True

    def _write_marker(self, step: str, digest: str) -> None:
        d = self._step_dir(step)
        outputs = {}
        for p in sorted(d.rglob("*")):
            if p.is_file() and p.name != MARKER:
                outputs[p.relative_to(d).as_posix()] = tio.file_digest(p)
        tio.atomic_write(d / MARKER, _json_bytes({"step": step, "digest": digest, "outputs": outputs}))

    # -- running ------------------------------------------------------------

    def run(self, steps: Sequence[str] | None = None) -> RunResult:
        available = self.available_steps()
        if steps is None:
            steps = available
        else:
            unknown = [s for s in steps if s not in STEPS]
            if unknown:
                raise PipelineError(unknown[0], f"unknown step (choose from {', '.join(STEPS)})")
            for s in steps:
                why = self._missing_config(s)
                if why:
                    raise PipelineError(s, why)
        requested = [s for s in STEPS if s in set(steps)]
        self.out.mkdir(parents=True, exist_ok=True)
        result = RunResult()
        with open(self.out / ".tfscreen.lock", "w") as lock:
            try:
                fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except OSError:
                raise PipelineError(requested[0] if requested else "run",
                                    f"another pipeline instance holds {self.out / '.tfscreen.lock'}") from None
            try:
                for step in requested:
                    self._run_step(step, result)
            finally:
                self._write_manifest(result)
                fcntl.flock(lock, fcntl.LOCK_UN)
        return result

    def _run_step(self, step: str, result: RunResult) -> None:
        digest = self.step_digest(step)
        marker = self._read_marker(step)
        if not self.force and marker is not None:
            if marker.get("digest") == digest and self._outputs_intact(step, marker):
                self._digests[step] = digest
                result.skipped.append(step)
                self._log(f"[tfscreen] step={step} action=skip reason=up-to-date")
                return
            if self.strict:
                raise PipelineError(step, "existing outputs are stale (inputs or parameters changed); "
                                          "rerun with --force to recompute")
        reason = "forced" if self.force else ("new" if marker is None else "stale")
        self._log(f"[tfscreen] step={step} action=run reason={reason}")
        d = self._step_dir(step)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        t0 = time.perf_counter()
        try:
            getattr(self, "_step_" + step.replace("-", "_"))(d)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(step, f"{type(exc).__name__}: {exc}") from exc
        self._write_marker(step, digest)
        self._digests[step] = digest
        result.executed.append(step)
        result.timings[step] = time.perf_counter() - t0
        self._log(f"[tfscreen] step={step} action=done seconds={result.timings[step]:.2f}")

    def _write_manifest(self, result: RunResult) -> None:
        cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in dataclasses.asdict(self.cfg).items()}
        cfg["samples"] = [{k: str(v) if isinstance(v, Path) else v for k, v in s.items()} for s in cfg["samples"]]
        cfg["gmt"] = [str(p) for p in self.cfg.gmt]
        manifest = {
            "versions": {"tfscreen": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "parameters": cfg,
            "threads": self.threads,
            "executed": result.executed,
            "skipped": result.skipped,
            "timings_seconds": {k: round(v, 4) for k, v in result.timings.items()},
            "step_digests": dict(sorted(self._digests.items())),
        }
        tio.atomic_write(self.out / "run_manifest.json", _json_bytes(manifest))

    # -- shared loaders -------------------------------------------------------

    def _cells_table(self):
        _, rows = tio.read_table(self.out / "merge" / "cells.csv", ",")
        return rows

    def _merged_expr(self):
        m = tio.read_npy_matrix(self.out / "merge" / "matrix")
        return normalize_log1p(m, self.cfg.qc_config)

    def _control_cells(self, rows) -> list[str]:
        return [r["cell_id"] for r in rows if tio.parse_bool(r["control"])]

    # -- steps --------------------------------------------------------------------

    def _step_qc(self, d: Path) -> None:
        cfg = self.cfg
        qc = cfg.qc_config
        summary, cells = [], []
        for s in cfg.samples:
            m = tio.read_10x_dir(s.path)
            stats = per_cell_stats(m, mito_genes_by_prefix(m.gene_ids, cfg.mito_prefix))
            kept = filter_genes(filter_cells(m, stats, qc), qc)
            tio.write_10x_dir(kept, d / "samples" / s.name)
            keep = set(kept.cell_ids)
            for i, c in enumerate(m.cell_ids):
                cells.append((s.name, c, int(stats.genes_detected[i]), int(stats.total_counts[i]),
                              float(stats.pct_mito[i]), c in keep))
            ok = np.array([c in keep for c in m.cell_ids], dtype=bool)
            summary.append((
                s.name, m.n_cells, kept.n_cells, m.n_genes, kept.n_genes,
                float(np.median(stats.genes_detected[ok])) if ok.any() else None,
                float(np.median(stats.total_counts[ok])) if ok.any() else None,
                float(np.median(stats.pct_mito[ok])) if ok.any() else None,
            ))
            self._log(f"[tfscreen] step=qc sample={s.name} cells={m.n_cells}->{kept.n_cells} "
                      f"genes={m.n_genes}->{kept.n_genes}")
        tio.write_table(sorted(summary), ["sample", "n_cells_raw", "n_cells_kept", "n_genes_raw",
                                          "n_genes_kept", "median_genes", "median_counts",
                                          "median_pct_mito"], d / "qc_summary.csv")
        tio.write_table(sorted(cells), ["sample", "cell_id", "genes_detected", "total_counts",
                                        "pct_mito", "kept"], d / "cell_stats.csv")

    def _step_merge(self, d: Path) -> None:
        cfg = self.cfg
        parts = [(s.name, tio.read_10x_dir(self.out / "qc" / "samples" / s.name)) for s in cfg.samples]
        merged, ann = merge_samples(parts, {s.name: s.replicate for s in cfg.samples})
        tio.write_npy_matrix(merged, d / "matrix")
        spec = {s.name: s for s in cfg.samples}
        rows = sorted(
            (c, smp, rep, spec[smp].condition, spec[smp].pooled, cfg.is_control(spec[smp]))
            for c, smp, rep in zip(ann.cell_ids, ann.sample, ann.replicate)
        )
        tio.write_table(rows, ["cell_id", "sample", "replicate", "condition", "pooled", "control"],
                        d / "cells.csv")
        self._log(f"[tfscreen] step=merge cells={merged.n_cells} genes={merged.n_genes}")

    def _step_demux(self, d: Path) -> None:
        cfg = self.cfg
        tfmap = tio.read_tfmap(cfg.tfmap, cfg.tfmap_barcode_column, cfg.tfmap_label_column,
                               cfg.tfmap_isoform_delimiter)
        rows = [r for r in self._cells_table() if tio.parse_bool(r["pooled"])]
        cells = [r["cell_id"] for r in rows]
        res = assign_identities(cells, tfmap, barcode_extractor(cfg.cell_id_pattern))
        rep = {r["cell_id"]: r["replicate"] for r in rows}
        tio.write_table(
            sorted((c, rep[c], s, t) for c, s, t in zip(res.cell_ids, res.status, res.tf)),
            ["cell_id", "replicate", "status", "tf"], d / "assignments.csv",
        )
        summary = demux_summary(res, rep)
        tio.write_table(
            [(r.replicate, r.n_cells, r.n_assigned, r.n_ambiguous, r.n_undetected, r.n_not_in_map,
              r.assignment_rate) for r in summary],
            ["replicate", "n_cells", "n_assigned", "n_ambiguous", "n_undetected", "n_not_in_map",
             "assignment_rate"], d / "demux_summary.csv",
        )
        counts = tf_cell_counts(res, cfg.min_cells_per_tf)
        tio.write_table([(c.tf, c.n_cells, c.eligible) for c in counts],
                        ["tf", "n_cells", "eligible"], d / "tf_counts.csv")
        total = summary[-1]
        self._log(f"[tfscreen] step=demux cells={total.n_cells} assigned={total.n_assigned} "
                  f"eligible_tfs={sum(c.eligible for c in counts)}")

    def _step_de_condition(self, d: Path) -> None:
        cfg = self.cfg
        rows = self._cells_table()
        control = self._control_cells(rows)
        groups: dict[str, list[str]] = {}
        for r in rows:
            if not tio.parse_bool(r["control"]):
                groups.setdefault(r["condition"], []).append(r["cell_id"])
        e = self._merged_expr()
        tables = differential_expression_many(e, groups, control, cfg.condition_lfc, cfg.alpha,
                                              cfg.tie_correct, reference="control", threads=self.threads)
        summary = []
        for name, t in tables.items():
            write_de_table(t, d / "tables" / f"{_safe_name(name)}.csv")
            summary.append((name, _safe_name(name), t.n_group, t.n_reference, t.n_significant,
                            t.n_up, t.n_down, t.top_up(cfg.top_n_genes)))
        tio.write_table(summary, ["condition", "file", "n_cells", "n_reference", "n_degs", "n_up",
                                  "n_down", "top_up_genes"], d / "summary.csv")

    def _step_de_pertf(self, d: Path) -> None:
        cfg = self.cfg
        rows = self._cells_table()
        control = self._control_cells(rows)
        _, counts = tio.read_table(self.out / "demux" / "tf_counts.csv", ",")
        eligible = sorted(r["tf"] for r in counts if tio.parse_bool(r["eligible"]))
        _, assign = tio.read_table(self.out / "demux" / "assignments.csv", ",")
        by_tf: dict[str, list[str]] = {}
        for r in assign:
            if r["status"] == "assigned":
                by_tf.setdefault(r["tf"], []).append(r["cell_id"])
        assigned = sorted(c for cells in by_tf.values() for c in cells)
        groups = {tf: by_tf[tf] for tf in eligible}
        e = self._merged_expr()
        if control:
            primary_ref, primary_name = control, "control"
        else:
            logger.warning("no control cells; per-TF tests fall back to one-vs-rest")
            primary_ref, primary_name = None, "rest"
        assigned_set = set(assigned)
        ovr_ref = {tf: sorted(assigned_set - set(cells)) for tf, cells in groups.items()}
        # TFs whose cells make up every assigned cell have no one-vs-rest reference
        ovr_groups = {tf: c for tf, c in groups.items() if ovr_ref[tf]}
        ovr = differential_expression_many(e, ovr_groups, ovr_ref, cfg.pertf_lfc, cfg.alpha, cfg.tie_correct,
                                           reference="rest", threads=self.threads)
        primary = ovr if primary_ref is None else differential_expression_many(
            e, groups, primary_ref, cfg.pertf_lfc, cfg.alpha, cfg.tie_correct,
            reference=primary_name, threads=self.threads)
        info = []
        for tf in eligible:
            f = _safe_name(tf)
            if tf in primary:
                write_de_table(primary[tf], d / "primary" / f"{f}.csv")
            if tf in ovr:
                write_de_table(ovr[tf], d / "one_vs_rest" / f"{f}.csv")
            info.append((tf, f, len(groups[tf]), primary_name,
                         primary[tf].n_reference if tf in primary else 0,
                         ovr[tf].n_significant if tf in ovr else None))
        tio.write_table(info, ["tf", "file", "n_cells", "reference", "n_reference", "n_ovr_degs"],
                        d / "groups.csv")

    def _step_background(self, d: Path) -> None:
        cfg = self.cfg
        src = self.out / "de-pertf"
        _, groups = tio.read_table(src / "groups.csv", ",")
        tables = {}
        for g in groups:
            p = src / "primary" / f"{g['file']}.csv"
            if p.is_file():
                tables[g["tf"]] = read_de_table(p, g["tf"], g["reference"], cfg.pertf_lfc, cfg.alpha)
        if not tables:
            raise PipelineError("background", "no per-TF tables to combine (no eligible TFs)")
        bg = identify_background({tf: t.significant_genes() for tf, t in tables.items()},
                                 cfg.background_fraction)
        tio.write_table(sorted((g, bg.group_counts[g]) for g in bg.genes),
                        ["gene", "n_groups_significant"], d / "background_genes.csv")
        tio.write_table([(bg.n_groups, bg.fraction, bg.threshold_groups, len(bg.genes))],
                        ["n_groups", "fraction", "threshold_groups", "n_background_genes"],
                        d / "background_summary.csv")
        summary = []
        for g in groups:
            tf = g["tf"]
            if tf not in tables:
                continue
            t = subtract_background(tables[tf], bg)
            write_de_table(t, d / "specific" / f"{g['file']}.csv")
            n_ovr = g["n_ovr_degs"]
            summary.append((tf, int(g["n_cells"]), t.n_significant, t.n_up, t.n_down,
                            int(n_ovr) if n_ovr else None, t.top_up(cfg.top_n_genes)))
        tio.write_table(sorted(summary), ["tf", "n_cells", "n_specific_degs", "n_up", "n_down",
                                          "n_ovr_degs", "top_up_genes"], d / "pertf_summary.csv")
        self._log(f"[tfscreen] step=background groups={bg.n_groups} threshold={bg.threshold_groups} "
                  f"genes={len(bg.genes)}")

    def _libraries(self):
        libs = [tio.read_gmt(p) for p in self.cfg.gmt]
        names = [l.name for l in libs]
        if len(set(names)) != len(names):
            raise ValueError("two gmt libraries share a name")
        return libs

    def _step_enrich(self, d: Path) -> None:
        cfg = self.cfg
        libs = self._libraries()
        _, summary = tio.read_table(self.out / "background" / "pertf_summary.csv", ",")
        _, groups = tio.read_table(self.out / "de-pertf" / "groups.csv", ",")
        files = {g["tf"]: g["file"] for g in groups}
        pertf: dict[str, list] = {}
        universe = None
        for row in summary:
            tf = row["tf"]
            t = read_de_table(self.out / "background" / "specific" / f"{files[tf]}.csv", tf)
            universe = universe or frozenset(t.genes)
            if int(row["n_specific_degs"]) < cfg.min_degs_for_ora:
                continue
            recs = []
            for lib in libs:
                recs += ora(t.significant_genes(), lib, universe, cfg.ora_min_set, cfg.ora_max_set, group=tf)
            pertf[tf] = recs
        rows = sorted(r.row() for recs in pertf.values() for r in recs)
        tio.write_table(rows, ORA_COLUMNS, d / "enrichment.csv")
        rec = recurrence(pertf, cfg.alpha)
        tio.write_table(list(rec.rows()), ["term", "recurrence", *rec.groups], d / "recurrence.csv")

        _, cond = tio.read_table(self.out / "de-condition" / "summary.csv", ",")
        crow = []
        for row in cond:
            t = read_de_table(self.out / "de-condition" / "tables" / f"{row['file']}.csv", row["condition"])
            sig = t.significant_genes()
            if len(sig) < cfg.min_degs_for_ora:
                continue
            for lib in libs:
                crow += [r.row() for r in ora(sig, lib, frozenset(t.genes), cfg.ora_min_set,
                                              cfg.ora_max_set, group=row["condition"])]
        tio.write_table(sorted(crow), ORA_COLUMNS, d / "enrichment_condition.csv")
        n_sig = sum(1 for recs in pertf.values() for r in recs if r.q < cfg.alpha)
        self._log(f"[tfscreen] step=enrich tfs_tested={len(pertf)} significant_terms={n_sig}")

    def _step_gsea(self, d: Path) -> None:
        cfg = self.cfg
        libs = self._libraries()
        _, cond = tio.read_table(self.out / "de-condition" / "summary.csv", ",")
        out = []
        for row in cond:
            t = read_de_table(self.out / "de-condition" / "tables" / f"{row['file']}.csv", row["condition"])
            order = sorted(range(len(t.genes)), key=lambda i: (-t.z[i], t.genes[i]))
            ranking = [(t.genes[i], float(t.z[i])) for i in order]
            for lib in libs:
                out += [r.row() for r in gsea_preranked(
                    ranking, lib, cfg.gsea_n_perm, cfg.gsea_weight, cfg.seed,
                    cfg.ora_min_set, cfg.ora_max_set, group=row["condition"])]
        tio.write_table(sorted(out), GSEA_COLUMNS, d / "gsea.csv")

    def _step_validate(self, d: Path) -> None:
        cfg = self.cfg
        ranks = tio.read_rank_table(cfg.rank_table, cfg.rank_tf_column)
        _, summary = tio.read_table(self.out / "background" / "pertf_summary.csv", ",")
        degs = {r["tf"]: int(r["n_specific_degs"]) for r in summary}
        report = compare_to_published(degs, ranks, cfg.uppercase_symbols)
        tio.write_table(
            sorted((c.rank_column, c.n_matched, c.rho, c.p, EXPECTED_SIGN, c.agrees) for c in report.columns),
            ["rank_column", "n_matched", "rho", "pval", "expected_sign", "agrees"], d / "validation.csv",
        )
        tio.write_table(
            sorted((c.rank_column, tf, n, r) for c in report.columns for tf, n, r in c.matched),
            ["rank_column", "tf", "deg_count", "rank"], d / "matched_rows.csv",
        )
        for c in report.columns:
            self._log(f"[tfscreen] step=validate column={c.rank_column} n={c.n_matched} "
                      f"rho={c.rho:.4f} p={c.p:.4g}")

    def _step_report(self, d: Path) -> None:
        metrics: list[tuple[str, str, Any]] = []

        def table(*parts):
            p = self.out.joinpath(*parts)
            return tio.read_table(p, ",")[1] if p.is_file() else None

        qc = table("qc", "qc_summary.csv")
        if qc:
            for r in qc:
                metrics.append(("qc", f"cells_kept[{r['sample']}]", r["n_cells_kept"]))
            metrics.append(("qc", "cells_kept_total", sum(int(r["n_cells_kept"]) for r in qc)))
        dm = table("demux", "demux_summary.csv")
        if dm:
            for r in dm:
                metrics.append(("demux", f"assignment_rate[{r['replicate']}]", r["assignment_rate"]))
            metrics.append(("demux", "assigned_total", dm[-1]["n_assigned"]))
        tc = table("demux", "tf_counts.csv")
        if tc:
            metrics.append(("demux", "tfs_assigned", len(tc)))
            metrics.append(("demux", "tfs_eligible", sum(tio.parse_bool(r["eligible"]) for r in tc)))
        bs = table("background", "background_summary.csv")
        if bs:
            metrics.append(("background", "threshold_groups", bs[0]["threshold_groups"]))
            metrics.append(("background", "n_background_genes", bs[0]["n_background_genes"]))
        ps = table("background", "pertf_summary.csv")
        if ps:
            metrics.append(("de-pertf", "tfs_with_specific_degs",
                            sum(int(r["n_specific_degs"]) > 0 for r in ps)))
            metrics.append(("de-pertf", "tfs_with_ovr_degs",
                            sum(bool(r["n_ovr_degs"]) and int(r["n_ovr_degs"]) > 0 for r in ps)))
        cs = table("de-condition", "summary.csv")
        if cs:
            for r in cs:
                metrics.append(("de-condition", f"n_degs[{r['condition']}]", r["n_degs"]))
        en = table("enrich", "enrichment.csv")
        if en is not None:
            sig = [r for r in en if float(r["qval"]) < self.cfg.alpha]
            metrics.append(("enrich", "significant_terms", len(sig)))
            metrics.append(("enrich", "tfs_with_terms", len({r["group"] for r in sig})))
        gs = table("gsea", "gsea.csv")
        if gs is not None:
            metrics.append(("gsea", "significant_terms", sum(float(r["qval"]) < self.cfg.alpha for r in gs)))
        va = table("validate", "validation.csv")
        if va:
            for r in va:
                metrics.append(("validate", f"rho[{r['rank_column']}]", r["rho"]))
                metrics.append(("validate", f"pval[{r['rank_column']}]", r["pval"]))
                metrics.append(("validate", f"n_matched[{r['rank_column']}]", r["n_matched"]))
        tio.write_table(metrics, ["section", "metric", "value"], d / "summary.csv")
        lines = ["# tfscreen run report", ""]
        section = None
        for sec, name, value in metrics:
            if sec != section:
                lines += ["", f"## {sec}", ""]
                section = sec
            lines.append(f"- {name}: {value}")
        tio.write_text(d / "report.md", "\n".join(lines).strip() + "\n")
