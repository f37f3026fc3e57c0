"""Readers and writers for the external file formats.

Every reader accepts gzip-compressed input transparently (by magic bytes,
not by extension). Writers are deterministic: identical inputs give
byte-identical files, including gzip output (mtime is pinned to 0).
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.io import mmread

from .demux import TfLabel, TfMap, parse_label, BARCODE_LENGTH
from .matrix import CountMatrix

logger = logging.getLogger(__name__)


class FormatError(ValueError):
    """Malformed input file."""


class DimensionMismatchError(FormatError):
    pass


class NonIntegerValueError(FormatError):
    pass


class NegativeCountError(FormatError):
    pass


class IndexOutOfRangeError(FormatError):
    pass


class DuplicateEntryError(FormatError):
    pass


def open_text(path, mode="rt"):
    """Open a possibly gzipped text file for reading, or a text file for writing."""
    path = Path(path)
    if "r" in mode:
        with open(path, "rb") as fh:
            magic = fh.read(2)
        if magic == b"\x1f\x8b":
            return gzip.open(path, "rt", encoding="utf-8", newline="")
        return open(path, "r", encoding="utf-8", newline="")
    raise ValueError("open_text only reads; use atomic_write for output")


def atomic_write(path, data: bytes) -> None:
    """Write bytes to `path` through a temporary file in the same directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    data = text.encode("utf-8")
    if str(path).endswith(".gz"):
        buf = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=buf, mtime=0) as gz:
            gz.write(data)
        data = buf.getvalue()
    atomic_write(path, data)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --- MatrixMarket ------------------------------------------------------------


def _read_lines(path) -> list[str]:
    with open_text(path) as fh:
        return [line.rstrip("\r\n") for line in fh]


def read_id_list(path, column: int = 0) -> list[str]:
    """One id per line; tab-separated extra columns are allowed."""
    out = []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line:
            continue
        fields = line.split("\t")
        if column >= len(fields):
            raise FormatError(f"{path}:{lineno}: expected at least {column + 1} columns")
        out.append(fields[column])
    return out


def _make_unique(ids: Sequence[str]) -> list[str]:
    seen: dict[str, int] = {}
    out = []
    taken = set(ids)
    for i in ids:
        if i in seen:
            k = seen[i]
            while f"{i}-{k}" in taken:
                k += 1
            seen[i] = k + 1
            new = f"{i}-{k}"
            taken.add(new)
            out.append(new)
        else:
            seen[i] = 1
            out.append(i)
    return out


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data


def _parse_mtx_strict(matrix_path, text: str):
    """Pure-Python coordinate parser; slow, but reports exactly what is wrong."""
    lines = text.splitlines()
    i = 1
    while i < len(lines) and (lines[i].startswith("%") or not lines[i].strip()):
        i += 1
    if i >= len(lines):
        raise FormatError(f"{matrix_path}: missing size line")
    try:
        n_rows, n_cols, nnz = (int(t) for t in lines[i].split())
    except ValueError:
        raise FormatError(f"{matrix_path}: bad size line {lines[i]!r}") from None
    body = " ".join(lines[i + 1:]).split()
    if len(body) != 3 * nnz:
        raise DimensionMismatchError(
            f"{matrix_path}: header declares {nnz} entries, found {len(body) / 3:g}"
        )
    try:
        vals = np.array(body, dtype=np.float64).reshape(nnz, 3) if nnz else np.zeros((0, 3))
    except ValueError:
        raise FormatError(f"{matrix_path}: non-numeric entry") from None
    if not np.all(np.floor(vals[:, :2]) == vals[:, :2]):
        raise FormatError(f"{matrix_path}: non-integer index")
    return n_rows, n_cols, vals[:, 0].astype(np.int64) - 1, vals[:, 1].astype(np.int64) - 1, vals[:, 2]


def _parse_mtx(matrix_path):
    raw = _read_bytes(matrix_path)
    nl = raw.find(b"\n")
    first = raw[: nl if nl >= 0 else len(raw)].decode("utf-8", "replace")
    if not first.startswith("%%MatrixMarket"):
        raise FormatError(f"{matrix_path}: missing %%MatrixMarket header")
    banner = first.split()
    if len(banner) < 5 or banner[1].lower() != "matrix" or banner[2].lower() != "coordinate":
        raise FormatError(f"{matrix_path}: only coordinate matrices are supported")
    if banner[3].lower() not in ("integer", "real"):
        raise FormatError(f"{matrix_path}: unsupported field type {banner[3]!r}")
    if banner[4].lower() != "general":
        raise FormatError(f"{matrix_path}: only general (non-symmetric) matrices are supported")
    # parse values as real so non-integers are caught below instead of truncated
    patched = b"%%MatrixMarket matrix coordinate real general" + (raw[nl:] if nl >= 0 else b"")
    try:
        coo = mmread(io.BytesIO(patched))
    except (ValueError, OverflowError):
        # the strict parser either names the problem or accepts the file
        return _parse_mtx_strict(matrix_path, raw.decode("utf-8"))
    else:
        n_rows, n_cols = coo.shape
        gene_idx = coo.row.astype(np.int64)
        cell_idx = coo.col.astype(np.int64)
        counts = np.asarray(coo.data, dtype=np.float64)
    return n_rows, n_cols, gene_idx, cell_idx, counts


def read_mtx(matrix_path, barcodes_path, features_path, gene_column: int | None = None, make_unique: bool = False) -> CountMatrix:
    """Read a 10x-style genes x cells MatrixMarket triplet as cells x genes.

    Parameters
    ----------
    gene_column : int, optional
        Column of the features file holding gene ids. Defaults to the
        symbol column (1) when the file has two or more columns, else 0.
    make_unique : bool
        Suffix repeated gene ids with ``-1``, ``-2``... instead of raising.
    """
    n_rows, n_cols, gene_idx, cell_idx, counts = _parse_mtx(matrix_path)
    if not np.all(np.isfinite(counts)) or not np.all(np.floor(counts) == counts):
        raise NonIntegerValueError(f"{matrix_path}: non-integer value")
    if np.any(counts < 0):
        raise NegativeCountError(f"{matrix_path}: negative count")
    bad = (gene_idx < 0) | (gene_idx >= n_rows) | (cell_idx < 0) | (cell_idx >= n_cols)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise IndexOutOfRangeError(
            f"{matrix_path}: entry {k + 1} index ({gene_idx[k] + 1}, {cell_idx[k] + 1}) "
            f"outside {n_rows} x {n_cols}"
        )
    flat = gene_idx * max(n_cols, 1) + cell_idx
    if len(np.unique(flat)) != len(flat):
        raise DuplicateEntryError(f"{matrix_path}: duplicate coordinate")

    barcodes = read_id_list(barcodes_path)
    feat_lines = [l for l in _read_lines(features_path) if l]
    if gene_column is None:
        gene_column = 1 if feat_lines and len(feat_lines[0].split("\t")) >= 2 else 0
    genes = read_id_list(features_path, gene_column)
    if len(barcodes) != n_cols:
        raise DimensionMismatchError(f"{barcodes_path}: {len(barcodes)} barcodes for {n_cols} columns")
    if len(genes) != n_rows:
        raise DimensionMismatchError(f"{features_path}: {len(genes)} features for {n_rows} rows")
    if make_unique:
        genes = _make_unique(genes)
    x = sp.csr_matrix((counts.astype(np.int64), (cell_idx, gene_idx)), shape=(n_cols, n_rows))
    return CountMatrix(x, tuple(barcodes), tuple(genes))


def write_mtx(m: CountMatrix, matrix_path, barcodes_path, features_path) -> None:
    """Write `m` as a genes x cells integer coordinate file plus id lists."""
    coo = m.x.tocoo()
    # column-major (cell, then gene) order, as 10x emits
    order = np.lexsort((coo.col, coo.row))
    rows = coo.col[order] + 1
    cols = coo.row[order] + 1
    data = coo.data[order]
    buf = io.StringIO()
    buf.write("%%MatrixMarket matrix coordinate integer general\n")
    buf.write(f"{m.n_genes} {m.n_cells} {len(data)}\n")
    buf.write("".join(map("%d %d %d\n".__mod__, zip(rows.tolist(), cols.tolist(), data.tolist()))))
    write_text(matrix_path, buf.getvalue())
    write_text(barcodes_path, "".join(f"{b}\n" for b in m.cell_ids))
    write_text(features_path, "".join(f"{g}\t{g}\tGene Expression\n" for g in m.gene_ids))


def find_10x_files(directory) -> tuple[Path, Path, Path]:
    """Locate matrix/barcodes/features files (optionally gzipped) in a directory."""
    d = Path(directory)

    def pick(*names):
        for n in names:
            for cand in (d / n, d / f"{n}.gz"):
                if cand.exists():
                    return cand
        raise FileNotFoundError(f"{d}: none of {', '.join(names)} found")

    return pick("matrix.mtx"), pick("barcodes.tsv"), pick("features.tsv", "genes.tsv")


def read_10x_dir(directory, **kw) -> CountMatrix:
    return read_mtx(*find_10x_files(directory), **kw)


def write_10x_dir(m: CountMatrix, directory) -> None:
    d = Path(directory)
    write_mtx(m, d / "matrix.mtx", d / "barcodes.tsv", d / "features.tsv")


def write_npy_matrix(m: CountMatrix, directory) -> None:
    """Binary CSR dump (plain .npy arrays plus id lists) for intermediate outputs."""
    d = Path(directory)
    for name, arr in (("indptr", m.x.indptr), ("indices", m.x.indices), ("data", m.x.data)):
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr, dtype=np.int64), allow_pickle=False)
        atomic_write(d / f"{name}.npy", buf.getvalue())
    write_text(d / "cells.txt", "".join(f"{c}\n" for c in m.cell_ids))
    write_text(d / "genes.txt", "".join(f"{g}\n" for g in m.gene_ids))


def read_npy_matrix(directory) -> CountMatrix:
    d = Path(directory)
    cells = read_id_list(d / "cells.txt")
    genes = read_id_list(d / "genes.txt")
    parts = [np.load(d / f"{n}.npy", allow_pickle=False) for n in ("indptr", "indices", "data")]
    x = sp.csr_matrix((parts[2], parts[1], parts[0]), shape=(len(cells), len(genes)))
    return CountMatrix(x, tuple(cells), tuple(genes))


# --- delimited tables ----------------------------------------------------------


def _sniff_delimiter(path, header: str) -> str:
    name = str(path).lower().removesuffix(".gz")
    if name.endswith((".tsv", ".txt")):
        return "\t"
    if name.endswith(".csv"):
        return ","
    return "\t" if header.count("\t") > header.count(",") else ","


def read_table(path, delimiter: str | None = None) -> tuple[list[str], list[dict[str, str]]]:
    """Read a delimited file with a header row into (columns, rows)."""
    with open_text(path) as fh:
        text = fh.read()
    if not text:
        raise FormatError(f"{path}: empty file")
    if delimiter is None:
        delimiter = _sniff_delimiter(path, text.split("\n", 1)[0])
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    header = next(reader)
    if len(set(header)) != len(header):
        raise FormatError(f"{path}: duplicate column names")
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise FormatError(f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}")
        rows.append(dict(zip(header, rec)))
    return header, rows


def format_value(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, set, frozenset)):
        items = sorted(v) if isinstance(v, (set, frozenset)) else v
        return ";".join(str(i) for i in items)
    return str(v)


def table_bytes(rows: Iterable[Mapping[str, Any] | Sequence[Any]], columns: Sequence[str]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(columns)
    for r in rows:
        if isinstance(r, Mapping):
            missing = [c for c in columns if c not in r]
            if missing:
                raise KeyError(f"row lacks column {missing[0]!r}")
            vals = [r[c] for c in columns]
        else:
            vals = list(r)
            if len(vals) != len(columns):
                raise ValueError(f"row has {len(vals)} fields, expected {len(columns)}")
        w.writerow([format_value(v) for v in vals])
    return buf.getvalue().encode("utf-8")


def write_table(rows, columns: Sequence[str], path) -> None:
    """Write rows as CSV with a header.

    Floats are written with ``repr`` so they read back to the same double.
    Sequences become ``;``-joined strings, sets are sorted first.
    """
    atomic_write(path, table_bytes(rows, columns))


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# --- TF map --------------------------------------------------------------------


def read_tfmap(
    path,
    barcode_column: str = "barcode",
    label_column: str = "tf",
    isoform_delimiter: str = "|",
    delimiter: str | None = None,
    barcode_length: int | None = BARCODE_LENGTH,
) -> TfMap:
    header, rows = read_table(path, delimiter)
    for col in (barcode_column, label_column):
        if col not in header:
            raise FormatError(f"{path}: missing column {col!r} (have {', '.join(header)})")
    labels: dict[str, TfLabel] = {}
    raw: dict[str, str] = {}
    for lineno, row in enumerate(rows, 2):
        bc = row[barcode_column].strip()
        # drop a 10x gem-group suffix such as "-1"
        base, dash, tail = bc.rpartition("-")
        if dash and tail.isdigit():
            bc = base
        text = row[label_column].strip()
        if bc in raw:
            if raw[bc] != text:
                raise FormatError(f"{path}: barcode {bc} has conflicting labels {raw[bc]!r} and {text!r}")
            continue
        try:
            labels[bc] = parse_label(text, isoform_delimiter)
        except ValueError as exc:
            raise FormatError(f"{path}: row {lineno}: {exc}") from None
        raw[bc] = text
    try:
        return TfMap(labels, barcode_length)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_tfmap(tfmap: TfMap, path, barcode_column="barcode", label_column="tf") -> None:
    rows = [(bc, str(tfmap.labels[bc])) for bc in sorted(tfmap.labels)]
    write_table(rows, [barcode_column, label_column], path)


# --- GMT -------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneSetLibrary:
    name: str
    sets: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        sets = {t: frozenset(g) for t, g in self.sets.items()}
        for t, g in sets.items():
            if not g:
                raise ValueError(f"gene set {t!r} is empty")
        object.__setattr__(self, "sets", sets)

    def __len__(self):
        return len(self.sets)


def read_gmt(path, name: str | None = None) -> GeneSetLibrary:
    if name is None:
        name = Path(path).name
        for ext in (".gz", ".gmt", ".txt"):
            name = name.removesuffix(ext)
    sets: dict[str, frozenset[str]] = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise FormatError(f"{path}: line {lineno} has fewer than 3 fields")
        term = fields[0]
        genes = [g for g in fields[2:] if g]
        if not genes:
            raise FormatError(f"{path}: line {lineno} lists no genes")
        if term in sets:
            raise FormatError(f"{path}: duplicate term {term!r} at line {lineno}")
        uniq = frozenset(genes)
        if len(uniq) != len(genes):
            logger.warning("%s: term %r lists duplicate genes; deduplicated", path, term)
        sets[term] = uniq
    return GeneSetLibrary(name, sets)


def write_gmt(lib: GeneSetLibrary, path, descriptions: Mapping[str, str] | None = None) -> None:
    lines = []
    for term in sorted(lib.sets):
        desc = (descriptions or {}).get(term, "")
        lines.append("\t".join([term, desc, *sorted(lib.sets[term])]))
    write_text(path, "".join(l + "\n" for l in lines))


# --- published rank tables ----------------------------------------------------------


@dataclass(frozen=True)
class RankTable:
    """TF symbols with one or more optional rank columns (rank 1 = strongest)."""

    tfs: tuple[str, ...]
    columns: Mapping[str, tuple[float | None, ...]]

    def __post_init__(self):
        if len(set(self.tfs)) != len(self.tfs):
            raise ValueError("duplicate TF symbol in rank table")
        for name, vals in self.columns.items():
            if len(vals) != len(self.tfs):
                raise ValueError(f"rank column {name!r} has wrong length")
            for v in vals:
                if v is not None and not v > 0:
                    raise ValueError("ranks are 1-based")

    def ranks(self, column: str) -> dict[str, float]:
        """Present ranks of one column; TFs with a blank rank are left out."""
        return {t: r for t, r in zip(self.tfs, self.columns[column]) if r is not None}


def read_rank_table(path, tf_column: str = "tf", rank_columns: Sequence[str] | None = None, delimiter: str | None = None) -> RankTable:
    header, rows = read_table(path, delimiter)
    if tf_column not in header:
        raise FormatError(f"{path}: missing column {tf_column!r}")
    if rank_columns is None:
        rank_columns = [c for c in header if c != tf_column]
    missing = [c for c in rank_columns if c not in header]
    if missing:
        raise FormatError(f"{path}: missing rank column {missing[0]!r}")
    if not rank_columns:
        raise FormatError(f"{path}: no rank columns")
    tfs, seen = [], set()
    cols: dict[str, list[float | None]] = {c: [] for c in rank_columns}
    for lineno, row in enumerate(rows, 2):
        tf = row[tf_column].strip()
        if not tf:
            raise FormatError(f"{path}: row {lineno} has an empty TF symbol")
        if tf in seen:
            raise FormatError(f"{path}: duplicate TF {tf!r} at row {lineno}")
        seen.add(tf)
        tfs.append(tf)
        for c in rank_columns:
            text = row[c].strip()
            if not text or text.upper() in ("NA", "NAN"):
                cols[c].append(None)
                continue
            try:
                v = float(text)
            except ValueError:
                raise FormatError(f"{path}: row {lineno}: non-numeric rank {text!r} in {c!r}") from None
            if not math.isfinite(v):
                raise FormatError(f"{path}: row {lineno}: non-finite rank in {c!r}")
            if v <= 0:
                raise FormatError(f"{path}: row {lineno}: ranks are 1-based, got {text!r}")
            cols[c].append(v)
    return RankTable(tuple(tfs), {c: tuple(v) for c, v in cols.items()})


def write_rank_table(table: RankTable, path, tf_column: str = "tf") -> None:
    names = list(table.columns)
    rows = []
    for i, tf in enumerate(table.tfs):
        row = [tf]
        for c in names:
            v = table.columns[c][i]
            row.append(None if v is None else (int(v) if float(v).is_integer() else v))
        rows.append(row)
    rows.sort(key=lambda r: r[0])
    write_table(rows, [tf_column, *names], path)
