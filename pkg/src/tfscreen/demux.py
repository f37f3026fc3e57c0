"""Assign TF identities to pooled-screen cells from a barcode map."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

ASSIGNED = "assigned"
AMBIGUOUS = "ambiguous"
UNDETECTED = "undetected"
NOT_IN_MAP = "not_in_map"
STATUSES = (ASSIGNED, AMBIGUOUS, UNDETECTED, NOT_IN_MAP)

BARCODE_LENGTH = 16
_BARCODE_RE = re.compile(r"^[ACGT]+$")
# "<sample>_<barcode>-<gem group>"; the sample prefix and suffix are optional
DEFAULT_CELL_ID_PATTERN = r"^(?:.*_)?([ACGT]+)(?:-\d+)?$"


@dataclass(frozen=True)
class TfLabel:
    """One TfMap entry: a TF (gene, isoform), or the AMB / NA sentinels."""

    kind: str
    gene: str | None = None
    isoform: str | None = None

    def __post_init__(self):
        if self.kind == "tf":
            if not self.gene:
                raise ValueError("TF label needs a gene name")
        elif self.kind in ("ambiguous", "undetected"):
            if self.gene is not None or self.isoform is not None:
                raise ValueError(f"{self.kind} label carries no TF identity")
        else:
            raise ValueError(f"unknown label kind {self.kind!r}")

    @classmethod
    def tf(cls, gene, isoform=None):
        return cls("tf", gene, isoform)

    def __str__(self):
        if self.kind == "ambiguous":
            return "AMB"
        if self.kind == "undetected":
            return "NA"
        return self.gene if self.isoform is None else f"{self.gene}|{self.isoform}"


AMB = TfLabel("ambiguous")
NA = TfLabel("undetected")


def parse_label(text: str, isoform_delimiter: str = "|") -> TfLabel:
    """Parse a TfMap label. "AMB" and "NA" are matched case-sensitively."""
    if text == "AMB":
        return AMB
    if text == "NA":
        return NA
    if not text:
        raise ValueError("empty TF label")
    gene, sep, isoform = text.partition(isoform_delimiter) if isoform_delimiter else (text, "", "")
    return TfLabel.tf(gene, isoform if sep else None)


def check_barcode(barcode: str, length: int | None = BARCODE_LENGTH) -> None:
    if not _BARCODE_RE.match(barcode):
        raise ValueError(f"barcode {barcode!r} has characters outside ACGT")
    if length is not None and len(barcode) != length:
        raise ValueError(f"barcode {barcode!r} is not {length} bases")


@dataclass(frozen=True)
class TfMap:
    labels: Mapping[str, TfLabel]
    barcode_length: int | None = BARCODE_LENGTH

    def __post_init__(self):
        labels = dict(self.labels)
        for bc, lab in labels.items():
            check_barcode(bc, self.barcode_length)
            if not isinstance(lab, TfLabel):
                raise TypeError(f"label for {bc} is not a TfLabel")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def get(self, barcode):
        return self.labels.get(barcode)


@dataclass(frozen=True)
class DemuxResult:
    cell_ids: tuple[str, ...]
    status: tuple[str, ...]
    tf: tuple[str | None, ...]

    def __post_init__(self):
        if not (len(self.cell_ids) == len(self.status) == len(self.tf)):
            raise ValueError("DemuxResult columns differ in length")
        for c, s, t in zip(self.cell_ids, self.status, self.tf):
            if s not in STATUSES:
                raise ValueError(f"cell {c}: unknown status {s!r}")
            if (s == ASSIGNED) != (t is not None):
                raise ValueError(f"cell {c}: tf must be set exactly when assigned")

    def cells_with_status(self, status: str) -> list[str]:
        return [c for c, s in zip(self.cell_ids, self.status) if s == status]

    def cells_by_tf(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for c, t in zip(self.cell_ids, self.tf):
            if t is not None:
                out.setdefault(t, []).append(c)
        return out


@dataclass(frozen=True)
class DemuxSummaryRow:
    replicate: str
    n_cells: int
    n_assigned: int
    n_ambiguous: int
    n_undetected: int
    n_not_in_map: int

    @property
    def assignment_rate(self) -> float:
        return self.n_assigned / self.n_cells if self.n_cells else 0.0


@dataclass(frozen=True)
class TfCount:
    tf: str
    n_cells: int
    eligible: bool


def barcode_extractor(pattern: str = DEFAULT_CELL_ID_PATTERN) -> Callable[[str], str]:
    """Build a cell id -> raw barcode function from a regex with one group."""
    rx = re.compile(pattern)

    def extract(cell_id: str) -> str:
        m = rx.match(cell_id)
        if m is None:
            raise ValueError(f"cell {cell_id!r}: cannot extract a barcode")
        return m.group(1)

    return extract


def assign_identities(
    cells: Sequence[str],
    tfmap: TfMap,
    extract: Callable[[str], str] | None = None,
) -> DemuxResult:
    extract = extract or barcode_extractor()
    status, tfs = [], []
    for cell in cells:
        bc = extract(cell)
        try:
            check_barcode(bc, tfmap.barcode_length)
        except ValueError as exc:
            raise ValueError(f"cell {cell!r}: {exc}") from None
        lab = tfmap.get(bc)
        if lab is None:
            status.append(NOT_IN_MAP)
            tfs.append(None)
        elif lab.kind == "tf":
            status.append(ASSIGNED)
            tfs.append(lab.gene)
        elif lab.kind == "ambiguous":
            status.append(AMBIGUOUS)
            tfs.append(None)
        else:
            status.append(UNDETECTED)
            tfs.append(None)
    return DemuxResult(tuple(cells), tuple(status), tuple(tfs))


def demux_summary(r: DemuxResult, replicate_of: Mapping[str, str], overall: str | None = "all") -> list[DemuxSummaryRow]:
    """Status counts per replicate, sorted by replicate, then an overall row."""
    per: dict[str, Counter] = {}
    for c, s in zip(r.cell_ids, r.status):
        try:
            rep = replicate_of[c]
        except KeyError:
            raise KeyError(f"cell {c!r} has no replicate") from None
        per.setdefault(rep, Counter())[s] += 1
    total: Counter = Counter(r.status)

    def row(name, cnt):
        return DemuxSummaryRow(
            name, sum(cnt.values()), cnt[ASSIGNED], cnt[AMBIGUOUS], cnt[UNDETECTED], cnt[NOT_IN_MAP]
        )

    rows = [row(rep, per[rep]) for rep in sorted(per)]
    if overall is not None:
        rows.append(row(overall, total))
    return rows


def tf_cell_counts(r: DemuxResult, min_cells: int = 20) -> list[TfCount]:
    counts = Counter(t for t in r.tf if t is not None)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [TfCount(tf, n, n >= min_cells) for tf, n in ordered]


def eligible_tfs(counts: Iterable[TfCount]) -> list[str]:
    return sorted(c.tf for c in counts if c.eligible)
