"""Exploratory statistics over clinical metadata: balance, sizes, subtlety, locations."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

METADATA_COLUMNS = ["case_id", "has_nodule", "x", "y", "size_mm", "subtlety", "malignant", "gender", "age"]
GENDERS = ("male", "female", "unknown")
_NODULE_FIELDS = ("nodule_x", "nodule_y", "size_mm", "subtlety", "malignant")


@dataclass(frozen=True)
class ClinicalRecord:
    case_id: str
    has_nodule: bool
    nodule_x: Optional[int] = None
    nodule_y: Optional[int] = None
    size_mm: Optional[float] = None
    subtlety: Optional[int] = None
    malignant: Optional[bool] = None
    gender: str = "unknown"
    age: Optional[float] = None

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ValueError(f"{self.case_id}: unknown gender {self.gender!r}")
        if self.has_nodule:
            if self.nodule_x is None or self.nodule_y is None:
                raise ValueError(f"{self.case_id}: nodule case without coordinates")
        else:
            present = [f for f in _NODULE_FIELDS if getattr(self, f) is not None]
            if present:
                raise ValueError(f"{self.case_id}: normal case carries nodule fields {present}")
        if self.subtlety is not None and not 1 <= self.subtlety <= 5:
            raise ValueError(f"{self.case_id}: subtlety {self.subtlety} outside 1..5")
        if self.size_mm is not None and self.size_mm <= 0:
            raise ValueError(f"{self.case_id}: nodule size must be positive")

    @property
    def label(self) -> str:
        return "nodule" if self.has_nodule else "normal"


@dataclass(frozen=True)
class Histogram:
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]

    def rows(self):
        return [
            (self.bin_edges[i], self.bin_edges[i + 1], c) for i, c in enumerate(self.counts)
        ]


# ---------------------------------------------------------------------------
# metadata CSV
# ---------------------------------------------------------------------------


def _opt(cell: str, conv):
    cell = cell.strip()
    return None if cell == "" else conv(cell)


def _parse_bool(cell: str) -> bool:
    value = cell.strip().lower()
    if value in ("1", "true", "yes", "y", "malignant"):
        return True
    if value in ("0", "false", "no", "n", "benign"):
        return False
    raise ValueError(f"cannot parse boolean from {cell!r}")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def parse_metadata_csv(text: str) -> list[ClinicalRecord]:
    reader = csv.DictReader(io.StringIO(text))
    missing = set(METADATA_COLUMNS) - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f"metadata CSV lacks columns {sorted(missing)}")
    records = []
    for row in reader:
        records.append(
            ClinicalRecord(
                case_id=row["case_id"].strip(),
                has_nodule=_parse_bool(row["has_nodule"]),
                nodule_x=_opt(row["x"], lambda s: int(float(s))),
                nodule_y=_opt(row["y"], lambda s: int(float(s))),
                size_mm=_opt(row["size_mm"], float),
                subtlety=_opt(row["subtlety"], int),
                malignant=_opt(row["malignant"], _parse_bool),
                gender=(row["gender"].strip().lower() or "unknown"),
                age=_opt(row["age"], float),
            )
        )
    return records


def read_metadata(path) -> list[ClinicalRecord]:
    return parse_metadata_csv(Path(path).read_text())


def format_metadata_csv(records: Iterable[ClinicalRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METADATA_COLUMNS)
    for r in records:
        writer.writerow(
            [_fmt(v) for v in (r.case_id, r.has_nodule, r.nodule_x, r.nodule_y, r.size_mm,
                               r.subtlety, r.malignant, r.gender, r.age)]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def balance_report(records: Sequence[ClinicalRecord]) -> tuple[int, int, int]:
    n_nodule = sum(1 for r in records if r.has_nodule)
    return n_nodule, len(records) - n_nodule, len(records)


def _bin_index(value: float, width: float) -> int:
    # half-open [k*w, (k+1)*w): a value on an edge belongs to the higher bin
    return int(math.floor(value / width))


def size_histogram(records: Sequence[ClinicalRecord], bin_width: float) -> Histogram:
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    sizes = [r.size_mm for r in records if r.has_nodule and r.size_mm is not None]
    n_bins = _bin_index(max(sizes), bin_width) + 1 if sizes else 1
    counts = [0] * n_bins
    for s in sizes:
        counts[_bin_index(s, bin_width)] += 1
    edges = tuple(i * bin_width for i in range(n_bins + 1))
    return Histogram(edges, tuple(counts))


def subtlety_distribution(records: Sequence[ClinicalRecord]) -> list[int]:
    counts = [0] * 5
    for r in records:
        if r.has_nodule and r.subtlety is not None:
            counts[r.subtlety - 1] += 1
    return counts


def combined_distribution(
    records: Sequence[ClinicalRecord], size_bin_width: float
) -> dict[tuple[str, tuple[float, float], int], int]:
    """Counts keyed by (gender, size bin, subtlety) over complete nodule records."""
    if size_bin_width <= 0:
        raise ValueError("size_bin_width must be positive")
    counter: Counter = Counter()
    for r in records:
        if not r.has_nodule or r.gender == "unknown" or r.subtlety is None or r.size_mm is None:
            continue
        k = _bin_index(r.size_mm, size_bin_width)
        counter[(r.gender, (k * size_bin_width, (k + 1) * size_bin_width), r.subtlety)] += 1
    return dict(sorted(counter.items()))


def location_table(records: Sequence[ClinicalRecord]) -> list[tuple[str, int, int, str]]:
    return [(r.case_id, r.nodule_x, r.nodule_y, r.label) for r in records if r.has_nodule]


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def eda_tables(records: Sequence[ClinicalRecord], size_bin_width: float = 5.0) -> dict[str, str]:
    """All EDA outputs rendered as CSV text, keyed by file name."""
    n_nodule, n_normal, total = balance_report(records)
    hist = size_histogram(records, size_bin_width)
    combined = combined_distribution(records, size_bin_width)
    return {
        "balance.csv": _csv(["label", "count"], [("nodule", n_nodule), ("normal", n_normal), ("total", total)]),
        "size_histogram.csv": _csv(["bin_lo", "bin_hi", "count"], [(_fmt(lo), _fmt(hi), c) for lo, hi, c in hist.rows()]),
        "subtlety.csv": _csv(["subtlety", "count"], [(d + 1, c) for d, c in enumerate(subtlety_distribution(records))]),
        "combined.csv": _csv(
            ["gender", "bin_lo", "bin_hi", "subtlety", "count"],
            [(g, _fmt(lo), _fmt(hi), s, c) for (g, (lo, hi), s), c in combined.items()],
        ),
        "locations.csv": _csv(["case_id", "x", "y", "label"], location_table(records)),
    }


# ---------------------------------------------------------------------------
# JSRT native clinical listing
# ---------------------------------------------------------------------------


def _jsrt_age(token: str) -> Optional[float]:
    token = token.strip().rstrip("yY")
    try:
        return float(token)
    except ValueError:
        return None


def _jsrt_gender(token: str) -> str:
    token = token.strip().lower()
    return token if token in ("male", "female") else "unknown"


def parse_jsrt_clinical(text: str) -> list[ClinicalRecord]:
    """Convert the JSRT clinical listings (CLNDAT / CNNDAT style) to records.

    Nodule rows: ``name subtlety size_mm age sex x y malignant|benign ...``;
    normal rows: ``name age sex ...``. Columns are tab- or space-separated and
    the case id is the image file name without extension.
    """
    records = []
    for line in text.splitlines():
        parts = line.split("\t") if "\t" in line else line.split()
        parts = [p.strip() for p in parts if p.strip()]
        if not parts or not parts[0].upper().endswith(".IMG"):
            continue
        case_id = parts[0].rsplit(".", 1)[0]
        if case_id.upper().startswith("JPCLN"):
            subtlety, size, age, sex, x, y, kind = (parts[1:8] + [""] * 7)[:7]
            records.append(
                ClinicalRecord(
                    case_id=case_id,
                    has_nodule=True,
                    nodule_x=int(float(x)),
                    nodule_y=int(float(y)),
                    size_mm=float(size) if size and float(size) > 0 else None,
                    subtlety=int(subtlety) if subtlety.isdigit() and 1 <= int(subtlety) <= 5 else None,
                    malignant={"malignant": True, "benign": False}.get(kind.lower()),
                    gender=_jsrt_gender(sex),
                    age=_jsrt_age(age),
                )
            )
        else:
            age, sex = (parts[1:3] + ["", ""])[:2]
            records.append(
                ClinicalRecord(case_id=case_id, has_nodule=False, gender=_jsrt_gender(sex), age=_jsrt_age(age))
            )
    return records
