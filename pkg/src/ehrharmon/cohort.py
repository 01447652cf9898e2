"""Cohort selection by coded criteria and monthly aggregation."""
from __future__ import annotations

import datetime as dt
from collections import Counter
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, List, Optional, Set, Tuple

from .codes import CodeId
from .events import EventRecord


@dataclass(frozen=True)
class CohortCriteria:
    include_codes: FrozenSet[CodeId]
    min_count: int = 1
    date_range: Optional[Tuple[dt.date, dt.date]] = None

    def __post_init__(self):
        object.__setattr__(self, "include_codes", frozenset(self.include_codes))
        if not self.include_codes:
            raise ValueError("cohort criteria need at least one include code")
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.date_range is not None and self.date_range[0] > self.date_range[1]:
            raise ValueError("date_range start is after its end")

    def in_range(self, day: dt.date) -> bool:
        return self.date_range is None or self.date_range[0] <= day <= self.date_range[1]


def select_cohort(events: Iterable[EventRecord], criteria: CohortCriteria) -> Set[str]:
    """Patients with at least ``min_count`` distinct (code, day) hits on the include codes."""
    hits = {
        (r.patient_id, r.code, r.day)
        for r in events
        if r.code in criteria.include_codes and criteria.in_range(r.day)
    }
    per_patient = Counter(p for p, _, _ in hits)
    return {p for p, n in per_patient.items() if n >= criteria.min_count}


@dataclass
class MonthlyCounts:
    rows: List[Tuple[str, CodeId, str, int]]
    missing_patients: List[str] = field(default_factory=list)

    def total(self) -> int:
        return sum(r[3] for r in self.rows)


def aggregate_monthly(
    events: Iterable[EventRecord],
    patients: Iterable[str],
    date_range: Optional[Tuple[dt.date, dt.date]] = None,
) -> MonthlyCounts:
    """Count distinct days per (patient, code, calendar month) for ``patients``.

    Requested patients with no events are listed in ``missing_patients``.
    Rows come out sorted by (patient, code, month).
    """
    wanted = set(patients)
    days = set()
    for r in events:
        if r.patient_id in wanted and (date_range is None or date_range[0] <= r.day <= date_range[1]):
            days.add((r.patient_id, r.code, r.day))
    counts = Counter((p, c, f"{d.year:04d}-{d.month:02d}") for p, c, d in days)
    seen = {p for p, _, _ in days}
    rows = sorted(((p, c, m, n) for (p, c, m), n in counts.items()), key=lambda r: (r[0], r[1].text, r[2]))
    return MonthlyCounts(rows, sorted(wanted - seen))


def write_monthly(fh, counts: MonthlyCounts) -> None:
    fh.write("patient_id\tcode\tmonth\tcount\n")
    for p, c, m, n in counts.rows:
        fh.write(f"{p}\t{c.text}\t{m}\t{n}\n")
