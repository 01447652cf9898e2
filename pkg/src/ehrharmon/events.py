"""Parse, clean, deduplicate and batch raw clinical event files.

Event files are UTF-8, tab-separated, with at least the columns
``patient_id``, ``code`` and ``date``. Extra columns are ignored. Dates may be
plain ISO dates or ISO timestamps; only the date component is kept.
"""
from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

from .codes import CodeFormatError, CodeId, parse_code

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("patient_id", "code", "date")
DEFAULT_MIN_YEAR = 1980

_DATE_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})"
    r"(?:[T ]\d{2}:\d{2}(?::\d{2}(?:\.\d+)?)?(?:Z|[+-]\d{2}:?\d{2})?)?$"
)


class SchemaError(ValueError):
    """Event table is missing a required column."""


class EventRecord(NamedTuple):
    patient_id: str
    code: CodeId
    day: dt.date

    def key(self) -> Tuple[str, dt.date, str]:
        return (self.patient_id, self.day, self.code.text)


@dataclass
class CleaningReport:
    rows_read: int = 0
    rows_emitted: int = 0
    rows_bad_format: int = 0
    rows_implausible_date: int = 0
    rows_duplicate: int = 0

    def __add__(self, other: "CleaningReport") -> "CleaningReport":
        return CleaningReport(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def reconciles(self) -> bool:
        return self.rows_read == (
            self.rows_emitted + self.rows_bad_format + self.rows_implausible_date + self.rows_duplicate
        )

    def as_dict(self) -> dict:
        return asdict(self)


def current_year() -> int:
    return dt.date.today().year


def parse_day(text: str) -> dt.date:
    """ISO date or timestamp -> calendar day. Raises ValueError otherwise."""
    m = _DATE_RE.match(text.strip())
    if m is None:
        raise ValueError(f"unparseable date {text!r}")
    return dt.date(int(m.group(1)), int(m.group(2)), int(m.group(3)))


def _column_index(header: Sequence[str]) -> Tuple[int, int, int]:
    names = [h.strip() for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in names]
    if missing:
        raise SchemaError(f"event table lacks required column(s): {', '.join(missing)}")
    return tuple(names.index(c) for c in REQUIRED_COLUMNS)  # type: ignore[return-value]


def _row_to_record(row: Sequence[str], idx: Tuple[int, int, int]) -> Optional[EventRecord]:
    ip, ic, id_ = idx
    if len(row) <= max(idx):
        return None
    patient, code, date = row[ip].strip(), row[ic].strip(), row[id_]
    if not patient or not code:
        return None
    try:
        return EventRecord(patient, parse_code(code), parse_day(date))
    except (CodeFormatError, ValueError):
        return None


def _text_stream(source) -> io.TextIOBase:
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def _iter_rows(source) -> Tuple[Tuple[int, int, int], Iterator[List[str]]]:
    reader = csv.reader(_text_stream(source), delimiter="\t", quoting=csv.QUOTE_NONE)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("event table is empty (no header)") from None
    return _column_index(header), reader


def parse_events(source) -> Tuple[List[EventRecord], CleaningReport]:
    """Parse an event table from a byte or text stream.

    Timestamps are truncated to dates. Malformed rows (missing fields, empty
    or unparseable code, unparseable date) are counted and skipped. Records
    come back in input order.
    """
    idx, rows = _iter_rows(source)
    out: List[EventRecord] = []
    report = CleaningReport()
    for row in rows:
        if not row:
            continue
        report.rows_read += 1
        rec = _row_to_record(row, idx)
        if rec is None:
            report.rows_bad_format += 1
        else:
            out.append(rec)
    report.rows_emitted = len(out)
    return out, report


def filter_implausible_dates(
    events: Iterable[EventRecord], min_year: int = DEFAULT_MIN_YEAR, max_year: Optional[int] = None
) -> Tuple[List[EventRecord], int]:
    """Keep records with ``min_year <= year <= max_year`` (both inclusive)."""
    if max_year is None:
        max_year = current_year()
    if min_year > max_year:
        raise ValueError(f"min_year {min_year} > max_year {max_year}")
    kept, rejected = [], 0
    for rec in events:
        if min_year <= rec.day.year <= max_year:
            kept.append(rec)
        else:
            rejected += 1
    return kept, rejected


def deduplicate(events: Iterable[EventRecord]) -> List[EventRecord]:
    """One record per (patient_id, code, day), first occurrence wins."""
    seen = set()
    out = []
    for rec in events:
        if rec not in seen:
            seen.add(rec)
            out.append(rec)
    return out


def clean_records(
    records: Sequence[EventRecord], min_year: int = DEFAULT_MIN_YEAR, max_year: Optional[int] = None
) -> Tuple[List[EventRecord], CleaningReport]:
    """Date filter then dedup. The report covers only these two steps."""
    kept, rejected = filter_implausible_dates(records, min_year, max_year)
    unique = deduplicate(kept)
    report = CleaningReport(
        rows_read=len(records),
        rows_emitted=len(unique),
        rows_implausible_date=rejected,
        rows_duplicate=len(kept) - len(unique),
    )
    return unique, report


def _batched(rows: Iterator[List[str]], size: int) -> Iterator[List[List[str]]]:
    batch: List[List[str]] = []
    for row in rows:
        if not row:
            continue
        batch.append(row)
        if len(batch) >= size:
            yield batch
            batch = []
    if batch:
        yield batch


def _clean_file(
    path, batch_size: int, min_year: int, max_year: int
) -> Tuple[List[List[EventRecord]], CleaningReport]:
    parts = []
    report = CleaningReport()
    with open(path, "rb") as fh:
        idx, rows = _iter_rows(fh)
        for batch in _batched(rows, batch_size):
            parsed = []
            bad = 0
            for row in batch:
                rec = _row_to_record(row, idx)
                if rec is None:
                    bad += 1
                else:
                    parsed.append(rec)
            unique, r = clean_records(parsed, min_year, max_year)
            r.rows_read += bad
            r.rows_bad_format += bad
            report = report + r
            parts.append(unique)
    return parts, report


def sort_events(events: Iterable[EventRecord]) -> List[EventRecord]:
    return sorted(events, key=EventRecord.key)


def clean_files(
    paths: Sequence,
    batch_size: int = 100_000,
    min_year: int = DEFAULT_MIN_YEAR,
    max_year: Optional[int] = None,
    threads: int = 1,
) -> Tuple[List[EventRecord], CleaningReport]:
    """Clean several event files batch by batch and merge.

    Batches are cleaned independently; a final merge keyed on the
    (patient, code, day) triple removes cross-batch and cross-file duplicates.
    The merged stream is sorted by (patient, day, code), so the output does not
    depend on batch size, file order or thread count.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if max_year is None:
        max_year = current_year()
    if min_year > max_year:
        raise ValueError(f"min_year {min_year} > max_year {max_year}")

    def work(p):
        return _clean_file(p, batch_size, min_year, max_year)

    if threads > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, paths))
    else:
        results = [work(p) for p in paths]

    report = CleaningReport()
    merged = set()
    for parts, r in results:
        report = report + r
        for part in parts:
            merged.update(part)
    cross_dups = report.rows_emitted - len(merged)
    report.rows_duplicate += cross_dups
    report.rows_emitted = len(merged)
    log.info("cleaned %d file(s): %s", len(paths), report)
    return sort_events(merged), report


def batch_clean(
    paths: Sequence,
    batch_size: int,
    sink: Callable[[List[EventRecord]], None],
    min_year: int = DEFAULT_MIN_YEAR,
    max_year: Optional[int] = None,
    threads: int = 1,
) -> CleaningReport:
    """Clean ``paths`` and hand the merged, sorted records to ``sink``."""
    records, report = clean_files(paths, batch_size, min_year, max_year, threads)
    sink(records)
    return report


def write_events(fh, events: Iterable[EventRecord]) -> None:
    fh.write("patient_id\tcode\tdate\n")
    for rec in events:
        fh.write(f"{rec.patient_id}\t{rec.code.text}\t{rec.day.isoformat()}\n")


def read_events(path) -> List[EventRecord]:
    """Read an already-cleaned event file. Malformed rows are an error here."""
    with open(path, "rb") as fh:
        records, report = parse_events(fh)
    if report.rows_bad_format:
        raise ValueError(f"{path}: {report.rows_bad_format} malformed row(s) in a cleaned event file")
    return records


def save_events(path, events: Iterable[EventRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_events(fh, events)
