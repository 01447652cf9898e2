"""Mapping-table driven code roll-up and PheCode level truncation."""
from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .codes import CodeFormatError, CodeId, parse_code
from .events import EventRecord, deduplicate, sort_events


class MappingError(ValueError):
    pass


class UnmappedCodeError(MappingError):
    pass


class Unmapped(str, Enum):
    keep = "keep"
    drop = "drop"
    error = "error"


class MultiTarget(str, Enum):
    emit_all = "emit_all"
    first_listed = "first_listed"


class PhecodeLevel(str, Enum):
    integer = "integer"
    one_digit = "one_digit"
    two_digit = "two_digit"


_PHECODE_RE = re.compile(r"^(\d+)(?:\.(\d{1,2}))?$")
_LEVEL_DIGITS = {PhecodeLevel.integer: 0, PhecodeLevel.one_digit: 1, PhecodeLevel.two_digit: 2}


@dataclass(frozen=True)
class RollupPolicy:
    unmapped: Unmapped = Unmapped.keep
    multi_target: MultiTarget = MultiTarget.emit_all

    def __post_init__(self):
        object.__setattr__(self, "unmapped", Unmapped(self.unmapped))
        object.__setattr__(self, "multi_target", MultiTarget(self.multi_target))


@dataclass(frozen=True)
class MappingTable:
    """Source code -> ordered target codes.

    ``source_domains``/``target_domains`` default to the domains seen in the
    entries; when given explicitly every entry must respect them.
    """

    entries: Mapping[CodeId, Tuple[CodeId, ...]]
    name: str = ""
    source_domains: FrozenSet[str] = frozenset()
    target_domains: FrozenSet[str] = frozenset()

    def __post_init__(self):
        src = frozenset(c.domain for c in self.entries)
        tgt = frozenset(t.domain for ts in self.entries.values() for t in ts)
        if not self.source_domains:
            object.__setattr__(self, "source_domains", src)
        if not self.target_domains:
            object.__setattr__(self, "target_domains", tgt)
        if not src <= self.source_domains or not tgt <= self.target_domains:
            raise MappingError(f"mapping table {self.name!r} has entries outside its declared domains")
        for s, ts in self.entries.items():
            if s in ts:
                raise MappingError(f"mapping table {self.name!r} maps {s} to itself")

    def lookup(self, code: CodeId) -> Tuple[CodeId, ...]:
        return self.entries.get(code, ())

    def __len__(self) -> int:
        return len(self.entries)


def load_mapping(path, name: Optional[str] = None) -> MappingTable:
    """Read a ``source_code<TAB>target_code`` table.

    Duplicate rows collapse; targets keep file order. Bad code text and
    self-mappings are fatal and name the offending line.
    """
    path = Path(path)
    entries: Dict[CodeId, List[CodeId]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["source_code", "target_code"]:
            raise MappingError(f"{path}: header must be source_code<TAB>target_code")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) < 2:
                raise MappingError(f"{path}:{lineno}: expected two columns")
            try:
                src, tgt = parse_code(row[0].strip()), parse_code(row[1].strip())
            except CodeFormatError as exc:
                raise MappingError(f"{path}:{lineno}: {exc}") from None
            if src == tgt:
                raise MappingError(f"{path}:{lineno}: {src} maps to itself")
            targets = entries.setdefault(src, [])
            if tgt not in targets:
                targets.append(tgt)
    return MappingTable({s: tuple(ts) for s, ts in entries.items()}, name=name or path.stem)


def truncate_phecode(code: CodeId, level) -> CodeId:
    """Cut a PheCode's decimal part to 0, 1 or 2 digits."""
    level = PhecodeLevel(level)
    if code.domain != "PheCode":
        raise CodeFormatError(f"{code} is not a PheCode")
    m = _PHECODE_RE.match(code.value)
    if m is None:
        raise CodeFormatError(f"malformed PheCode value {code.value!r}")
    integer, decimals = m.group(1), (m.group(2) or "")[: _LEVEL_DIGITS[level]]
    value = f"{integer}.{decimals}" if decimals else integer
    return code if value == code.value else CodeId("PheCode", value)


@dataclass
class RollupReport:
    mapped: Counter = field(default_factory=Counter)
    unmapped: Counter = field(default_factory=Counter)
    dropped: int = 0
    merged_duplicates: int = 0

    def as_dict(self) -> dict:
        out = {}
        for dom in sorted(set(self.mapped) | set(self.unmapped)):
            out[f"mapped.{dom}"] = self.mapped[dom]
            out[f"unmapped.{dom}"] = self.unmapped[dom]
        out["dropped"] = self.dropped
        out["merged_duplicates"] = self.merged_duplicates
        return out


def _map_code(
    code: CodeId, tables: Sequence[MappingTable], start: int, policy: RollupPolicy
) -> Optional[Tuple[CodeId, ...]]:
    """Targets of ``code`` using the first table at or after ``start`` whose
    source domains cover it, chained through later tables. None if unmapped."""
    for i in range(start, len(tables)):
        table = tables[i]
        if code.domain not in table.source_domains:
            continue
        targets = table.lookup(code)
        if not targets:
            return None
        if policy.multi_target is MultiTarget.first_listed:
            targets = targets[:1]
        out: List[CodeId] = []
        for t in targets:
            chained = _map_code(t, tables, i + 1, policy)
            for c in chained if chained is not None else (t,):
                if c not in out:
                    out.append(c)
        return tuple(out)
    return None


def rollup_events(
    events: Iterable[EventRecord],
    tables: Sequence[MappingTable],
    policy: RollupPolicy = RollupPolicy(),
    phecode_level=None,
) -> Tuple[List[EventRecord], RollupReport]:
    """Replace each code by its roll-up target(s) and re-deduplicate.

    Tables are consulted in order; a code is handled by the first table whose
    source domains include its domain, and the targets are chained through
    the tables that follow. Optional PheCode truncation runs last. Output is
    sorted like cleaned event files.
    """
    report = RollupReport()
    cache: Dict[CodeId, Optional[Tuple[CodeId, ...]]] = {}
    out: List[EventRecord] = []
    for rec in deduplicate(events):
        code = rec.code
        if code not in cache:
            cache[code] = _map_code(code, tables, 0, policy)
        targets = cache[code]
        if targets is None:
            report.unmapped[code.domain] += 1
            if policy.unmapped is Unmapped.error:
                raise UnmappedCodeError(f"no mapping for {code}")
            if policy.unmapped is Unmapped.drop:
                report.dropped += 1
                continue
            targets = (code,)
        else:
            report.mapped[code.domain] += 1
        for t in targets:
            if phecode_level is not None and t.domain == "PheCode":
                t = truncate_phecode(t, phecode_level)
            out.append(EventRecord(rec.patient_id, t, rec.day))
    unique = deduplicate(out)
    report.merged_duplicates = len(out) - len(unique)
    return sort_events(unique), report
