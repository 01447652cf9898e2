"""Coded concept identifiers.

Every code travels through the pipeline in its canonical text form
``DOMAIN:value`` (``LOCAL:institution:value`` for institution-specific codes),
so files stay self-describing without vocabulary sidecars.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional

DOMAINS = frozenset(
    {
        "ICD9",
        "ICD10",
        "PheCode",
        "RxNorm",
        "LOINC",
        "LP",
        "CPT",
        "HCPCS",
        "ICD9PCS",
        "ICD10PCS",
        "CCS",
        "CUI",
        "LOCAL",
    }
)


class CodeFormatError(ValueError):
    pass


@functools.total_ordering
@dataclass(frozen=True)
class CodeId:
    """A coded concept. Ordering and equality follow the canonical text."""

    domain: str
    value: str
    institution: Optional[str] = None
    text: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise CodeFormatError(f"unknown code domain {self.domain!r}")
        if not self.value or self.value != self.value.strip() or "\t" in self.value:
            raise CodeFormatError(f"bad code value {self.value!r}")
        if (self.domain == "LOCAL") != (self.institution is not None):
            raise CodeFormatError("institution is required exactly for LOCAL codes")
        if self.institution is not None and (not self.institution or ":" in self.institution):
            raise CodeFormatError(f"bad institution {self.institution!r}")
        if self.institution is None:
            text = f"{self.domain}:{self.value}"
        else:
            text = f"LOCAL:{self.institution}:{self.value}"
        object.__setattr__(self, "text", text)

    def __str__(self) -> str:
        return self.text

    def __lt__(self, other: "CodeId") -> bool:
        if not isinstance(other, CodeId):
            return NotImplemented
        return self.text < other.text

    @classmethod
    def parse(cls, text: str) -> "CodeId":
        return parse_code(text)


@functools.lru_cache(maxsize=1 << 18)
def parse_code(text: str) -> CodeId:
    """Parse canonical text; ``str(parse_code(t)) == t`` for every valid ``t``."""
    domain, sep, rest = text.partition(":")
    if not sep:
        raise CodeFormatError(f"code {text!r} lacks a DOMAIN: prefix")
    if domain == "LOCAL":
        inst, sep, value = rest.partition(":")
        if not sep:
            raise CodeFormatError(f"local code {text!r} must read LOCAL:institution:value")
        return CodeId(domain, value, inst)
    return CodeId(domain, rest)
