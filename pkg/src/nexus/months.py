"""Calendar-month arithmetic on a flat integer index.

A month is represented internally as ``year * 12 + (month - 1)`` so that
month differences, step shifts and GP grid coordinates are plain integer
arithmetic. File interfaces always carry the human-readable ``YYYY-MM``
form; conversion happens at the boundaries.
"""

from __future__ import annotations

import datetime as _dt
import re

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


def month_index(year: int, month: int) -> int:
    """Flat index of a calendar month; January 2000 -> 24000."""
    if not 1 <= month <= 12:
        raise ValueError(f"month out of range: {month}")
    return year * 12 + (month - 1)


def parse_month(text: str) -> int:
    """Parse 'YYYY-MM' into a flat month index."""
    m = _MONTH_RE.match(text.strip())
    if m is None:
        raise ValueError(f"not a YYYY-MM month: {text!r}")
    return month_index(int(m.group(1)), int(m.group(2)))


def format_month(index: int) -> str:
    """Inverse of :func:`parse_month`."""
    year, month0 = divmod(index, 12)
    return f"{year:04d}-{month0 + 1:02d}"


def month_of_date(value: str | _dt.date) -> int:
    """Month index of an ISO-8601 date (or a date object)."""
    if isinstance(value, str):
        value = _dt.date.fromisoformat(value.strip())
    return month_index(value.year, value.month)


def parse_window(text: str) -> tuple[int, int]:
    """Parse an inclusive 'YYYY-MM:YYYY-MM' month window."""
    try:
        lo_text, hi_text = text.split(":")
    except ValueError:
        raise ValueError(f"not a YYYY-MM:YYYY-MM window: {text!r}") from None
    lo, hi = parse_month(lo_text), parse_month(hi_text)
    if hi < lo:
        raise ValueError(f"window end precedes start: {text!r}")
    return lo, hi


def month_range(start: int, end: int) -> list[int]:
    """Inclusive contiguous list of month indices."""
    if end < start:
        raise ValueError(f"empty month range: {start}..{end}")
    return list(range(start, end + 1))
