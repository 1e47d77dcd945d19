"""UTC instants, with an env override so fixtures can pin the clock.

If ARK_CLOCK is set to an ISO-8601 UTC instant (e.g. 2031-01-01T00:00:00Z),
now() returns that instant instead of wall time.  The variable is re-read on
every call so a test can move the clock between requests.
"""

from __future__ import annotations

import os
from datetime import datetime, timezone

CLOCK_ENV = "ARK_CLOCK"


def parse_instant(text: str) -> datetime:
    """Parse an ISO-8601 instant; naive values are taken as UTC."""
    t = text.strip()
    if t.endswith("Z"):
        t = t[:-1] + "+00:00"
    dt = datetime.fromisoformat(t)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_instant(dt: datetime) -> str:
    dt = dt.astimezone(timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def now() -> datetime:
    fixed = os.environ.get(CLOCK_ENV)
    if fixed:
        return parse_instant(fixed)
    return datetime.now(timezone.utc)
