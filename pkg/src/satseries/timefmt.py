from datetime import datetime, timezone


def parse_utc(text: str | datetime) -> datetime:
    """Parse an ISO 8601 timestamp; naive values are taken as UTC."""
    if isinstance(text, datetime):
        dt = text
    else:
        s = str(text).strip()
        if s.endswith(("Z", "z")):
            s = s[:-1] + "+00:00"
        if len(s) >= 15 and s[8] == "T" and s[:8].isdigit():
            # basic format, e.g. 20180401T101031Z
            dt = datetime.strptime(s[:15], "%Y%m%dT%H%M%S")
        else:
            dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_utc(dt: datetime) -> str:
    dt = parse_utc(dt)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def format_basic(dt: datetime) -> str:
    """Filesystem-safe ISO 8601 basic format."""
    return parse_utc(dt).strftime("%Y%m%dT%H%M%SZ")


def to_micros(dt: datetime) -> int:
    dt = parse_utc(dt)
    delta = dt - datetime(1970, 1, 1, tzinfo=timezone.utc)
    return (delta.days * 86400 + delta.seconds) * 1_000_000 + delta.microseconds
