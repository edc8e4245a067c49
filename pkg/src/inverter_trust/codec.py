"""Byte-exact encodings shared across modules: canonical JSON, base64url, timestamps."""

from __future__ import annotations

import base64
import binascii
import json
import re
from datetime import datetime, timedelta, timezone
from typing import Any

_TS_RE = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d{6})?Z$")


def canonical_json(obj: Any) -> bytes:
    """Compact UTF-8 JSON with sorted keys, for protocol messages."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def ordered_json(obj: Any) -> bytes:
    """Compact UTF-8 JSON preserving the caller's key order."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode()


def b64url_encode(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    """Strict unpadded base64url: non-canonical encodings are rejected."""
    if not isinstance(text, str) or not re.fullmatch(r"[A-Za-z0-9_-]*", text) or len(text) % 4 == 1:
        raise ValueError("malformed base64url segment")
    try:
        raw = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    except binascii.Error as exc:
        raise ValueError(f"malformed base64url segment: {exc}") from None
    if b64url_encode(raw) != text:
        raise ValueError("non-canonical base64url segment")
    return raw


def format_ts(ts: datetime) -> str:
    if ts.tzinfo is None:
        raise ValueError("timestamps must be timezone-aware")
    ts = ts.astimezone(timezone.utc)
    if ts.microsecond:
        return ts.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str) -> datetime:
    if not isinstance(text, str) or not _TS_RE.match(text):
        raise ValueError(f"malformed UTC timestamp: {text!r}")
    fmt = "%Y-%m-%dT%H:%M:%S.%fZ" if "." in text else "%Y-%m-%dT%H:%M:%SZ"
    return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)


def days(n: float) -> timedelta:
    return timedelta(days=n)
