"""Simulated message transport with capture and per-link tamper hooks.

Delivery is reliable and in order unless a hook rewrites or drops a
message. Every transmission is recorded as one capture line; raw payloads
are kept in memory only, for confidentiality assertions.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Optional

from .codec import format_ts

# (kind, payload) -> replacement payload, or None to drop
Hook = Callable[[str, bytes], Optional[bytes]]
Handler = Callable[[str, str, bytes], Optional[bytes]]


@dataclass(frozen=True)
class CapturedMessage:
    time: datetime
    sender: str
    recipient: str
    kind: str
    payload: bytes
    delivered: bool = True

    def to_json(self) -> dict:
        return {
            "time": format_ts(self.time),
            "from": self.sender,
            "to": self.recipient,
            "kind": self.kind,
            "payload_digest": hashlib.sha256(self.payload).hexdigest(),
            "payload_size": len(self.payload),
        }


class Network:
    def __init__(self, now: Optional[Callable[[], datetime]] = None):
        self._now = now or (lambda: datetime.now(timezone.utc))
        self.capture: list[CapturedMessage] = []
        self._hooks: dict[tuple[str, str], list[Hook]] = {}
        self._services: dict[str, tuple[str, Handler]] = {}

    def add_hook(self, sender: str, recipient: str, hook: Hook) -> None:
        self._hooks.setdefault((sender, recipient), []).append(hook)

    def remove_hook(self, sender: str, recipient: str, hook: Hook) -> None:
        self._hooks.get((sender, recipient), []).remove(hook)

    def clear_hooks(self) -> None:
        self._hooks.clear()

    def serve(self, base_uri: str, owner: str, handler: Handler) -> None:
        """Route requests whose URI starts with ``base_uri`` to ``handler(sender, uri, payload)``."""
        self._services[base_uri.rstrip("/")] = (owner, handler)

    def _route(self, uri: str) -> Optional[tuple[str, Handler]]:
        best = None
        for base, target in self._services.items():
            if (uri == base or uri.startswith(base + "/")) and (best is None or len(base) > len(best[0])):
                best = (base, target)
        return best[1] if best else None

    def transmit(self, sender: str, recipient: str, kind: str, payload: bytes) -> Optional[bytes]:
        """Send one message; returns what the recipient receives, or None if dropped."""
        delivered: Optional[bytes] = payload
        for hook in self._hooks.get((sender, recipient), ()):
            delivered = hook(kind, delivered)
            if delivered is None:
                break
        self.capture.append(CapturedMessage(self._now(), sender, recipient, kind, payload, delivered is not None))
        if delivered is not None and delivered != payload:
            self.capture.append(CapturedMessage(self._now(), sender, recipient, kind + ":tampered", delivered))
        return delivered

    def request(self, sender: str, uri: str, kind: str, payload: bytes) -> Optional[bytes]:
        """Request/response exchange with the service owning ``uri``; None on any drop or missing route."""
        route = self._route(uri)
        if route is None:
            self.capture.append(CapturedMessage(self._now(), sender, uri, kind, payload, False))
            return None
        owner, handler = route
        delivered = self.transmit(sender, owner, kind, payload)
        if delivered is None:
            return None
        response = handler(sender, uri, delivered)
        if response is None:
            return None
        return self.transmit(owner, sender, kind + ":response", response)

    def capture_lines(self) -> list[str]:
        return [json.dumps(m.to_json(), sort_keys=True) for m in self.capture]

    def raw_payloads(self) -> list[bytes]:
        return [m.payload for m in self.capture]
