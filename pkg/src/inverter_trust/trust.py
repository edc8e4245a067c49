"""VPP-operator trust evaluation of inverters from their update history.

``compute_trust_state`` uses a strict timeliness test: an update installed at
precisely ``published + T`` is *not* timely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Callable, Mapping, Optional, Sequence, Union

from . import crypto
from .codec import canonical_json, format_ts, parse_ts
from .credentials import InverterCredential, Status, compact_encoding, history_errors, verify_credential
from .registry import AUTHENTICATION, Registry


class TrustState(str, enum.Enum):
    TRUSTABLE = "trustable"
    SEMI_TRUST = "semi-trust"
    DISTRUST = "distrust"


class Interaction(str, enum.Enum):
    FULL_CONTROL_AND_DATA = "FullControlAndData"
    DATA_WITH_UNCERTAINTY = "DataWithUncertainty"
    NONE = "None"

    @property
    def capabilities(self) -> frozenset[str]:
        return _CAPABILITIES[self]


_CAPABILITIES = {
    Interaction.FULL_CONTROL_AND_DATA: frozenset({"read_data", "trust_data", "send_control"}),
    Interaction.DATA_WITH_UNCERTAINTY: frozenset({"read_data"}),
    Interaction.NONE: frozenset(),
}

DEFAULT_INTERACTIONS = {
    TrustState.TRUSTABLE: Interaction.FULL_CONTROL_AND_DATA,
    TrustState.SEMI_TRUST: Interaction.DATA_WITH_UNCERTAINTY,
    TrustState.DISTRUST: Interaction.NONE,
}


@dataclass(frozen=True)
class AvailableUpdate:
    version: str
    published: datetime
    update_type: str = "security"
    cves: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "published": format_ts(self.published),
            "updateType": self.update_type,
            "cves": list(self.cves),
        }

    @classmethod
    def from_json(cls, d: dict) -> "AvailableUpdate":
        return cls(d["version"], parse_ts(d["published"]), d.get("updateType", "security"), tuple(d.get("cves", ())))


AvailableUpdateList = Sequence[AvailableUpdate]


def check_update_list(updates: AvailableUpdateList) -> None:
    for prev, cur in zip(updates, updates[1:]):
        if cur.published < prev.published:
            raise ValueError("available update list must be ascending by publish time")


@dataclass(frozen=True)
class TrustPolicy:
    threshold_security: timedelta = timedelta(days=14)
    threshold_other: timedelta = timedelta(days=60)
    interaction_map: Mapping[TrustState, Interaction] = field(default_factory=lambda: dict(DEFAULT_INTERACTIONS))
    trusted_issuers: Optional[frozenset[str]] = None
    # CVE id -> public disclosure time, for the patch-overdue advisory
    known_cves: Mapping[str, datetime] = field(default_factory=dict)

    def __post_init__(self) -> None:
        caps = [self.interaction_map[s].capabilities for s in TrustState]
        trustable, semi, distrust = caps
        if not (trustable >= semi >= distrust) or "send_control" in distrust:
            raise ValueError("interaction map must shrink from trustable to distrust, with no control at distrust")

    def threshold_for(self, update: AvailableUpdate) -> timedelta:
        return self.threshold_security if update.update_type == "security" else self.threshold_other

    def to_json(self) -> dict:
        return {
            "threshold_days_security": self.threshold_security / timedelta(days=1),
            "threshold_days_other": self.threshold_other / timedelta(days=1),
            "interaction_map": {s.value: self.interaction_map[s].value for s in TrustState},
        }

    @classmethod
    def from_json(cls, d: dict) -> "TrustPolicy":
        imap = dict(DEFAULT_INTERACTIONS)
        for state, value in d.get("interaction_map", {}).items():
            imap[TrustState(state)] = Interaction(value)
        issuers = d.get("trusted_issuers")
        return cls(
            threshold_security=timedelta(days=d.get("threshold_days_security", 14)),
            threshold_other=timedelta(days=d.get("threshold_days_other", 60)),
            interaction_map=imap,
            trusted_issuers=frozenset(issuers) if issuers is not None else None,
            known_cves={k: parse_ts(v) for k, v in d.get("known_cves", {}).items()},
        )


Threshold = Union[timedelta, TrustPolicy, Callable[[AvailableUpdate], timedelta]]


def _threshold_fn(threshold: Threshold) -> Callable[[AvailableUpdate], timedelta]:
    if isinstance(threshold, timedelta):
        return lambda _u: threshold
    if isinstance(threshold, TrustPolicy):
        return threshold.threshold_for
    return threshold


def assess_history(
    history: Sequence[tuple[str, datetime]],
    resets: Sequence[datetime],
    updates: AvailableUpdateList,
    threshold: Threshold,
) -> tuple[bool, bool]:
    """Return ``(all_updates, timely_updated)`` for a newest-first history.

    Only updates published strictly after the latest reset are considered.
    Scanning stops at the first missing update.
    """
    limit = _threshold_fn(threshold)
    if resets:
        latest_reset = resets[0]
        updates = [u for u in updates if u.published > latest_reset]
    installed: dict[str, datetime] = {}
    for version, ts in history:
        installed.setdefault(version, ts)
    timely = True
    for update in updates:
        install_time = installed.get(update.version)
        if install_time is None:
            return False, timely
        timely = timely and update.published + limit(update) > install_time
    return True, timely


def compute_trust_state(vc: InverterCredential, updates: AvailableUpdateList, threshold: Threshold) -> TrustState:
    errors = history_errors(vc.firmware_history, vc.reset_history)
    if errors:
        raise ValueError("; ".join(errors))
    all_updates, timely = assess_history(vc.firmware_history, vc.reset_history, updates, threshold)
    if not all_updates:
        return TrustState.DISTRUST
    return TrustState.TRUSTABLE if timely else TrustState.SEMI_TRUST


def operator_timely_updated(vc: InverterCredential, updates: AvailableUpdateList, threshold: Threshold) -> bool:
    """The operator's own timeliness verdict, ignoring ``vc.updatable.timely_updated``."""
    return assess_history(vc.firmware_history, vc.reset_history, updates, threshold)[1]


def permitted_interactions(state: TrustState, policy: Optional[TrustPolicy] = None) -> Interaction:
    imap = policy.interaction_map if policy is not None else DEFAULT_INTERACTIONS
    return imap[TrustState(state)]


# -- enrollment ------------------------------------------------------------


def presentation_payload(vc_token: bytes, presenter: Any, challenge: str) -> bytes:
    return canonical_json({"credential": vc_token.decode("ascii"), "presenter": str(presenter), "challenge": challenge})


@dataclass(frozen=True)
class Presentation:
    vc: InverterCredential
    presenter: Any
    presenter_sig: crypto.Signature
    challenge: str = ""

    def signed_bytes(self) -> bytes:
        return presentation_payload(compact_encoding(self.vc), self.presenter, self.challenge)


def make_presentation(vc: InverterCredential, presenter: Any, key: crypto.KeyPair, challenge: str = "") -> Presentation:
    sig = crypto.sign(presentation_payload(compact_encoding(vc), presenter, challenge), key)
    return Presentation(vc, presenter, sig, challenge)


@dataclass(frozen=True)
class EnrollmentDecision:
    accepted: bool
    trust: TrustState
    reasons: tuple[str, ...] = ()
    interactions: Interaction = Interaction.NONE

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "trust": self.trust.value,
            "interactions": self.interactions.value,
            "reasons": list(self.reasons),
        }

    @classmethod
    def from_json(cls, d: dict) -> "EnrollmentDecision":
        return cls(bool(d["accepted"]), TrustState(d["trust"]), tuple(d["reasons"]), Interaction(d["interactions"]))


def _reject(*reasons: str) -> EnrollmentDecision:
    return EnrollmentDecision(False, TrustState.DISTRUST, tuple(reasons), Interaction.NONE)


def patch_advisories(updates: AvailableUpdateList, policy: TrustPolicy, now: Optional[datetime]) -> list[str]:
    """Known CVEs with no fixing update within the security threshold of disclosure."""
    if now is None:
        return []
    out = []
    for cve, disclosed in sorted(policy.known_cves.items()):
        deadline = disclosed + policy.threshold_security
        fixed = any(cve in u.cves and u.published <= deadline for u in updates)
        if not fixed and now > deadline:
            out.append(f"advisory:ManufacturerPatchOverdue:{cve}")
    return out


def evaluate_enrollment(
    presentation: Presentation,
    registry: Registry,
    ledger_query: Callable[[str], AvailableUpdateList],
    policy: TrustPolicy,
    *,
    now: Optional[datetime] = None,
) -> EnrollmentDecision:
    """Decide whether a presented inverter credential may join the VPP.

    Checks run in order: credential verification, issuer allow-list,
    presenter ownership and signature, revocation, then the trust state
    computed against the model's published updates.
    """
    vc = presentation.vc
    if not isinstance(vc, InverterCredential):
        return _reject("SchemaViolation: not an inverter credential")
    result = verify_credential(vc, registry)
    if result.status not in (Status.VALID, Status.REVOKED):
        return _reject(result.status.value)
    if policy.trusted_issuers is not None and str(vc.issuer) not in policy.trusted_issuers:
        return _reject("UntrustedIssuer")
    presenter = str(presentation.presenter)
    if presenter != str(vc.updatable.owner):
        return _reject("NotOwner")
    inverter_doc = registry.try_resolve(vc.immutable.inverter_id)
    if inverter_doc is None or str(inverter_doc.controller) != presenter:
        return _reject("NotOwner")
    presenter_doc = registry.try_resolve(presenter)
    if presenter_doc is None or not presenter_doc.verify(presentation.signed_bytes(), presentation.presenter_sig, AUTHENTICATION):
        return _reject("BadPresenterSignature")
    if result.status is Status.REVOKED:
        return _reject("Revoked")
    updates = list(ledger_query(vc.immutable.model))
    check_update_list(updates)
    trust = compute_trust_state(vc, updates, policy)
    reasons = patch_advisories(updates, policy, now)
    interactions = permitted_interactions(trust, policy)
    if trust is TrustState.DISTRUST:
        return EnrollmentDecision(False, trust, tuple(["MissedUpdate"] + reasons), interactions)
    if interactions is Interaction.NONE:
        return EnrollmentDecision(False, trust, tuple(["PolicyDenied"] + reasons), interactions)
    if trust is TrustState.SEMI_TRUST:
        reasons = ["LateUpdate"] + reasons
    return EnrollmentDecision(True, trust, tuple(reasons), interactions)
