"""Firmware and inverter credentials: data model, canonical bytes, issuance, verification.

``canonical_bytes`` is the compact UTF-8 JSON of the credential (proof
excluded) with keys in the fixed order produced by ``to_payload``.

The proof is an ES256 JWS. The token is ``header.claims.signature`` with
unpadded base64url segments; the claims are ``iss``, ``sub``, ``jti``,
``nbf`` and ``vc`` (the canonical credential), and the signature covers
``header.claims`` exactly as a JWT library would compute it.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import random
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Optional, Union

from . import crypto
from .codec import b64url_decode, b64url_encode, format_ts, ordered_json, parse_ts
from .registry import ASSERTION, Did, DidLike, Registry, UnknownDid

CONTEXT = ("https://www.w3.org/2018/credentials/v1", "https://w3id.org/security/suites/jws-2020/v1")
FIRMWARE_TYPES = ("VerifiableCredential", "FirmwareVC")
INVERTER_TYPES = ("VerifiableCredential", "InverterVC")
UPDATE_TYPES = ("security", "bug", "feature")
INVERTER_STATUSES = ("active", "inactive")
PROOF_TYPE = "JsonWebSignature2020"

_VERSION_RE = re.compile(r"^v?(\d+(?:\.\d+)*)$")


class CredentialError(Exception):
    pass


class CredentialSchemaError(CredentialError):
    pass


class CredentialFormatError(CredentialError):
    """Raised when bytes or JSON cannot be decoded into a credential."""


class HistoryError(CredentialError):
    pass


def version_key(version: str) -> tuple[int, ...]:
    """Dotted-numeric ordering key; an optional leading ``v`` is ignored.

    Trailing zero segments are insignificant, so ``1.0`` and ``1`` compare equal.
    """
    m = _VERSION_RE.match(version) if isinstance(version, str) else None
    if not m:
        raise ValueError(f"unparseable version {version!r}")
    parts = [int(p) for p in m.group(1).split(".")]
    while len(parts) > 1 and parts[-1] == 0:
        parts.pop()
    return tuple(parts)


def is_newer(candidate: str, current: str) -> bool:
    return version_key(candidate) > version_key(current)


@dataclass(frozen=True)
class FirmwareInfo:
    version: str
    binary_hash: bytes
    update_type: str


@dataclass(frozen=True)
class FirmwareCredential:
    id: str
    issuer: Did
    issuance_date: datetime
    manufacturer: Did
    released_date: datetime
    link: Optional[str]
    firmware_info: FirmwareInfo
    associated_cves: tuple[str, ...] = ()
    supporting_models: tuple[str, ...] = ()
    type_tags: tuple[str, ...] = FIRMWARE_TYPES
    context: tuple[str, ...] = CONTEXT
    proof: Optional[crypto.Signature] = None

    @property
    def version(self) -> str:
        return self.firmware_info.version

    def to_payload(self) -> dict:
        info = self.firmware_info
        return {
            "@context": list(self.context),
            "id": self.id,
            "type": list(self.type_tags),
            "issuer": str(self.issuer),
            "issuanceDate": format_ts(self.issuance_date),
            "credentialSubject": {
                "manufacturer": str(self.manufacturer),
                "releasedDate": format_ts(self.released_date),
                "link": self.link,
                "firmwareInfo": {
                    "version": info.version,
                    "binaryHash": info.binary_hash.hex(),
                    "type": info.update_type,
                },
                "associatedCVEs": list(self.associated_cves),
                "supportingModels": list(self.supporting_models),
            },
        }


@dataclass(frozen=True)
class InverterIdentity:
    inverter_id: Did
    serial_no: str
    manufactured_date: datetime
    model: str
    # manufacturer-attested device capabilities, in issuance order
    capabilities: tuple[tuple[str, Any], ...] = ()


@dataclass(frozen=True)
class InverterStatus:
    owner: Did
    status: str
    software_version: str
    timely_updated: bool
    missing_updates: bool


@dataclass(frozen=True)
class InverterCredential:
    id: str
    issuer: Did
    issuance_date: datetime
    immutable: InverterIdentity
    updatable: InverterStatus
    # (version, install time), newest first
    firmware_history: tuple[tuple[str, datetime], ...]
    # factory-reset times, newest first
    reset_history: tuple[datetime, ...] = ()
    type_tags: tuple[str, ...] = INVERTER_TYPES
    context: tuple[str, ...] = CONTEXT
    proof: Optional[crypto.Signature] = None

    @property
    def latest_reset(self) -> Optional[datetime]:
        return self.reset_history[0] if self.reset_history else None

    def to_payload(self) -> dict:
        ident, upd = self.immutable, self.updatable
        return {
            "@context": list(self.context),
            "id": self.id,
            "type": list(self.type_tags),
            "issuer": str(self.issuer),
            "issuanceDate": format_ts(self.issuance_date),
            "credentialSubject": {
                "immutable": {
                    "id": str(ident.inverter_id),
                    "serialNo": ident.serial_no,
                    "manufacturedDate": format_ts(ident.manufactured_date),
                    "model": ident.model,
                    "capabilities": dict(ident.capabilities),
                },
                "updatable": {
                    "owner": str(upd.owner),
                    "status": upd.status,
                    "softwareVersion": upd.software_version,
                    "timelyUpdated": upd.timely_updated,
                    "missingUpdates": upd.missing_updates,
                },
                "firmwareHistory": {v: format_ts(t) for v, t in self.firmware_history},
                "resetHistory": [format_ts(t) for t in self.reset_history],
            },
        }


Credential = Union[FirmwareCredential, InverterCredential]


def canonical_bytes(credential: Credential) -> bytes:
    return ordered_json(credential.to_payload())


# -- parsing --------------------------------------------------------------


def _req(d: Any, key: str, kind: type = str) -> Any:
    if not isinstance(d, dict) or key not in d:
        raise CredentialFormatError(f"missing field {key!r}")
    value = d[key]
    if kind is not None and not isinstance(value, kind):
        raise CredentialFormatError(f"field {key!r} must be {kind.__name__}")
    return value


def _str_list(value: Any, key: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise CredentialFormatError(f"field {key!r} must be a list of strings")
    return tuple(value)


def from_payload(payload: dict) -> Credential:
    try:
        tags = _str_list(_req(payload, "type", list), "type")
        common = dict(
            id=_req(payload, "id"),
            issuer=Did.parse(_req(payload, "issuer")),
            issuance_date=parse_ts(_req(payload, "issuanceDate")),
            type_tags=tags,
            context=_str_list(_req(payload, "@context", list), "@context"),
        )
        subject = _req(payload, "credentialSubject", dict)
        if "FirmwareVC" in tags:
            info = _req(subject, "firmwareInfo", dict)
            link = subject.get("link")
            if link is not None and not isinstance(link, str):
                raise CredentialFormatError("field 'link' must be a string or null")
            return FirmwareCredential(
                manufacturer=Did.parse(_req(subject, "manufacturer")),
                released_date=parse_ts(_req(subject, "releasedDate")),
                link=link,
                firmware_info=FirmwareInfo(
                    _req(info, "version"), bytes.fromhex(_req(info, "binaryHash")), _req(info, "type")
                ),
                associated_cves=_str_list(_req(subject, "associatedCVEs", list), "associatedCVEs"),
                supporting_models=_str_list(_req(subject, "supportingModels", list), "supportingModels"),
                **common,
            )
        if "InverterVC" in tags:
            imm = _req(subject, "immutable", dict)
            upd = _req(subject, "updatable", dict)
            history = _req(subject, "firmwareHistory", dict)
            return InverterCredential(
                immutable=InverterIdentity(
                    Did.parse(_req(imm, "id")),
                    _req(imm, "serialNo"),
                    parse_ts(_req(imm, "manufacturedDate")),
                    _req(imm, "model"),
                    tuple(_req(imm, "capabilities", dict).items()),
                ),
                updatable=InverterStatus(
                    Did.parse(_req(upd, "owner")),
                    _req(upd, "status"),
                    _req(upd, "softwareVersion"),
                    _req(upd, "timelyUpdated", bool),
                    _req(upd, "missingUpdates", bool),
                ),
                firmware_history=tuple((v, parse_ts(t)) for v, t in history.items()),
                reset_history=tuple(parse_ts(t) for t in _str_list(_req(subject, "resetHistory", list), "resetHistory")),
                **common,
            )
    except (ValueError, TypeError, AttributeError) as exc:
        raise CredentialFormatError(str(exc)) from None
    raise CredentialFormatError(f"unrecognised credential type {list(tags)}")


def proof_to_dict(credential: Credential) -> dict:
    sig = credential.proof
    assert sig is not None
    return {
        "type": PROOF_TYPE,
        "verificationMethod": f"{credential.issuer}#{sig.key_id}",
        "proofValue": b64url_encode(sig.bytes),
    }


def to_json(credential: Credential) -> dict:
    """Document form with an embedded ``proof`` object, for files and display."""
    d = credential.to_payload()
    if credential.proof is not None:
        d["proof"] = proof_to_dict(credential)
    return d


def from_json(d: dict) -> Credential:
    body = {k: v for k, v in d.items() if k != "proof"}
    cred = from_payload(body)
    proof = d.get("proof")
    if proof is None:
        return cred
    try:
        issuer, _, key_id = _req(proof, "verificationMethod").partition("#")
        sig = crypto.Signature(b64url_decode(_req(proof, "proofValue")), key_id)
    except ValueError as exc:
        raise CredentialFormatError(str(exc)) from None
    if issuer != str(cred.issuer):
        raise CredentialFormatError("proof verificationMethod does not belong to the issuer")
    return dataclasses.replace(cred, proof=sig)


# -- compact token ---------------------------------------------------------


def _header(issuer: Did, key_id: str) -> bytes:
    return ordered_json({"alg": crypto.SIGNATURE_ALGORITHM, "typ": "JWT", "kid": f"{issuer}#{key_id}"})


def _subject(credential: Credential) -> str:
    if isinstance(credential, InverterCredential):
        return str(credential.immutable.inverter_id)
    return str(credential.manufacturer)


def _claims(credential: Credential) -> bytes:
    claims = {
        "iss": str(credential.issuer),
        "sub": _subject(credential),
        "jti": credential.id,
        "nbf": int(credential.issuance_date.timestamp()),
        "vc": credential.to_payload(),
    }
    return ordered_json(claims)


def signing_input(credential: Credential, key_id: str) -> bytes:
    """The JWS signing input ``b64(header).b64(claims)`` for ``credential``."""
    return (b64url_encode(_header(credential.issuer, key_id)) + "." + b64url_encode(_claims(credential))).encode("ascii")


def compact_encoding(credential: Credential) -> bytes:
    if credential.proof is None:
        raise CredentialError("cannot encode an unsigned credential")
    return signing_input(credential, credential.proof.key_id) + b"." + b64url_encode(credential.proof.bytes).encode("ascii")


def decode(token: bytes) -> Credential:
    """Inverse of ``compact_encoding``; rejects anything non-canonical."""
    try:
        text = token.decode("ascii") if isinstance(token, (bytes, bytearray)) else token
        parts = text.split(".")
        if len(parts) != 3:
            raise CredentialFormatError("token must have three segments")
        header_raw, claims_raw, sig_raw = (b64url_decode(p) for p in parts)
        header = json.loads(header_raw)
        claims = json.loads(claims_raw)
    except (UnicodeDecodeError, ValueError) as exc:
        raise CredentialFormatError(f"malformed token: {exc}") from None
    if not isinstance(header, dict) or header.get("alg") != crypto.SIGNATURE_ALGORITHM:
        raise CredentialFormatError("unsupported token header")
    kid = header.get("kid")
    if not isinstance(kid, str) or "#" not in kid:
        raise CredentialFormatError("header kid missing")
    if not isinstance(claims, dict) or not isinstance(claims.get("vc"), dict):
        raise CredentialFormatError("claims must carry a vc object")
    issuer, _, key_id = kid.partition("#")
    cred = from_payload(claims["vc"])
    if issuer != str(cred.issuer):
        raise CredentialFormatError("header kid does not name the issuer")
    cred = dataclasses.replace(cred, proof=crypto.Signature(sig_raw, key_id))
    if _claims(cred) != claims_raw or _header(cred.issuer, key_id) != header_raw:
        raise CredentialFormatError("token is not in canonical form")
    return cred


# -- schema ----------------------------------------------------------------


def _aware(ts: Any) -> bool:
    return isinstance(ts, datetime) and ts.tzinfo is not None


def schema_errors(credential: Credential) -> list[str]:
    errors: list[str] = []
    if not isinstance(credential.id, str) or not credential.id:
        errors.append("credential id must be a nonempty string")
    if not _aware(credential.issuance_date):
        errors.append("issuanceDate must be a UTC timestamp")
    if isinstance(credential, FirmwareCredential):
        info = credential.firmware_info
        if tuple(credential.type_tags) != FIRMWARE_TYPES:
            errors.append(f"type must be {list(FIRMWARE_TYPES)}")
        if credential.issuer != credential.manufacturer:
            errors.append("issuer must equal credentialSubject.manufacturer")
        if not isinstance(info.binary_hash, bytes) or len(info.binary_hash) != 32:
            errors.append("binaryHash must be a 32-byte SHA-256 digest")
        if info.update_type not in UPDATE_TYPES:
            errors.append(f"firmware type must be one of {UPDATE_TYPES}")
        try:
            version_key(info.version)
        except ValueError as exc:
            errors.append(str(exc))
        if not credential.supporting_models:
            errors.append("supportingModels must list at least one model")
        if not _aware(credential.released_date):
            errors.append("releasedDate must be a UTC timestamp")
    elif isinstance(credential, InverterCredential):
        if tuple(credential.type_tags) != INVERTER_TYPES:
            errors.append(f"type must be {list(INVERTER_TYPES)}")
        errors.extend(history_errors(credential.firmware_history, credential.reset_history))
        upd = credential.updatable
        if credential.firmware_history and upd.software_version != credential.firmware_history[0][0]:
            errors.append("softwareVersion must equal the newest firmwareHistory entry")
        if upd.status not in INVERTER_STATUSES:
            errors.append(f"status must be one of {INVERTER_STATUSES}")
        if not isinstance(upd.timely_updated, bool) or not isinstance(upd.missing_updates, bool):
            errors.append("timelyUpdated and missingUpdates must be booleans")
        for name, value in credential.immutable.capabilities:
            if not isinstance(name, str) or not isinstance(value, (str, int, float, bool)):
                errors.append(f"capability {name!r} must map a name to a scalar")
        if not _aware(credential.immutable.manufactured_date):
            errors.append("manufacturedDate must be a UTC timestamp")
    else:
        errors.append(f"not a credential: {type(credential).__name__}")
    return errors


def history_errors(history, resets) -> list[str]:
    errors = []
    if not history:
        errors.append("firmwareHistory must not be empty")
    seen = set()
    for i, (version, ts) in enumerate(history):
        if version in seen:
            errors.append(f"version {version} appears twice in firmwareHistory")
        seen.add(version)
        if not _aware(ts):
            errors.append(f"install time of {version} must be a UTC timestamp")
        elif i and _aware(history[i - 1][1]) and not history[i - 1][1] > ts:
            errors.append("firmwareHistory must be strictly newest-first")
    for i, ts in enumerate(resets):
        if not _aware(ts):
            errors.append("resetHistory entries must be UTC timestamps")
        elif i and _aware(resets[i - 1]) and not resets[i - 1] > ts:
            errors.append("resetHistory must be strictly newest-first")
    return errors


# -- issuance --------------------------------------------------------------


def _new_id(prefix: str, rng: Optional[random.Random]) -> str:
    return f"urn:vc:{prefix}:{crypto.random_bytes(16, rng).hex()}"


def _now() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def sign_credential(credential: Credential, issuer_kp: crypto.KeyPair) -> Credential:
    sig = crypto.sign(signing_input(credential, issuer_kp.key_id), issuer_kp)
    return dataclasses.replace(credential, proof=sig)


def issue_firmware_credential(
    issuer_kp: crypto.KeyPair,
    issuer: DidLike,
    *,
    version: Optional[str],
    binary_hash: Union[bytes, crypto.Digest, None],
    update_type: Optional[str],
    supporting_models,
    released_date: datetime,
    link: Optional[str] = None,
    cves=(),
    credential_id: Optional[str] = None,
    issuance_date: Optional[datetime] = None,
    rng: Optional[random.Random] = None,
) -> FirmwareCredential:
    """Build and sign a firmware release credential.

    Raises ``CredentialSchemaError`` when the metadata is incomplete
    (e.g. no binary hash or no supported model).
    """
    if isinstance(binary_hash, crypto.Digest):
        binary_hash = binary_hash.bytes
    missing = [
        name
        for name, value in (("version", version), ("binary_hash", binary_hash), ("update_type", update_type))
        if value is None
    ]
    if missing:
        raise CredentialSchemaError(f"incomplete firmware metadata: missing {', '.join(missing)}")
    did = Did.parse(issuer)
    vc = FirmwareCredential(
        id=credential_id or _new_id("firmware", rng),
        issuer=did,
        issuance_date=issuance_date or _now(),
        manufacturer=did,
        released_date=released_date,
        link=link,
        firmware_info=FirmwareInfo(version, bytes(binary_hash), update_type),
        associated_cves=tuple(cves),
        supporting_models=tuple(supporting_models),
    )
    errors = schema_errors(vc)
    if errors:
        raise CredentialSchemaError("; ".join(errors))
    return sign_credential(vc, issuer_kp)


def extend_history(
    previous: Optional[InverterCredential],
    installed: Optional[tuple[str, datetime]],
    reset_at: Optional[datetime] = None,
) -> tuple[tuple[tuple[str, datetime], ...], tuple[datetime, ...]]:
    """Return the (firmware_history, reset_history) following ``previous``.

    A version already in the history may only reappear if a factory reset
    happened after its recorded install; the entry then moves to the head
    with its new install time. ``installed=None`` keeps both histories as
    they are (re-issuance for an ownership or status change).
    """
    if installed is None:
        if previous is None or reset_at is not None:
            raise HistoryError("re-issuance without an install needs a previous credential and no reset")
        return previous.firmware_history, previous.reset_history
    version, ts = installed
    if previous is None:
        return ((version, ts),), ((reset_at,) if reset_at else ())
    history = previous.firmware_history
    resets = previous.reset_history
    if not ts > history[0][1]:
        raise HistoryError(f"install time {format_ts(ts)} is not after the newest entry {format_ts(history[0][1])}")
    if reset_at is not None:
        if resets and not reset_at > resets[0]:
            raise HistoryError("reset time is not after the latest recorded reset")
        if reset_at > ts:
            raise HistoryError("reset time is after the install it precedes")
        resets = (reset_at,) + resets
    existing = dict(history)
    if version in existing:
        if not (resets and resets[0] > existing[version]):
            raise HistoryError(f"version {version} is already in firmwareHistory")
        history = tuple(e for e in history if e[0] != version)
    return ((version, ts),) + history, resets


def issue_inverter_credential(
    issuer_kp: crypto.KeyPair,
    issuer: DidLike,
    identity: InverterIdentity,
    *,
    owner: DidLike,
    installed: Optional[tuple[str, datetime]],
    previous: Optional[InverterCredential] = None,
    reset_at: Optional[datetime] = None,
    status: str = "active",
    timely_updated: bool = True,
    missing_updates: bool = False,
    credential_id: Optional[str] = None,
    issuance_date: Optional[datetime] = None,
    rng: Optional[random.Random] = None,
) -> InverterCredential:
    """Build and sign an inverter credential.

    With ``previous``, the new firmware history is the previous one with
    ``installed`` prepended. Revoking ``previous`` is left to the caller.
    """
    if previous is not None and previous.immutable != identity:
        raise CredentialError("identity differs from the previous credential")
    history, resets = extend_history(previous, installed, reset_at)
    vc = InverterCredential(
        id=credential_id or _new_id("inverter", rng),
        issuer=Did.parse(issuer),
        issuance_date=issuance_date or _now(),
        immutable=identity,
        updatable=InverterStatus(Did.parse(owner), status, history[0][0], timely_updated, missing_updates),
        firmware_history=history,
        reset_history=resets,
    )
    errors = schema_errors(vc)
    if errors:
        raise CredentialSchemaError("; ".join(errors))
    return sign_credential(vc, issuer_kp)


# -- verification ----------------------------------------------------------


class Status(str, enum.Enum):
    VALID = "Valid"
    BAD_SIGNATURE = "BadSignature"
    REVOKED = "Revoked"
    UNKNOWN_ISSUER = "UnknownIssuer"
    SCHEMA_VIOLATION = "SchemaViolation"


@dataclass(frozen=True)
class VerificationResult:
    status: Status
    detail: str = ""

    @property
    def valid(self) -> bool:
        return self.status is Status.VALID


def verify_credential(credential: Credential, registry: Registry) -> VerificationResult:
    """Check schema, issuer resolution, proof and revocation, in that order."""
    try:
        errors = schema_errors(credential)
    except (AttributeError, TypeError, ValueError) as exc:
        errors = [f"malformed credential: {exc}"]
    if errors:
        return VerificationResult(Status.SCHEMA_VIOLATION, "; ".join(errors))
    try:
        doc = registry.resolve(credential.issuer)
    except UnknownDid:
        return VerificationResult(Status.UNKNOWN_ISSUER, f"issuer {credential.issuer} not in registry")
    proof = credential.proof
    if proof is None:
        return VerificationResult(Status.BAD_SIGNATURE, "credential carries no proof")
    try:
        message = signing_input(credential, proof.key_id)
    except (AttributeError, TypeError, ValueError) as exc:
        return VerificationResult(Status.SCHEMA_VIOLATION, f"cannot serialise: {exc}")
    if not doc.verify(message, proof, ASSERTION):
        return VerificationResult(Status.BAD_SIGNATURE, f"proof does not verify under {doc.id}#{proof.key_id}")
    if registry.is_revoked(credential.issuer, credential.id):
        return VerificationResult(Status.REVOKED, f"{credential.id} revoked by {credential.issuer}")
    return VerificationResult(Status.VALID)
