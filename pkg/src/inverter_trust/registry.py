"""In-process verifiable data registry for DIDs, DID documents and revocations.

Stands in for the consortium chain: it only has to give authenticated,
always-available resolution. Documents change only through
``update_document`` signed by the controller (or by the document's own
authentication key when no controller is set).
"""

from __future__ import annotations

import dataclasses
import json
import random
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

from . import crypto
from .codec import canonical_json

AUTHENTICATION = "authentication"
ASSERTION = "assertion"
KEY_AGREEMENT = "keyAgreement"
PURPOSES = (AUTHENTICATION, ASSERTION, KEY_AGREEMENT)
ENDPOINT_TYPES = ("UpdateServer", "VCIssuance", "UpdateList")

_DID_RE = re.compile(r"^did:([a-z0-9]+):([A-Za-z0-9._%-]+(?::[A-Za-z0-9._%-]+)*)$")


class RegistryError(Exception):
    pass


class DuplicateDid(RegistryError):
    pass


class UnknownDid(RegistryError):
    pass


class Unauthorized(RegistryError):
    pass


class StaleVersion(RegistryError):
    pass


class InvalidDocument(RegistryError):
    pass


@dataclass(frozen=True, order=True)
class Did:
    method: str
    method_specific_id: str

    def __post_init__(self) -> None:
        if not _DID_RE.match(f"did:{self.method}:{self.method_specific_id}"):
            raise ValueError(f"malformed DID: did:{self.method}:{self.method_specific_id}")

    @property
    def rendered(self) -> str:
        return f"did:{self.method}:{self.method_specific_id}"

    def __str__(self) -> str:
        return self.rendered

    @classmethod
    def parse(cls, text: Union[str, "Did"]) -> "Did":
        if isinstance(text, Did):
            return text
        m = _DID_RE.match(text) if isinstance(text, str) else None
        if not m:
            raise ValueError(f"malformed DID: {text!r}")
        return cls(m.group(1), m.group(2))


DidLike = Union[Did, str]


@dataclass(frozen=True)
class VerificationMethod:
    key_id: str
    public_key: bytes
    purposes: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"id": self.key_id, "publicKeyHex": self.public_key.hex(), "purposes": list(self.purposes)}

    @classmethod
    def from_dict(cls, d: dict) -> "VerificationMethod":
        return cls(d["id"], bytes.fromhex(d["publicKeyHex"]), tuple(d["purposes"]))


@dataclass(frozen=True)
class ServiceEndpoint:
    type: str
    uri: str

    def to_dict(self) -> dict:
        return {"type": self.type, "serviceEndpoint": self.uri}

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceEndpoint":
        return cls(d["type"], d["serviceEndpoint"])


@dataclass(frozen=True)
class DIDDocument:
    id: Did
    verification_keys: tuple[VerificationMethod, ...]
    controller: Optional[Did] = None
    service_endpoints: tuple[ServiceEndpoint, ...] = ()
    version: int = 1

    def keys_for(self, purpose: str) -> list[VerificationMethod]:
        return [k for k in self.verification_keys if purpose in k.purposes]

    def key(self, key_id: str, purpose: Optional[str] = None) -> Optional[VerificationMethod]:
        for k in self.verification_keys:
            if k.key_id == key_id and (purpose is None or purpose in k.purposes):
                return k
        return None

    def endpoint(self, type_: str) -> Optional[str]:
        for e in self.service_endpoints:
            if e.type == type_:
                return e.uri
        return None

    def verify(self, message: bytes, sig: crypto.Signature, purpose: str) -> bool:
        vm = self.key(sig.key_id, purpose)
        return vm is not None and crypto.verify(message, sig, vm.public_key)

    def replace(self, **changes) -> "DIDDocument":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "id": str(self.id),
            "controller": str(self.controller) if self.controller else None,
            "verificationMethod": [k.to_dict() for k in self.verification_keys],
            "service": [e.to_dict() for e in self.service_endpoints],
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DIDDocument":
        return cls(
            id=Did.parse(d["id"]),
            verification_keys=tuple(VerificationMethod.from_dict(k) for k in d["verificationMethod"]),
            controller=Did.parse(d["controller"]) if d.get("controller") else None,
            service_endpoints=tuple(ServiceEndpoint.from_dict(e) for e in d["service"]),
            version=int(d["version"]),
        )

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_dict())


def build_document(
    did: Did,
    kp: crypto.KeyPair,
    endpoints: Iterable[Union[ServiceEndpoint, tuple[str, str]]] = (),
    controller: Optional[Did] = None,
) -> DIDDocument:
    """Assemble a version-1 document whose single key serves every purpose."""
    eps = tuple(e if isinstance(e, ServiceEndpoint) else ServiceEndpoint(*e) for e in endpoints)
    for e in eps:
        if e.type not in ENDPOINT_TYPES:
            raise InvalidDocument(f"unknown service endpoint type {e.type!r}")
    vm = VerificationMethod(kp.key_id, kp.verification_key, PURPOSES)
    return DIDDocument(did, (vm,), controller, eps, 1)


def update_payload(doc: DIDDocument) -> bytes:
    """Bytes an authorizer signs to install ``doc``."""
    return canonical_json({"action": "did-update", "document": doc.to_dict()})


def revocation_payload(issuer: DidLike, credential_id: str) -> bytes:
    return canonical_json({"action": "revoke", "issuer": str(issuer), "credential": credential_id})


class Registry:
    def __init__(self, rng: Optional[random.Random] = None):
        self.documents: dict[Did, DIDDocument] = {}
        self.revocation_sets: dict[Did, set[str]] = {}
        self._rng = rng or random.Random()
        self._lock = threading.RLock()

    def new_identifier(self) -> str:
        return crypto.random_bytes(16, self._rng).hex()

    def create_did(
        self,
        method: str,
        kp: crypto.KeyPair,
        endpoints: Iterable = (),
        *,
        controller: Optional[DidLike] = None,
        method_specific_id: Optional[str] = None,
    ) -> tuple[Did, DIDDocument]:
        if not method:
            raise InvalidDocument("DID method must be nonempty")
        with self._lock:
            ctrl = Did.parse(controller) if controller is not None else None
            if ctrl is not None and ctrl not in self.documents:
                raise UnknownDid(f"controller {ctrl} is not registered")
            did = Did(method, method_specific_id or self.new_identifier())
            if did in self.documents:
                raise DuplicateDid(str(did))
            doc = build_document(did, kp, endpoints, ctrl)
            self.documents[did] = doc
            return did, doc

    def resolve(self, did: DidLike) -> DIDDocument:
        try:
            key = Did.parse(did)
        except ValueError:
            raise UnknownDid(str(did)) from None
        doc = self.documents.get(key)
        if doc is None:
            raise UnknownDid(str(did))
        return doc

    def try_resolve(self, did: DidLike) -> Optional[DIDDocument]:
        try:
            return self.resolve(did)
        except UnknownDid:
            return None

    def update_document(self, did: DidLike, new_doc: DIDDocument, authorizer_sig: crypto.Signature) -> DIDDocument:
        with self._lock:
            current = self.resolve(did)
            if new_doc.id != current.id:
                raise InvalidDocument("document id cannot change")
            if new_doc.version != current.version + 1:
                raise StaleVersion(f"expected version {current.version + 1}, got {new_doc.version}")
            authority = self.resolve(current.controller) if current.controller else current
            if not authority.verify(update_payload(new_doc), authorizer_sig, AUTHENTICATION):
                raise Unauthorized(f"update of {current.id} not signed by {authority.id}")
            if not new_doc.keys_for(AUTHENTICATION):
                raise InvalidDocument("document must keep at least one authentication key")
            if new_doc.controller is not None and new_doc.controller not in self.documents:
                raise UnknownDid(f"controller {new_doc.controller} is not registered")
            self.documents[current.id] = new_doc
            return new_doc

    def revoke_credential(self, issuer: DidLike, credential_id: str, issuer_sig: crypto.Signature) -> None:
        with self._lock:
            doc = self.resolve(issuer)
            if not doc.verify(revocation_payload(doc.id, credential_id), issuer_sig, ASSERTION):
                raise Unauthorized(f"revocation of {credential_id} not signed by {doc.id}")
            self.revocation_sets.setdefault(doc.id, set()).add(credential_id)

    def is_revoked(self, issuer: DidLike, credential_id: str) -> bool:
        try:
            key = Did.parse(issuer)
        except ValueError:
            return False
        return credential_id in self.revocation_sets.get(key, ())

    # persistence

    def to_json(self) -> dict:
        with self._lock:
            return {
                "documents": [self.documents[d].to_dict() for d in sorted(self.documents)],
                "revocations": [
                    {"issuer": str(i), "credentials": sorted(ids)}
                    for i, ids in sorted(self.revocation_sets.items())
                ],
            }

    @classmethod
    def from_json(cls, data: dict, rng: Optional[random.Random] = None) -> "Registry":
        reg = cls(rng)
        for d in data["documents"]:
            doc = DIDDocument.from_dict(d)
            reg.documents[doc.id] = doc
        for r in data["revocations"]:
            reg.revocation_sets[Did.parse(r["issuer"])] = set(r["credentials"])
        return reg

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path], rng: Optional[random.Random] = None) -> "Registry":
        return cls.from_json(json.loads(Path(path).read_text()), rng)
