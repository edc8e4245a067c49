"""Protocol participants: manufacturer, update server, smart inverter, owner, VPP operator.

Each actor is a sequential state machine. All inter-actor traffic goes
through a ``Network`` so it is captured; anything carrying a wallet
credential travels signed and then encrypted for its recipient.
"""

from __future__ import annotations

import enum
import hmac
import json
import random
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Optional

from . import credentials as vc
from . import crypto
from .codec import b64url_decode, b64url_encode, canonical_json, format_ts, parse_ts
from .ledger import ContractHandle, UpdateEvent, UpdateLedger, UpdateRequest, deploy_payload
from .network import Network
from .registry import (
    AUTHENTICATION,
    KEY_AGREEMENT,
    DIDDocument,
    Did,
    DidLike,
    Registry,
    revocation_payload,
    update_payload,
)
from .trust import (
    AvailableUpdate,
    EnrollmentDecision,
    TrustPolicy,
    assess_history,
    evaluate_enrollment,
    presentation_payload,
    Presentation,
    TrustState,
)

Clock = Callable[[], datetime]
FETCH_ATTEMPTS = 3


class ProtocolError(Exception):
    pass


class DuplicateSerial(ProtocolError):
    pass


class NoPendingProof(ProtocolError):
    pass


class Reason(str, enum.Enum):
    DECRYPT_FAILED = "DecryptFailed"
    MALFORMED = "MalformedRequest"
    BAD_OWNER_SIGNATURE = "BadOwnerSignature"
    REPLAYED_REQUEST = "ReplayedRequest"
    NOT_OWNER = "NotOwner"
    STALE_CREDENTIAL = "StaleCredential"
    PROOF_REUSED = "ProofReused"
    INVALID_PROOF = "InvalidProof"


class IssuanceRejected(ProtocolError):
    def __init__(self, reason: Reason, detail: str = ""):
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.detail = detail


class ResponseRejected(ProtocolError):
    """Raised by owner or inverter when a VC response/upload fails its checks."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class InstallOutcome(str, enum.Enum):
    INSTALLED = "Installed"
    DEFERRED = "Deferred"
    IGNORED_MODEL = "IgnoredModel"
    IGNORED_VERSION = "IgnoredVersion"
    HASH_MISMATCH = "HashMismatch"
    BAD_ISSUER = "BadIssuer"
    FETCH_FAILED = "FetchFailed"


@dataclass(frozen=True)
class FirmwareImage:
    model_list: tuple[str, ...]
    version: str
    binary: bytes = field(repr=False)

    @property
    def binary_digest(self) -> crypto.Digest:
        return crypto.sha256(self.binary)


INSTALL = "install"
RESET = "reset"


def proof_mac(device_secret: bytes, kind: str, version: str, binary_digest: bytes, timestamp: datetime) -> bytes:
    """HMAC-SHA256 over kind, version, binary digest and timestamp, NUL-separated."""
    msg = b"\x00".join([kind.encode(), version.encode(), binary_digest, format_ts(timestamp).encode()])
    return hmac.new(device_secret, msg, "sha256").digest()


@dataclass(frozen=True)
class ProofValue:
    kind: str
    version: str
    timestamp: datetime
    mac: bytes

    def to_json(self) -> dict:
        return {"kind": self.kind, "version": self.version, "timestamp": format_ts(self.timestamp), "mac": self.mac.hex()}

    @classmethod
    def from_json(cls, d: dict) -> "ProofValue":
        return cls(d["kind"], d["version"], parse_ts(d["timestamp"]), bytes.fromhex(d["mac"]))


def _sig_json(sig: crypto.Signature) -> dict:
    return {"keyId": sig.key_id, "value": b64url_encode(sig.bytes)}


def _sig_from(d: dict) -> crypto.Signature:
    return crypto.Signature(b64url_decode(d["value"]), d["keyId"])


def seal(msg: dict, signer: crypto.KeyPair, recipient_vk: bytes, rng: Optional[random.Random]) -> bytes:
    """Sign ``msg`` then encrypt message and signature for the recipient."""
    body = canonical_json({"msg": msg, "sig": _sig_json(crypto.sign(canonical_json(msg), signer))})
    return crypto.encrypt_for(recipient_vk, body, rng).to_bytes()


def unseal(envelope: bytes, key: crypto.KeyPair) -> tuple[dict, crypto.Signature]:
    plain = crypto.decrypt(crypto.Envelope.from_bytes(envelope), key)
    body = json.loads(plain)
    return body["msg"], _sig_from(body["sig"])


def agreement_key(doc: DIDDocument) -> bytes:
    keys = doc.keys_for(KEY_AGREEMENT)
    if not keys:
        raise ProtocolError(f"{doc.id} publishes no key-agreement key")
    return keys[0].public_key


@dataclass
class Wallet:
    keys: dict[str, crypto.KeyPair] = field(default_factory=dict, repr=False)
    credentials: dict[str, vc.Credential] = field(default_factory=dict)
    owner_did: Optional[Did] = None

    def store(self, credential: vc.Credential) -> None:
        if isinstance(credential, vc.InverterCredential):
            for old in self.inverter_credentials():
                del self.credentials[old.id]
        self.credentials[credential.id] = credential

    def inverter_credentials(self) -> list[vc.InverterCredential]:
        return [c for c in self.credentials.values() if isinstance(c, vc.InverterCredential)]

    def firmware_credentials(self) -> list[vc.FirmwareCredential]:
        return [c for c in self.credentials.values() if isinstance(c, vc.FirmwareCredential)]

    @property
    def current(self) -> Optional[vc.InverterCredential]:
        creds = self.inverter_credentials()
        return creds[0] if creds else None


# -- update server ----------------------------------------------------------


class UpdateServer:
    def __init__(self, name: str, uri: Optional[str] = None):
        self.name = name
        self.uri = uri or f"sim://{name}"
        self.binaries: dict[str, bytes] = {}
        # adversary hook: rewrite a binary before serving it
        self.tamper: Optional[Callable[[bytes], bytes]] = None

    def attach(self, network: Network) -> None:
        network.serve(self.uri, self.name, self.handle)

    def store(self, image: FirmwareImage) -> str:
        link = f"{self.uri}/{image.version}.bin"
        self.binaries[link] = image.binary
        return link

    def handle(self, sender: str, uri: str, payload: bytes) -> Optional[bytes]:
        binary = self.binaries.get(uri)
        if binary is None:
            return None
        return self.tamper(binary) if self.tamper else binary


# -- manufacturer ---------------------------------------------------------


@dataclass
class IssuanceRecord:
    inverter: Did
    owner: Did
    request_nonce: int
    nonce_echo: int
    old_vc: str
    new_vc: str
    request_msg: bytes
    owner_sig: crypto.Signature


class Manufacturer:
    def __init__(
        self,
        name: str,
        registry: Registry,
        ledger: UpdateLedger,
        server: UpdateServer,
        network: Network,
        now: Clock,
        rng: Optional[random.Random] = None,
        policy: Optional[TrustPolicy] = None,
    ):
        self.name = name
        self.registry = registry
        self.ledger = ledger
        self.server = server
        self.network = network
        self.now = now
        self.rng = rng or random.Random()
        self.nonces = crypto.NonceSource(self.rng.getrandbits(64))
        self.policy = policy or TrustPolicy()
        self.kp = crypto.keypair_from_rng(self.rng)
        self.vc_uri = f"sim://{name}/vc"
        self.update_list_uri = f"sim://{name}/updates"
        self.did, _ = registry.create_did(
            "sim",
            self.kp,
            [("UpdateServer", server.uri), ("VCIssuance", self.vc_uri), ("UpdateList", self.update_list_uri)],
        )
        nonce = self.nonces.next()
        self.contract: ContractHandle = ledger.deploy_contract(
            self.did, crypto.sign(deploy_payload(self.did, nonce), self.kp), nonce=nonce, timestamp=now()
        )
        self.device_secrets: dict[Did, bytes] = {}
        self.factory_images: dict[str, FirmwareImage] = {}
        self.published: dict[str, tuple[vc.FirmwareCredential, crypto.Digest]] = {}
        self.latest_vc: dict[Did, str] = {}
        self.serials: set[str] = set()
        self.consumed_proofs: set[bytes] = set()
        self.seen_requests: set[tuple[Did, int]] = set()
        self.issued: list[IssuanceRecord] = []
        network.serve(self.vc_uri, name, self._serve_vc)
        network.serve(self.update_list_uri, name, self._serve_update_list)

    # inverter lifecycle

    def factory_image(self, model: str, version: str = "v1.0") -> FirmwareImage:
        image = self.factory_images.get(model)
        if image is None:
            binary = f"FACTORY|{model}|{version}|".encode() + crypto.random_bytes(64, self.rng)
            image = FirmwareImage((model,), version, binary)
            self.factory_images[model] = image
        return image

    def manufacture_inverter(
        self,
        name: str,
        model: str,
        serial: str,
        *,
        factory_version: str = "v1.0",
        capabilities: tuple = (),
        auto_install: bool = True,
    ) -> "SmartInverter":
        if serial in self.serials:
            raise DuplicateSerial(serial)
        self.serials.add(serial)
        image = self.factory_image(model, factory_version)
        kp = crypto.keypair_from_rng(self.rng)
        did, _ = self.registry.create_did("sim", kp, controller=self.did)
        secret = crypto.random_bytes(32, self.rng)
        self.device_secrets[did] = secret
        made_at = self.now()
        inverter = SmartInverter(
            name=name,
            did=did,
            kp=kp,
            model=model,
            manufacturer_did=self.did,
            factory_image=image,
            device_secret=secret,
            registry=self.registry,
            network=self.network,
            now=self.now,
            auto_install=auto_install,
        )
        inverter.install_log.append((image.version, made_at))
        inverter.subscription = self.ledger.subscribe(self.contract, str(did), len(self.ledger.log(self.contract)))
        identity = vc.InverterIdentity(did, serial, made_at, model, tuple(capabilities))
        first = self._issue(identity, owner=self.did, installed=(image.version, made_at), previous=None)
        inverter.wallet.store(first)
        return inverter

    def transfer_ownership(self, inverter: "SmartInverter", owner: DidLike) -> DIDDocument:
        """Hand the inverter DID to ``owner`` and re-issue its credential naming the new owner."""
        owner_did = Did.parse(owner)
        self.registry.resolve(owner_did)
        current = self.registry.resolve(inverter.did)
        new_doc = current.replace(controller=owner_did, version=current.version + 1)
        doc = self.registry.update_document(inverter.did, new_doc, crypto.sign(update_payload(new_doc), self.kp))
        previous = inverter.wallet.current
        if previous is not None:
            renewed = self._issue(previous.immutable, owner=owner_did, installed=None, previous=previous)
            self._revoke(previous.id)
            inverter.accept_credential(renewed)
        inverter.wallet.owner_did = owner_did
        return doc

    # publishing

    def publish_firmware(
        self,
        image: FirmwareImage,
        update_type: str,
        cves=(),
        *,
        with_link: bool = True,
    ) -> tuple[vc.FirmwareCredential, UpdateEvent]:
        link = self.server.store(image)
        at = self.now()
        fw_vc = vc.issue_firmware_credential(
            self.kp,
            self.did,
            version=image.version,
            binary_hash=image.binary_digest,
            update_type=update_type,
            supporting_models=image.model_list,
            released_date=at,
            link=link if with_link else None,
            cves=cves,
            issuance_date=at,
            rng=self.rng,
        )
        request = UpdateRequest(fw_vc, self.did, self.nonces.next())
        event = self.ledger.save_update(self.contract, request, crypto.sign(request.to_bytes(), self.kp), timestamp=at)
        self.published[image.version] = (fw_vc, image.binary_digest)
        return fw_vc, event

    def published_updates(self, model: str) -> list[AvailableUpdate]:
        now = self.now()
        return [u for u in self.ledger.get_updates_for_model(self.contract, model) if u.published <= now]

    # credential issuance

    def _issue(self, identity, *, owner, installed, previous, reset_at=None) -> vc.InverterCredential:
        history, resets = vc.extend_history(previous, installed, reset_at)
        all_updates, timely = assess_history(history, resets, self.published_updates(identity.model), self.policy)
        new_vc = vc.issue_inverter_credential(
            self.kp,
            self.did,
            identity,
            owner=owner,
            installed=installed,
            previous=previous,
            reset_at=reset_at,
            timely_updated=timely,
            missing_updates=not all_updates,
            issuance_date=self.now(),
            rng=self.rng,
        )
        self.latest_vc[identity.inverter_id] = new_vc.id
        return new_vc

    def _revoke(self, credential_id: str) -> None:
        sig = crypto.sign(revocation_payload(self.did, credential_id), self.kp)
        self.registry.revoke_credential(self.did, credential_id, sig)

    def _check_proof(self, proof: ProofValue, current: vc.InverterCredential, requested_at: datetime) -> None:
        inverter = current.immutable.inverter_id
        model = current.immutable.model
        head_version, head_ts = current.firmware_history[0]
        if proof.kind == INSTALL:
            entry = self.published.get(proof.version)
            if entry is None or model not in entry[0].supporting_models:
                raise IssuanceRejected(Reason.INVALID_PROOF, f"{proof.version} is not a published update for {model}")
            if not vc.is_newer(proof.version, head_version):
                raise IssuanceRejected(Reason.INVALID_PROOF, f"{proof.version} is not newer than {head_version}")
            if proof.timestamp < entry[0].released_date:
                raise IssuanceRejected(Reason.INVALID_PROOF, "install predates the release")
            digest = entry[1].bytes
        elif proof.kind == RESET:
            image = self.factory_images.get(model)
            if image is None or proof.version != image.version:
                raise IssuanceRejected(Reason.INVALID_PROOF, "reset proof does not name the factory firmware")
            if current.reset_history and not proof.timestamp > current.reset_history[0]:
                raise IssuanceRejected(Reason.INVALID_PROOF, "reset is not after the latest recorded reset")
            digest = image.binary_digest.bytes
        else:
            raise IssuanceRejected(Reason.INVALID_PROOF, f"unknown proof kind {proof.kind!r}")
        if not head_ts < proof.timestamp <= requested_at <= self.now():
            raise IssuanceRejected(Reason.INVALID_PROOF, "proof timestamp out of order")
        expected = proof_mac(self.device_secrets[inverter], proof.kind, proof.version, digest, proof.timestamp)
        if not hmac.compare_digest(expected, proof.mac):
            raise IssuanceRejected(Reason.INVALID_PROOF, "proof value does not verify")

    def handle_vc_request(self, envelope: bytes) -> bytes:
        """Validate an encrypted renewal request and return the encrypted response.

        Raises ``IssuanceRejected`` naming the first failed check.
        """
        try:
            msg, owner_sig = unseal(envelope, self.kp)
        except (crypto.DecryptionError, ValueError, KeyError, TypeError):
            raise IssuanceRejected(Reason.DECRYPT_FAILED) from None
        try:
            inverter = Did.parse(msg["inverter"])
            owner = Did.parse(msg["owner"])
            proof = ProofValue.from_json(msg["proof"])
            current = vc.decode(msg["currentVc"].encode("ascii"))
            requested_at = parse_ts(msg["requestedAt"])
            nonce = crypto.Nonce(int(msg["nonce"]))
        except (KeyError, TypeError, ValueError, vc.CredentialError) as exc:
            raise IssuanceRejected(Reason.MALFORMED, str(exc)) from None
        owner_doc = self.registry.try_resolve(owner)
        signed = canonical_json(msg)
        if owner_doc is None or not owner_doc.verify(signed, owner_sig, AUTHENTICATION):
            raise IssuanceRejected(Reason.BAD_OWNER_SIGNATURE)
        if (owner, nonce.value) in self.seen_requests:
            raise IssuanceRejected(Reason.REPLAYED_REQUEST)
        self.seen_requests.add((owner, nonce.value))
        inverter_doc = self.registry.try_resolve(inverter)
        if inverter_doc is None or inverter_doc.controller != owner:
            raise IssuanceRejected(Reason.NOT_OWNER, f"{owner} does not control {inverter}")
        if not isinstance(current, vc.InverterCredential) or current.immutable.inverter_id != inverter:
            raise IssuanceRejected(Reason.STALE_CREDENTIAL, "current credential is not for this inverter")
        status = vc.verify_credential(current, self.registry)
        if not status.valid or current.issuer != self.did or self.latest_vc.get(inverter) != current.id:
            raise IssuanceRejected(Reason.STALE_CREDENTIAL, status.detail or "not the latest issued credential")
        if proof.mac in self.consumed_proofs:
            raise IssuanceRejected(Reason.PROOF_REUSED)
        self._check_proof(proof, current, requested_at)

        reset_at = proof.timestamp if proof.kind == RESET else None
        try:
            new_vc = self._issue(
                current.immutable, owner=owner, installed=(proof.version, proof.timestamp), previous=current, reset_at=reset_at
            )
        except vc.CredentialError as exc:
            raise IssuanceRejected(Reason.INVALID_PROOF, str(exc)) from None
        self.consumed_proofs.add(proof.mac)
        self._revoke(current.id)
        echo = nonce.successor()
        self.issued.append(IssuanceRecord(inverter, owner, nonce.value, echo.value, current.id, new_vc.id, signed, owner_sig))
        response = {"vc": vc.compact_encoding(new_vc).decode("ascii"), "inverter": str(inverter), "nonceEcho": str(echo.value)}
        return seal(response, self.kp, agreement_key(owner_doc), self.rng)

    def _serve_vc(self, sender: str, uri: str, payload: bytes) -> bytes:
        try:
            return canonical_json({"ok": b64url_encode(self.handle_vc_request(payload))})
        except IssuanceRejected as exc:
            return canonical_json({"rejected": exc.reason.value, "detail": exc.detail})

    def _serve_update_list(self, sender: str, uri: str, payload: bytes) -> bytes:
        model = payload.decode()
        return canonical_json([u.to_json() for u in self.published_updates(model)])


# -- smart inverter --------------------------------------------------------


class SmartInverter:
    def __init__(
        self,
        *,
        name: str,
        did: Did,
        kp: crypto.KeyPair,
        model: str,
        manufacturer_did: Did,
        factory_image: FirmwareImage,
        device_secret: bytes,
        registry: Registry,
        network: Network,
        now: Clock,
        auto_install: bool = True,
    ):
        self.name = name
        self.did = did
        self.model = model
        self.manufacturer_did = manufacturer_did
        self.factory_image = factory_image
        self._device_secret = device_secret
        self.registry = registry
        self.network = network
        self.now = now
        self.auto_install = auto_install
        self.wallet = Wallet(keys={kp.key_id: kp})
        self.installed_version = factory_image.version
        self.installed_digest = factory_image.binary_digest
        self.install_log: list[tuple[str, datetime]] = []
        self.reset_log: list[datetime] = []
        self.pending_updates: dict[str, vc.FirmwareCredential] = {}
        self.pending_proofs: list[ProofValue] = []
        self.subscription = None
        self.outcomes: list[tuple[str, InstallOutcome]] = []
        self.downgrade_attempts: list[str] = []
        self.fetch_backoff: list[float] = []

    def __repr__(self) -> str:
        return f"SmartInverter({self.name}, {self.did}, {self.installed_version})"

    @property
    def kp(self) -> crypto.KeyPair:
        return next(iter(self.wallet.keys.values()))

    def _record(self, version: str, outcome: InstallOutcome) -> InstallOutcome:
        self.outcomes.append((version, outcome))
        return outcome

    # update events

    def sync(self) -> list[InstallOutcome]:
        """Drain the contract subscription, handling each event in order."""
        if self.subscription is None:
            return []
        out = []
        for event in self.subscription.poll():
            self.network.transmit("ledger", self.name, "update_event", event.to_bytes())
            out.append(self.handle_update_event(event))
        return out

    def handle_update_event(self, event: UpdateEvent) -> InstallOutcome:
        fw = event.credential
        if self.model not in event.model_list or self.model not in fw.supporting_models:
            return self._record(event.version, InstallOutcome.IGNORED_MODEL)
        if not vc.is_newer(fw.version, self.installed_version):
            return self._record(event.version, InstallOutcome.IGNORED_VERSION)
        if fw.issuer != self.manufacturer_did or not vc.verify_credential(fw, self.registry).valid:
            return self._record(event.version, InstallOutcome.BAD_ISSUER)
        self.pending_updates[fw.version] = fw
        self.wallet.store(fw)
        if not self.auto_install:
            return self._record(event.version, InstallOutcome.DEFERRED)
        return self.install_update(fw)

    def apply_pending(self) -> list[InstallOutcome]:
        return [self.install_update(fw) for _, fw in sorted(self.pending_updates.items(), key=lambda kv: vc.version_key(kv[0]))]

    def _fetch(self, fw: vc.FirmwareCredential) -> Optional[bytes]:
        uri = fw.link
        if not uri:
            doc = self.registry.resolve(fw.manufacturer)
            base = doc.endpoint("UpdateServer")
            if base is None:
                return None
            uri = f"{base}/{fw.version}.bin"
        for attempt in range(FETCH_ATTEMPTS):
            binary = self.network.request(self.name, uri, "fw_request", uri.encode())
            if binary is not None:
                return binary
            if attempt + 1 < FETCH_ATTEMPTS:
                self.fetch_backoff.append(2.0**attempt)
        return None

    def install_update(self, fw: vc.FirmwareCredential, binary: Optional[bytes] = None) -> InstallOutcome:
        """Fetch (unless ``binary`` is given), hash-check, verify and install one update."""
        if not vc.is_newer(fw.version, self.installed_version):
            self.downgrade_attempts.append(fw.version)
            self.pending_updates.pop(fw.version, None)
            return self._record(fw.version, InstallOutcome.IGNORED_VERSION)
        if self.model not in fw.supporting_models:
            return self._record(fw.version, InstallOutcome.IGNORED_MODEL)
        if fw.issuer != self.manufacturer_did or not vc.verify_credential(fw, self.registry).valid:
            return self._record(fw.version, InstallOutcome.BAD_ISSUER)
        if self.install_log and not self.now() > self.install_log[-1][1]:
            # one install per instant, so every history entry gets its own time
            self.pending_updates[fw.version] = fw
            return self._record(fw.version, InstallOutcome.DEFERRED)
        if binary is None:
            binary = self._fetch(fw)
            if binary is None:
                return self._record(fw.version, InstallOutcome.FETCH_FAILED)
        received = crypto.sha256(binary)
        if not hmac.compare_digest(received.bytes, fw.firmware_info.binary_hash):
            return self._record(fw.version, InstallOutcome.HASH_MISMATCH)
        at = self.now()
        self.installed_version = fw.version
        self.installed_digest = received
        self.install_log.append((fw.version, at))
        self.pending_updates.pop(fw.version, None)
        self.wallet.store(fw)
        mac = proof_mac(self._device_secret, INSTALL, fw.version, received.bytes, at)
        self.pending_proofs.append(ProofValue(INSTALL, fw.version, at, mac))
        return self._record(fw.version, InstallOutcome.INSTALLED)

    def offline_update(self, binary: bytes, fw: vc.FirmwareCredential) -> InstallOutcome:
        return self.install_update(fw, binary)

    def factory_reset(self, timestamp: Optional[datetime] = None) -> ProofValue:
        at = timestamp or self.now()
        image = self.factory_image
        self.installed_version = image.version
        self.installed_digest = image.binary_digest
        self.install_log = [(image.version, at)]
        self.reset_log.append(at)
        self.pending_updates.clear()
        mac = proof_mac(self._device_secret, RESET, image.version, image.binary_digest.bytes, at)
        proof = ProofValue(RESET, image.version, at, mac)
        self.pending_proofs = [proof]
        return proof

    # credentials

    def accept_credential(self, credential: vc.InverterCredential) -> None:
        if credential.issuer != self.manufacturer_did:
            raise ResponseRejected("IssuerMismatch", f"{credential.issuer} is not {self.manufacturer_did}")
        if credential.immutable.inverter_id != self.did:
            raise ResponseRejected("WrongSubject")
        status = vc.verify_credential(credential, self.registry)
        if not status.valid:
            raise ResponseRejected(status.status.value, status.detail)
        self.wallet.store(credential)
        head = credential.firmware_history[0]
        self.pending_proofs = [p for p in self.pending_proofs if (p.version, p.timestamp) != head]

    def receive_vc_upload(self, envelope: bytes) -> vc.InverterCredential:
        try:
            msg, sig = unseal(envelope, self.kp)
            owner = Did.parse(msg["owner"])
            credential = vc.decode(msg["vc"].encode("ascii"))
        except (crypto.DecryptionError, ValueError, KeyError, TypeError, vc.CredentialError) as exc:
            raise ResponseRejected("MalformedUpload", str(exc)) from None
        doc = self.registry.resolve(self.did)
        owner_doc = self.registry.try_resolve(owner)
        if doc.controller != owner or owner_doc is None or not owner_doc.verify(canonical_json(msg), sig, AUTHENTICATION):
            raise ResponseRejected("UnauthorizedUpload")
        if not isinstance(credential, vc.InverterCredential):
            raise ResponseRejected("WrongCredentialType")
        self.accept_credential(credential)
        return credential

    def next_proof(self) -> ProofValue:
        if not self.pending_proofs:
            raise NoPendingProof(self.name)
        return self.pending_proofs[0]


# -- owner -----------------------------------------------------------------


class Owner:
    def __init__(self, name: str, registry: Registry, network: Network, now: Clock, rng: Optional[random.Random] = None):
        self.name = name
        self.registry = registry
        self.network = network
        self.now = now
        self.rng = rng or random.Random()
        self.nonces = crypto.NonceSource(self.rng.getrandbits(64))
        self.kp = crypto.keypair_from_rng(self.rng)
        self.did, _ = registry.create_did("sim", self.kp)
        self.outstanding: dict[int, Did] = {}
        # (request nonce, echoed nonce) for every accepted response
        self.accepted: list[tuple[int, int]] = []
        self.received_responses: list[bytes] = []
        # every inverter credential this owner has relayed, oldest first
        self.relayed: list[vc.InverterCredential] = []

    def request_new_vc(self, inverter: SmartInverter, manufacturer_did: Optional[DidLike] = None) -> bytes:
        proof = inverter.next_proof()
        current = inverter.wallet.current
        if current is None:
            raise NoPendingProof(f"{inverter.name} holds no credential")
        manufacturer = self.registry.resolve(manufacturer_did or inverter.manufacturer_did)
        nonce = self.nonces.next()
        msg = {
            "inverter": str(inverter.did),
            "owner": str(self.did),
            "proof": proof.to_json(),
            "currentVc": vc.compact_encoding(current).decode("ascii"),
            "requestedAt": format_ts(self.now()),
            "nonce": str(nonce.value),
        }
        self.outstanding[nonce.value] = inverter.did
        return seal(msg, self.kp, agreement_key(manufacturer), self.rng)

    def open_response(self, envelope: bytes, manufacturer_did: DidLike) -> vc.InverterCredential:
        """Decrypt and check a VC response; consumes the matching outstanding nonce."""
        try:
            msg, sig = unseal(envelope, self.kp)
            echo = int(msg["nonceEcho"])
            credential = vc.decode(msg["vc"].encode("ascii"))
        except (crypto.DecryptionError, ValueError, KeyError, TypeError, vc.CredentialError) as exc:
            raise ResponseRejected("MalformedResponse", str(exc)) from None
        manufacturer = self.registry.resolve(manufacturer_did)
        if not manufacturer.verify(canonical_json(msg), sig, AUTHENTICATION):
            raise ResponseRejected("BadResponseSignature")
        request_nonce = echo - 1
        if request_nonce not in self.outstanding:
            raise ResponseRejected("ReplayAlarm", "nonce echo matches no outstanding request")
        if credential.issuer != manufacturer.id:
            raise ResponseRejected("IssuerMismatch", f"{credential.issuer} is not {manufacturer.id}")
        if not isinstance(credential, vc.InverterCredential) or credential.immutable.inverter_id != self.outstanding[request_nonce]:
            raise ResponseRejected("WrongSubject")
        status = vc.verify_credential(credential, self.registry)
        if not status.valid:
            raise ResponseRejected(status.status.value, status.detail)
        del self.outstanding[request_nonce]
        self.accepted.append((request_nonce, echo))
        return credential

    def upload(self, inverter: SmartInverter, credential: vc.InverterCredential) -> vc.InverterCredential:
        msg = {"vc": vc.compact_encoding(credential).decode("ascii"), "owner": str(self.did)}
        envelope = seal(msg, self.kp, inverter.kp.verification_key, self.rng)
        delivered = self.network.transmit(self.name, inverter.name, "vc_upload", envelope)
        if delivered is None:
            raise ResponseRejected("UploadDropped")
        stored = inverter.receive_vc_upload(delivered)
        self.relayed.append(stored)
        return stored

    def install_vc(self, inverter: SmartInverter, envelope: bytes) -> vc.InverterCredential:
        credential = self.open_response(envelope, inverter.manufacturer_did)
        return self.upload(inverter, credential)

    def renew(self, inverter: SmartInverter) -> vc.InverterCredential:
        """Run one full renewal round trip for the inverter's oldest pending proof."""
        manufacturer = self.registry.resolve(inverter.manufacturer_did)
        envelope = self.request_new_vc(inverter, manufacturer.id)
        reply = self.network.request(self.name, manufacturer.endpoint("VCIssuance"), "vc_request", envelope)
        if reply is None:
            raise ResponseRejected("RequestDropped")
        body = json.loads(reply)
        if "rejected" in body:
            raise IssuanceRejected(Reason(body["rejected"]), body.get("detail", ""))
        response = b64url_decode(body["ok"])
        self.received_responses.append(response)
        return self.install_vc(inverter, response)

    def renew_all(self, inverter: SmartInverter) -> list[vc.InverterCredential]:
        out = []
        while inverter.pending_proofs:
            out.append(self.renew(inverter))
        return out

    def present(self, inverter: SmartInverter, operator: "VppOperator") -> EnrollmentDecision:
        challenge = self.network.request(self.name, operator.challenge_uri, "enroll_challenge", b"")
        if challenge is None:
            raise ProtocolError("no challenge from operator")
        current = inverter.wallet.current
        msg = {
            "credential": vc.compact_encoding(current).decode("ascii"),
            "presenter": str(self.did),
            "challenge": challenge.decode(),
        }
        envelope = seal_presentation(msg, self.kp, operator, self.rng)
        reply = self.network.request(self.name, operator.enroll_uri, "enroll", envelope)
        if reply is None:
            raise ProtocolError("enrollment dropped")
        return EnrollmentDecision.from_json(json.loads(reply))


def seal_presentation(msg: dict, signer: crypto.KeyPair, operator: "VppOperator", rng) -> bytes:
    """Encrypt a presentation whose signature covers the presentation payload."""
    signed = presentation_payload(msg["credential"].encode("ascii"), msg["presenter"], msg["challenge"])
    body = canonical_json({"msg": msg, "sig": _sig_json(crypto.sign(signed, signer))})
    return crypto.encrypt_for(operator.kp.verification_key, body, rng).to_bytes()


# -- VPP operator --------------------------------------------------------------


class VppOperator:
    def __init__(
        self,
        name: str,
        registry: Registry,
        ledger: UpdateLedger,
        network: Network,
        now: Clock,
        policy: Optional[TrustPolicy] = None,
        rng: Optional[random.Random] = None,
    ):
        self.name = name
        self.registry = registry
        self.ledger = ledger
        self.network = network
        self.now = now
        self.policy = policy or TrustPolicy()
        self.rng = rng or random.Random()
        self.kp = crypto.keypair_from_rng(self.rng)
        self.did, _ = registry.create_did("sim", self.kp)
        self.challenge_uri = f"sim://{name}/challenge"
        self.enroll_uri = f"sim://{name}/enroll"
        self.challenges: set[str] = set()
        self.decisions: dict[str, EnrollmentDecision] = {}
        self.accepted_presentations: list[Presentation] = []
        network.serve(self.challenge_uri, name, self._serve_challenge)
        network.serve(self.enroll_uri, name, self._serve_enroll)

    def updates_for(self, issuer: Did, model: str) -> list[AvailableUpdate]:
        now = self.now()
        updates = []
        for handle in self.ledger.contracts_of(issuer):
            updates.extend(u for u in self.ledger.get_updates_for_model(handle, model) if u.published <= now)
        return sorted(updates, key=lambda u: u.published)

    def issue_challenge(self) -> str:
        c = crypto.random_bytes(16, self.rng).hex()
        self.challenges.add(c)
        return c

    def evaluate(self, presentation: Presentation) -> EnrollmentDecision:
        if presentation.challenge not in self.challenges:
            return EnrollmentDecision(False, _distrust(), ("StaleChallenge",))
        self.challenges.discard(presentation.challenge)
        decision = evaluate_enrollment(
            presentation,
            self.registry,
            lambda model: self.updates_for(presentation.vc.issuer, model),
            self.policy,
            now=self.now(),
        )
        self.decisions[str(presentation.vc.immutable.inverter_id)] = decision
        if decision.accepted:
            self.accepted_presentations.append(presentation)
        return decision

    def open_presentation(self, envelope: bytes) -> Presentation:
        body = json.loads(crypto.decrypt(crypto.Envelope.from_bytes(envelope), self.kp))
        msg = body["msg"]
        credential = vc.decode(msg["credential"].encode("ascii"))
        return Presentation(credential, msg["presenter"], _sig_from(body["sig"]), msg["challenge"])

    def _serve_challenge(self, sender: str, uri: str, payload: bytes) -> bytes:
        return self.issue_challenge().encode()

    def _serve_enroll(self, sender: str, uri: str, payload: bytes) -> bytes:
        try:
            presentation = self.open_presentation(payload)
        except (crypto.DecryptionError, ValueError, KeyError, TypeError, vc.CredentialError) as exc:
            decision = EnrollmentDecision(False, _distrust(), (f"MalformedPresentation: {exc}",))
        else:
            if not isinstance(presentation.vc, vc.InverterCredential):
                decision = EnrollmentDecision(False, _distrust(), ("SchemaViolation",))
            else:
                decision = self.evaluate(presentation)
        return canonical_json(decision.to_json())


def _distrust() -> TrustState:
    return TrustState.DISTRUST
