"""Emulated ManufacturerUpdate contract.

One contract per deployment. Only the manufacturer fixed at deployment may
append firmware credentials; every append emits an ``UpdateEvent`` that is
queued to each subscriber. The log is append-only.
"""

from __future__ import annotations

import json
import random
import threading
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Optional, Union

from . import credentials as vc
from . import crypto
from .codec import b64url_decode, b64url_encode, canonical_json, format_ts, parse_ts
from .registry import AUTHENTICATION, Did, DidLike, Registry, UnknownDid
from .trust import AvailableUpdate

ONLY_MANUFACTURER = "Only manufacturer can push updates"


class LedgerError(Exception):
    reason = "LedgerError"


class NotManufacturer(LedgerError):
    reason = "NotManufacturer"

    def __init__(self, message: str = ONLY_MANUFACTURER):
        super().__init__(message)


class BadSignature(LedgerError):
    reason = "BadSignature"


class InvalidCredential(LedgerError):
    reason = "InvalidCredential"


class ReplayedNonce(LedgerError):
    reason = "ReplayedNonce"


class UnknownContract(LedgerError):
    reason = "UnknownContract"


@dataclass(frozen=True)
class DeployRecord:
    deployer: Did
    timestamp: datetime
    signature: crypto.Signature
    nonce: int = 0


@dataclass(frozen=True)
class ContractHandle:
    contract_id: str
    manufacturer: Did
    deploy_record: DeployRecord


@dataclass(frozen=True)
class UpdateRequest:
    vc: vc.FirmwareCredential
    sender: Did
    nonce: crypto.Nonce

    def to_bytes(self) -> bytes:
        return canonical_json(
            {
                "credential": vc.compact_encoding(self.vc).decode("ascii"),
                "sender": str(self.sender),
                "nonce": str(self.nonce.value),
            }
        )


@dataclass(frozen=True)
class UpdateEvent:
    from_did: Did
    version: str
    model_list: tuple[str, ...]
    credential: vc.FirmwareCredential
    sequence_no: int
    contract_id: str = ""

    def to_bytes(self) -> bytes:
        return canonical_json(
            {
                "contract": self.contract_id,
                "seq": self.sequence_no,
                "from": str(self.from_did),
                "version": self.version,
                "models": list(self.model_list),
                "credential": vc.compact_encoding(self.credential).decode("ascii"),
            }
        )


@dataclass(frozen=True)
class LogEntry:
    event: UpdateEvent
    published_at: datetime
    sender_sig: crypto.Signature
    nonce: int = 0

    def request(self) -> UpdateRequest:
        """The signed request this entry was appended from."""
        return UpdateRequest(self.event.credential, self.event.from_did, crypto.Nonce(self.nonce))


def deploy_payload(manufacturer: DidLike, nonce: crypto.Nonce) -> bytes:
    return canonical_json({"action": "deploy", "manufacturer": str(manufacturer), "nonce": str(nonce.value)})


class Subscription:
    """Per-subscriber FIFO of events; ``poll`` drains what has arrived."""

    def __init__(self, subscriber_id: str, contract_id: str):
        self.subscriber_id = subscriber_id
        self.contract_id = contract_id
        self._queue: deque[UpdateEvent] = deque()
        self.last_sequence = 0

    def _push(self, event: UpdateEvent) -> None:
        self._queue.append(event)

    def poll(self) -> list[UpdateEvent]:
        out = []
        while self._queue:
            event = self._queue.popleft()
            self.last_sequence = event.sequence_no
            out.append(event)
        return out

    def __iter__(self) -> Iterator[UpdateEvent]:
        return iter(self.poll())

    def __len__(self) -> int:
        return len(self._queue)


class _Contract:
    def __init__(self, handle: ContractHandle):
        self.handle = handle
        self.entries: list[LogEntry] = []
        self.used_nonces: set[int] = set()
        self.subscribers: list[Subscription] = []
        self.lock = threading.Lock()


class UpdateLedger:
    def __init__(self, registry: Registry, rng: Optional[random.Random] = None):
        self.registry = registry
        self._rng = rng or random.Random()
        self._contracts: dict[str, _Contract] = {}
        self._deploy_nonces: set[tuple[Did, int]] = set()
        self._lock = threading.Lock()

    def _contract(self, handle: Union[ContractHandle, str]) -> _Contract:
        cid = handle if isinstance(handle, str) else handle.contract_id
        try:
            return self._contracts[cid]
        except KeyError:
            raise UnknownContract(cid) from None

    def deploy_contract(
        self,
        manufacturer: DidLike,
        deployer_sig: crypto.Signature,
        *,
        nonce: crypto.Nonce,
        timestamp: Optional[datetime] = None,
    ) -> ContractHandle:
        did = Did.parse(manufacturer)
        try:
            doc = self.registry.resolve(did)
        except UnknownDid:
            raise BadSignature(f"deployer {did} cannot be resolved") from None
        if not doc.verify(deploy_payload(did, nonce), deployer_sig, AUTHENTICATION):
            raise BadSignature("deployment signature does not verify")
        with self._lock:
            if (did, nonce.value) in self._deploy_nonces:
                raise ReplayedNonce("deployment nonce already used")
            self._deploy_nonces.add((did, nonce.value))
            cid = "0x" + crypto.random_bytes(20, self._rng).hex()
            record = DeployRecord(did, timestamp or datetime.now(timezone.utc), deployer_sig, nonce.value)
            handle = ContractHandle(cid, did, record)
            self._contracts[cid] = _Contract(handle)
            return handle

    def deploy_record(self, contract_id: str) -> DeployRecord:
        return self._contract(contract_id).handle.deploy_record

    def save_update(
        self,
        handle: Union[ContractHandle, str],
        request: UpdateRequest,
        sender_sig: crypto.Signature,
        *,
        timestamp: Optional[datetime] = None,
    ) -> UpdateEvent:
        contract = self._contract(handle)
        manufacturer = contract.handle.manufacturer
        if request.sender != manufacturer:
            raise NotManufacturer()
        doc = self.registry.resolve(manufacturer)
        if not doc.verify(request.to_bytes(), sender_sig, AUTHENTICATION):
            raise BadSignature("update request signature does not verify")
        check = vc.verify_credential(request.vc, self.registry)
        if not check.valid:
            raise InvalidCredential(f"{check.status.value}: {check.detail}")
        if request.vc.issuer != manufacturer:
            raise InvalidCredential("credential not issued by the contract manufacturer")
        with contract.lock:
            if request.nonce.value in contract.used_nonces:
                raise ReplayedNonce("request nonce already used on this contract")
            contract.used_nonces.add(request.nonce.value)
            event = UpdateEvent(
                from_did=manufacturer,
                version=request.vc.version,
                model_list=tuple(request.vc.supporting_models),
                credential=request.vc,
                sequence_no=len(contract.entries) + 1,
                contract_id=contract.handle.contract_id,
            )
            contract.entries.append(LogEntry(event, timestamp or datetime.now(timezone.utc), sender_sig, request.nonce.value))
            for sub in contract.subscribers:
                sub._push(event)
        return event

    def subscribe(self, handle: Union[ContractHandle, str], subscriber_id: str, from_sequence: int = 0) -> Subscription:
        if from_sequence < 0:
            raise ValueError("from_sequence must be >= 0")
        contract = self._contract(handle)
        sub = Subscription(subscriber_id, contract.handle.contract_id)
        with contract.lock:
            for entry in contract.entries[from_sequence:]:
                sub._push(entry.event)
            contract.subscribers.append(sub)
        return sub

    def log(self, handle: Union[ContractHandle, str]) -> tuple[LogEntry, ...]:
        return tuple(self._contract(handle).entries)

    def get_updates_for_model(self, handle: Union[ContractHandle, str], model: str) -> list[AvailableUpdate]:
        out = []
        for entry in self._contract(handle).entries:
            cred = entry.event.credential
            if model in cred.supporting_models:
                out.append(
                    AvailableUpdate(cred.version, cred.released_date, cred.firmware_info.update_type, cred.associated_cves)
                )
        return out

    def contracts(self) -> list[ContractHandle]:
        return [c.handle for c in self._contracts.values()]

    def contracts_of(self, manufacturer: DidLike) -> list[ContractHandle]:
        did = Did.parse(manufacturer)
        return [h for h in self.contracts() if h.manufacturer == did]

    # persistence (read-only snapshot for the CLI)

    def to_json(self) -> dict:
        out = []
        for c in self._contracts.values():
            rec = c.handle.deploy_record
            out.append(
                {
                    "contract": c.handle.contract_id,
                    "manufacturer": str(c.handle.manufacturer),
                    "deployedAt": format_ts(rec.timestamp),
                    "deploySig": _sig_json(rec.signature),
                    "deployNonce": str(rec.nonce),
                    "entries": [
                        {
                            "seq": e.event.sequence_no,
                            "publishedAt": format_ts(e.published_at),
                            "credential": vc.compact_encoding(e.event.credential).decode("ascii"),
                            "senderSig": _sig_json(e.sender_sig),
                            "nonce": str(e.nonce),
                        }
                        for e in c.entries
                    ],
                }
            )
        return {"contracts": out}

    @classmethod
    def from_json(cls, data: dict, registry: Registry) -> "UpdateLedger":
        ledger = cls(registry)
        for c in data["contracts"]:
            did = Did.parse(c["manufacturer"])
            handle = ContractHandle(
                c["contract"], did, DeployRecord(did, parse_ts(c["deployedAt"]), _sig_from(c["deploySig"]), int(c["deployNonce"]))
            )
            contract = _Contract(handle)
            for e in c["entries"]:
                cred = vc.decode(e["credential"].encode("ascii"))
                event = UpdateEvent(did, cred.version, tuple(cred.supporting_models), cred, e["seq"], handle.contract_id)
                contract.entries.append(LogEntry(event, parse_ts(e["publishedAt"]), _sig_from(e["senderSig"]), int(e["nonce"])))
            ledger._contracts[handle.contract_id] = contract
        return ledger

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path], registry: Registry) -> "UpdateLedger":
        return cls.from_json(json.loads(Path(path).read_text()), registry)


def _sig_json(sig: crypto.Signature) -> dict:
    return {"keyId": sig.key_id, "value": b64url_encode(sig.bytes)}


def _sig_from(d: dict) -> crypto.Signature:
    return crypto.Signature(b64url_decode(d["value"]), d["keyId"])
