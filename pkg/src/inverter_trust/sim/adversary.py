"""Adversary actions against the honest protocol.

Every action returns an ``AttackResult`` whose ``rejected`` flag says
whether the honest parties refused it. The adversary works only with its
own keys, public registry/ledger data and captured network payloads.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Callable, Optional

from .. import credentials as vc
from .. import crypto
from ..actors import (
    FirmwareImage,
    InstallOutcome,
    IssuanceRejected,
    ResponseRejected,
    SmartInverter,
    VppOperator,
    seal_presentation,
)
from ..codec import b64url_decode
from ..trust import EnrollmentDecision
from .world import Adversary, World, WorldError

KINDS = (
    "MutateCredential",
    "ForgeSignature",
    "ReplayMessage",
    "TamperBinary",
    "EnrollForeignInverter",
    "MimicVersion",
    "DowngradeAttempt",
)


@dataclass(frozen=True)
class AttackResult:
    kind: str
    target: str
    rejected: bool
    reason: str

    def to_json(self) -> dict:
        return {"kind": self.kind, "target": self.target, "rejected": self.rejected, "reason": self.reason}


# -- credential mutations ----------------------------------------------------


def mutate_status(cred: vc.InverterCredential, field: str, value=None) -> vc.InverterCredential:
    """Change one claim while keeping the issuer's original proof attached."""
    upd, imm = cred.updatable, cred.immutable
    if field == "softwareVersion":
        # keep the claim self-consistent so only the proof can catch it
        claimed = value or "v99.0"
        history = ((claimed, cred.firmware_history[0][1]),) + cred.firmware_history[1:]
        return dataclasses.replace(
            cred, updatable=dataclasses.replace(upd, software_version=claimed), firmware_history=history
        )
    if field == "timelyUpdated":
        return dataclasses.replace(cred, updatable=dataclasses.replace(upd, timely_updated=not upd.timely_updated))
    if field == "missingUpdates":
        return dataclasses.replace(cred, updatable=dataclasses.replace(upd, missing_updates=not upd.missing_updates))
    if field == "status":
        flipped = "inactive" if upd.status == "active" else "active"
        return dataclasses.replace(cred, updatable=dataclasses.replace(upd, status=flipped))
    if field == "serialNo":
        return dataclasses.replace(cred, immutable=dataclasses.replace(imm, serial_no=value or imm.serial_no + "0"))
    if field == "model":
        return dataclasses.replace(cred, immutable=dataclasses.replace(imm, model=value or imm.model + "-X"))
    if field == "firmwareHistory":
        head_version, head_ts = cred.firmware_history[0]
        forged = (value or "v99.0", head_ts + (cred.issuance_date - head_ts) / 2)
        return dataclasses.replace(
            cred,
            updatable=dataclasses.replace(upd, software_version=forged[0]),
            firmware_history=(forged,) + cred.firmware_history,
        )
    if field == "resetHistory":
        return dataclasses.replace(cred, reset_history=cred.reset_history[1:] if cred.reset_history else ())
    raise WorldError(f"unknown credential field {field!r}")


MUTABLE_FIELDS = ("softwareVersion", "timelyUpdated", "missingUpdates", "status", "serialNo", "model", "firmwareHistory")


def flip_bit(data: bytes, bit: int) -> bytes:
    i, j = divmod(bit % (len(data) * 8), 8)
    return data[:i] + bytes([data[i] ^ (1 << j)]) + data[i + 1 :]


# -- helpers -----------------------------------------------------------------


def present_as(
    world: World, adversary: Adversary, operator: VppOperator, credential: vc.InverterCredential, presenter=None
) -> EnrollmentDecision:
    """Send ``credential`` to the operator, signed with the adversary's own key."""
    challenge = world.network.request(adversary.name, operator.challenge_uri, "enroll_challenge", b"")
    msg = {
        "credential": vc.compact_encoding(credential).decode("ascii"),
        "presenter": str(presenter or adversary.did),
        "challenge": challenge.decode(),
    }
    envelope = seal_presentation(msg, adversary.kp, operator, world.rng)
    reply = world.network.request(adversary.name, operator.enroll_uri, "enroll", envelope)
    return EnrollmentDecision.from_json(json.loads(reply))


def _enrollment_result(kind: str, target: str, decision: EnrollmentDecision) -> AttackResult:
    return AttackResult(kind, target, not decision.accepted, decision.reasons[0] if decision.reasons else "")


def _install_result(kind: str, inverter: SmartInverter, before: str, outcome: InstallOutcome) -> AttackResult:
    held = inverter.installed_version == before
    return AttackResult(kind, inverter.name, held and outcome is not InstallOutcome.INSTALLED, outcome.value)


# -- actions -----------------------------------------------------------------


def mutate_credential(world: World, adversary: Adversary, params: dict) -> AttackResult:
    inverter = world.inverter(params["inverter"])
    operator = world.operator(params["operator"])
    forged = mutate_status(inverter.wallet.current, params.get("field", "softwareVersion"), params.get("value"))
    return _enrollment_result("MutateCredential", inverter.name, present_as(world, adversary, operator, forged))


def forge_signature(world: World, adversary: Adversary, params: dict) -> AttackResult:
    """Sign a credential with the adversary key while naming the manufacturer as issuer."""
    inverter = world.inverter(params["inverter"])
    manufacturer = world.manufacturer_of(inverter)
    mode = params.get("mode", "enrollment")
    if mode == "enrollment":
        operator = world.operator(params["operator"])
        current = inverter.wallet.current
        claimed = mutate_status(current, "softwareVersion", params.get("value", "v99.0"))
        forged = vc.sign_credential(dataclasses.replace(claimed, proof=None), adversary.kp)
        return _enrollment_result("ForgeSignature", inverter.name, present_as(world, adversary, operator, forged))
    if mode == "firmware":
        version = params.get("value", "v99.0")
        image = FirmwareImage((inverter.model,), version, b"MALWARE|" + crypto.random_bytes(64, world.rng))
        fw = vc.issue_firmware_credential(
            adversary.kp,
            manufacturer.did,
            version=version,
            binary_hash=image.binary_digest,
            update_type="security",
            supporting_models=(inverter.model,),
            released_date=world.now,
            issuance_date=world.now,
            rng=world.rng,
        )
        before = inverter.installed_version
        return _install_result("ForgeSignature", inverter, before, inverter.offline_update(image.binary, fw))
    raise WorldError(f"unknown forge mode {mode!r}")


def _captured(world: World, sender: str, kind: str) -> list[bytes]:
    return [m.payload for m in world.network.capture if m.sender == sender and m.kind == kind]


def replay_message(world: World, adversary: Adversary, params: dict) -> AttackResult:
    """Re-send an earlier captured VC request or response."""
    inverter = world.inverter(params["inverter"])
    manufacturer = world.manufacturer_of(inverter)
    owner = world.owner(params["owner"]) if "owner" in params else world.owner_of(inverter)
    kind = params.get("kind", "vc_response")
    index = int(params.get("index", 0))
    if kind == "vc_response":
        replies = _captured(world, manufacturer.name, "vc_request:response")
        envelopes = [b64url_decode(json.loads(r)["ok"]) for r in replies if b'"ok"' in r]
        if not envelopes:
            raise WorldError("no captured VC response to replay")
        held = inverter.wallet.current.id
        try:
            owner.install_vc(inverter, envelopes[index])
        except (ResponseRejected, IssuanceRejected) as exc:
            return AttackResult("ReplayMessage", inverter.name, inverter.wallet.current.id == held, exc.reason)
        return AttackResult("ReplayMessage", inverter.name, False, "accepted")
    if kind == "vc_request":
        requests = _captured(world, owner.name, "vc_request")
        if not requests:
            raise WorldError("no captured VC request to replay")
        reply = world.network.request(adversary.name, manufacturer.vc_uri, "vc_request", requests[index])
        body = json.loads(reply)
        if "rejected" in body:
            return AttackResult("ReplayMessage", inverter.name, True, body["rejected"])
        return AttackResult("ReplayMessage", inverter.name, False, "accepted")
    raise WorldError(f"cannot replay {kind!r}")


def _corrupt(payload: bytes) -> bytes:
    return payload[:-1] + bytes([payload[-1] ^ 0x01])


def tamper_binary(world: World, adversary: Adversary, params: dict) -> AttackResult:
    """Corrupt firmware downloads on the server-to-inverter link, then let the inverter sync."""
    inverter = world.inverter(params["inverter"])
    manufacturer = world.manufacturer_of(inverter)
    link = (manufacturer.server.name, inverter.name)

    def hook(kind: str, payload: bytes) -> Optional[bytes]:
        return _corrupt(payload) if kind == "fw_request:response" else payload

    before = inverter.installed_version
    world.network.add_hook(*link, hook)
    try:
        outcomes = inverter.sync() + inverter.apply_pending()
    finally:
        world.network.remove_hook(*link, hook)
    if not outcomes:
        raise WorldError("no update was pending for the tampered download")
    held = inverter.installed_version == before
    ok = held and all(o is not InstallOutcome.INSTALLED for o in outcomes)
    return AttackResult("TamperBinary", inverter.name, ok, outcomes[-1].value)


def enroll_foreign_inverter(world: World, adversary: Adversary, params: dict) -> AttackResult:
    inverter = world.inverter(params["inverter"])
    operator = world.operator(params["operator"])
    credential = inverter.wallet.current
    presenter = params.get("claim_owner") and credential.updatable.owner
    decision = present_as(world, adversary, operator, credential, presenter=presenter)
    return _enrollment_result("EnrollForeignInverter", inverter.name, decision)


def mimic_version(world: World, adversary: Adversary, params: dict) -> AttackResult:
    """Present a superseded credential that shows better firmware than the current one."""
    inverter = world.inverter(params["inverter"])
    operator = world.operator(params["operator"])
    current = inverter.wallet.current
    old = [c for c in adversary.relayed if c.immutable.inverter_id == inverter.did and c.id != current.id]
    if not old:
        raise WorldError(f"{adversary.name} kept no superseded credential for {inverter.name}")
    best = max(old, key=lambda c: (vc.version_key(c.updatable.software_version), -len(c.reset_history)))
    return _enrollment_result("MimicVersion", inverter.name, present_as(world, adversary, operator, best))


def downgrade_attempt(world: World, adversary: Adversary, params: dict) -> AttackResult:
    """Push a genuine but older release at the inverter, offline and as a replayed ledger event."""
    inverter = world.inverter(params["inverter"])
    manufacturer = world.manufacturer_of(inverter)
    version = params["version"]
    entry = manufacturer.published.get(version)
    binary = manufacturer.server.binaries.get(entry[0].link) if entry else None
    if entry is None or binary is None:
        raise WorldError(f"{version} is not a published release")
    before = inverter.installed_version
    offline = inverter.offline_update(binary, entry[0])
    events = [e.event for e in world.ledger.log(manufacturer.contract) if e.event.version == version]
    replayed = [inverter.handle_update_event(ev) for ev in events]
    outcomes = [offline] + replayed
    held = inverter.installed_version == before
    ok = held and all(o is not InstallOutcome.INSTALLED for o in outcomes)
    return AttackResult("DowngradeAttempt", inverter.name, ok, offline.value)


ACTIONS: dict[str, Callable[[World, Adversary, dict], AttackResult]] = {
    "MutateCredential": mutate_credential,
    "ForgeSignature": forge_signature,
    "ReplayMessage": replay_message,
    "TamperBinary": tamper_binary,
    "EnrollForeignInverter": enroll_foreign_inverter,
    "MimicVersion": mimic_version,
    "DowngradeAttempt": downgrade_attempt,
}
