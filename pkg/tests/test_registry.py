import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inverter_trust import crypto
from inverter_trust import credentials as vc
from inverter_trust.credentials import Status
from inverter_trust.registry import (
    AUTHENTICATION,
    Did,
    DuplicateDid,
    InvalidDocument,
    Registry,
    StaleVersion,
    Unauthorized,
    UnknownDid,
    revocation_payload,
    update_payload,
)

from conftest import at


def _signed_update(reg, did, signer, **changes):
    doc = reg.resolve(did)
    new = doc.replace(version=doc.version + 1, **changes)
    return new, crypto.sign(update_payload(new), signer)


def test_did_rendering_and_parse():
    d = Did("sim", "abc123")
    assert d.rendered == "did:sim:abc123" == str(d)
    assert Did.parse("did:sim:abc123") == d
    for bad in ("did:sim", "foo:sim:x", "did::x", "did:sim:"):
        with pytest.raises(ValueError):
            Did.parse(bad)


def test_create_and_resolve(rng, keypair):
    reg = Registry(rng)
    did, doc = reg.create_did("sim", keypair, [("UpdateServer", "sim://s")])
    assert reg.resolve(did) == doc
    assert reg.resolve(str(did)).canonical_bytes() == doc.canonical_bytes()
    assert doc.version == 1 and len(doc.keys_for(AUTHENTICATION)) == 1
    assert doc.endpoint("UpdateServer") == "sim://s" and doc.endpoint("VCIssuance") is None
    assert len(did.method_specific_id) == 32


def test_create_errors(rng, keypair):
    reg = Registry(rng)
    reg.create_did("sim", keypair, method_specific_id="fixed")
    with pytest.raises(DuplicateDid):
        reg.create_did("sim", keypair, method_specific_id="fixed")
    with pytest.raises(InvalidDocument):
        reg.create_did("", keypair)
    with pytest.raises(InvalidDocument):
        reg.create_did("sim", keypair, [("Bogus", "x")])
    with pytest.raises(UnknownDid):
        reg.create_did("sim", keypair, controller="did:sim:nobody")


def test_unknown_did(rng):
    reg = Registry(rng)
    with pytest.raises(UnknownDid):
        reg.resolve("did:sim:missing")
    with pytest.raises(UnknownDid):
        reg.resolve("garbage")
    assert reg.try_resolve("did:sim:missing") is None


def test_self_signed_key_rotation(rng):
    reg = Registry(rng)
    kp = crypto.keypair_from_rng(rng)
    did, doc = reg.create_did("sim", kp)
    new_kp = crypto.keypair_from_rng(rng)
    vm = doc.verification_keys[0]
    rotated = type(vm)(new_kp.key_id, new_kp.verification_key, vm.purposes)
    new, sig = _signed_update(reg, did, kp, verification_keys=(rotated,))
    assert reg.update_document(did, new, sig).version == 2
    assert reg.resolve(did).key(new_kp.key_id) is not None


def test_update_errors(rng):
    reg = Registry(rng)
    kp, stranger = crypto.keypair_from_rng(rng), crypto.keypair_from_rng(rng)
    did, doc = reg.create_did("sim", kp)
    new, _ = _signed_update(reg, did, kp)
    with pytest.raises(Unauthorized):
        reg.update_document(did, new, crypto.sign(update_payload(new), stranger))
    stale = doc.replace(version=1)
    with pytest.raises(StaleVersion):
        reg.update_document(did, stale, crypto.sign(update_payload(stale), kp))
    with pytest.raises(UnknownDid):
        reg.update_document("did:sim:none", new, crypto.sign(update_payload(new), kp))
    keyless = doc.replace(version=2, verification_keys=())
    with pytest.raises(InvalidDocument):
        reg.update_document(did, keyless, crypto.sign(update_payload(keyless), kp))
    assert reg.resolve(did) == doc


def test_ownership_transfer_locks_out_manufacturer(rng):
    reg = Registry(rng)
    m_kp, o_kp = crypto.keypair_from_rng(rng), crypto.keypair_from_rng(rng)
    m, _ = reg.create_did("sim", m_kp)
    o, _ = reg.create_did("sim", o_kp)
    inv, _ = reg.create_did("sim", crypto.keypair_from_rng(rng), controller=m)
    new, sig = _signed_update(reg, inv, m_kp, controller=o)
    reg.update_document(inv, new, sig)
    assert reg.resolve(inv).controller == o
    again, sig = _signed_update(reg, inv, m_kp)
    with pytest.raises(Unauthorized):
        reg.update_document(inv, again, sig)
    ok, sig = _signed_update(reg, inv, o_kp)
    assert reg.update_document(inv, ok, sig).version == 3


def test_revocation(rng):
    reg = Registry(rng)
    kp, stranger = crypto.keypair_from_rng(rng), crypto.keypair_from_rng(rng)
    issuer, _ = reg.create_did("sim", kp)
    assert not reg.is_revoked(issuer, "urn:vc:1")
    with pytest.raises(Unauthorized):
        reg.revoke_credential(issuer, "urn:vc:1", crypto.sign(revocation_payload(issuer, "urn:vc:1"), stranger))
    assert not reg.is_revoked(issuer, "urn:vc:1")
    reg.revoke_credential(issuer, "urn:vc:1", crypto.sign(revocation_payload(issuer, "urn:vc:1"), kp))
    assert reg.is_revoked(issuer, "urn:vc:1")
    assert not reg.is_revoked(issuer, "urn:vc:2")
    assert not reg.is_revoked("junk", "urn:vc:1")


def test_revoke_then_verify_is_revoked(rng):
    reg = Registry(rng)
    kp = crypto.keypair_from_rng(rng)
    issuer, _ = reg.create_did("sim", kp)
    fw = vc.issue_firmware_credential(
        kp, issuer, version="v1.0", binary_hash=crypto.sha256(b"b"), update_type="security",
        supporting_models=("M",), released_date=at(0), issuance_date=at(0), rng=rng,
    )
    assert vc.verify_credential(fw, reg).status is Status.VALID
    reg.revoke_credential(issuer, fw.id, crypto.sign(revocation_payload(issuer, fw.id), kp))
    assert vc.verify_credential(fw, reg).status is Status.REVOKED


def _random_registry(seed: int) -> Registry:
    rng = random.Random(seed)
    reg = Registry(rng)
    dids = []
    for i in range(rng.randrange(1, 6)):
        kp = crypto.keypair_from_rng(rng)
        ctrl = rng.choice(dids)[0] if dids and rng.random() < 0.5 else None
        eps = [("UpdateServer", f"sim://s{i}")] if rng.random() < 0.5 else []
        did, _ = reg.create_did("sim", kp, eps, controller=ctrl)
        dids.append((did, kp))
        if rng.random() < 0.5:
            cid = f"urn:vc:{rng.getrandbits(32)}"
            reg.revoke_credential(did, cid, crypto.sign(revocation_payload(did, cid), kp))
    return reg


@settings(max_examples=100)
@given(st.integers(0, 2**32))
def test_persistence_roundtrip(tmp_path_factory, seed):
    reg = _random_registry(seed)
    path = tmp_path_factory.mktemp("reg") / "registry.json"
    reg.save(path)
    loaded = Registry.load(path)
    assert loaded.to_json() == reg.to_json()
    for did, doc in reg.documents.items():
        assert loaded.resolve(did) == doc
    assert list(reg.to_json()) == ["documents", "revocations"]


def test_unauthorized_attempts_never_change_documents():
    rng = random.Random(77)
    reg = Registry(rng)
    owners = [crypto.keypair_from_rng(rng) for _ in range(3)]
    dids = [reg.create_did("sim", kp)[0] for kp in owners]
    before = reg.to_json()
    for _ in range(1000):
        target = rng.randrange(3)
        attacker = crypto.keypair_from_rng(rng) if rng.random() < 0.5 else owners[(target + 1) % 3]
        doc = reg.resolve(dids[target])
        new = doc.replace(version=doc.version + rng.choice([0, 1, 2]), controller=dids[(target + 2) % 3])
        with pytest.raises((Unauthorized, StaleVersion)):
            reg.update_document(dids[target], new, crypto.sign(update_payload(new), attacker))
    assert reg.to_json() == before


@settings(max_examples=50)
@given(st.lists(st.integers(0, 2), min_size=1, max_size=15))
def test_version_monotonic_under_accepted_updates(choices):
    rng = random.Random(len(choices))
    reg = Registry(rng)
    kp = crypto.keypair_from_rng(rng)
    did, _ = reg.create_did("sim", kp)
    versions = [1]
    for c in choices:
        doc = reg.resolve(did)
        new = doc.replace(version=doc.version + 1 if c else doc.version)
        try:
            reg.update_document(did, new, crypto.sign(update_payload(new), kp))
        except StaleVersion:
            pass
        versions.append(reg.resolve(did).version)
    assert all(b >= a for a, b in zip(versions, versions[1:]))
    assert versions[-1] == 1 + sum(1 for c in choices if c)
