import dataclasses
import json
import random
from datetime import timedelta

import jsonschema
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inverter_trust import credentials as vc
from inverter_trust import crypto, schemas
from inverter_trust.codec import b64url_decode, parse_ts
from inverter_trust.credentials import Status
from inverter_trust.registry import Registry, revocation_payload
from inverter_trust.sim.adversary import MUTABLE_FIELDS, mutate_status
from inverter_trust.sim.bench import sample_credential

from conftest import at

V20 = ("v2.0", parse_ts("2023-04-01T08:11:12Z"))
V18 = ("v1.8", parse_ts("2022-11-17T16:34:20Z"))
V10 = ("v1.0", parse_ts("2022-01-29T02:56:43Z"))


@pytest.fixture
def env(rng):
    reg = Registry(rng)
    kp = crypto.keypair_from_rng(rng)
    issuer, _ = reg.create_did("sim", kp)
    inv, _ = reg.create_did("sim", crypto.keypair_from_rng(rng), controller=issuer)
    owner, _ = reg.create_did("sim", crypto.keypair_from_rng(rng))
    ident = vc.InverterIdentity(inv, "SN-7", V10[1] - timedelta(days=2), "SP-PRO", (("phases", 1),))
    return reg, kp, issuer, ident, owner


def _firmware(kp, issuer, rng, **kw):
    args = dict(version="1.0021", binary_hash=crypto.sha256(b"image"), update_type="security",
                supporting_models=("SP-PRO",), released_date=at(0), issuance_date=at(0), rng=rng,
                cves=("CVE-2022-0001",), link="sim://u/1.0021.bin")
    args.update(kw)
    return vc.issue_firmware_credential(kp, issuer, **args)


def test_version_ordering():
    assert vc.is_newer("v1.10", "v1.9")
    assert vc.is_newer("1.0021", "1.3")
    assert not vc.is_newer("v1.0", "v1")
    assert vc.version_key("v2.0.0") == (2,)
    for bad in ("", "v", "1.a", "1..2", None):
        with pytest.raises(ValueError):
            vc.version_key(bad)


def test_firmware_credential_issue_verify(env, rng):
    reg, kp, issuer, *_ = env
    fw = _firmware(kp, issuer, rng)
    assert fw.version == "1.0021" and fw.issuer == fw.manufacturer == issuer
    assert fw.type_tags == ("VerifiableCredential", "FirmwareVC")
    assert vc.verify_credential(fw, reg).status is Status.VALID


def test_firmware_missing_hash_rejected(env, rng):
    _, kp, issuer, *_ = env
    with pytest.raises(vc.CredentialSchemaError):
        _firmware(kp, issuer, rng, binary_hash=None)
    with pytest.raises(vc.CredentialSchemaError):
        _firmware(kp, issuer, rng, binary_hash=b"ARVDVX2753hd6752H")
    with pytest.raises(vc.CredentialSchemaError):
        _firmware(kp, issuer, rng, supporting_models=())


def test_mutated_token_byte_is_bad_signature(env, rng):
    reg, kp, issuer, *_ = env
    fw = _firmware(kp, issuer, rng)
    token = vc.compact_encoding(fw)
    mutated = dataclasses.replace(fw, firmware_info=dataclasses.replace(fw.firmware_info, version="1.0022"))
    assert vc.verify_credential(mutated, reg).status is Status.BAD_SIGNATURE
    sig = bytearray(fw.proof.bytes)
    sig[5] ^= 1
    assert vc.verify_credential(dataclasses.replace(fw, proof=crypto.Signature(bytes(sig), fw.proof.key_id)), reg).status is Status.BAD_SIGNATURE
    assert vc.decode(token) == fw


def test_token_is_es256_jws_over_header_and_claims(env, rng):
    reg, kp, issuer, *_ = env
    fw = _firmware(kp, issuer, rng)
    header, claims, sig = vc.compact_encoding(fw).split(b".")
    assert json.loads(b64url_decode(header.decode()))["alg"] == "ES256"
    body = json.loads(b64url_decode(claims.decode()))
    assert body["iss"] == str(issuer) and body["jti"] == fw.id
    assert crypto.verify(header + b"." + claims, crypto.Signature(b64url_decode(sig.decode()), kp.key_id), kp.verification_key)
    assert header + b"." + claims == vc.signing_input(fw, kp.key_id)


def test_unknown_issuer(env, rng):
    _, kp, issuer, *_ = env
    fw = _firmware(kp, issuer, rng)
    assert vc.verify_credential(fw, Registry()).status is Status.UNKNOWN_ISSUER


def test_revoked(env, rng):
    reg, kp, issuer, ident, owner = env
    cred = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V10, issuance_date=V10[1], rng=rng)
    reg.revoke_credential(issuer, cred.id, crypto.sign(revocation_payload(issuer, cred.id), kp))
    assert vc.verify_credential(cred, reg).status is Status.REVOKED


def test_history_extension_matches_sample_shape(env, rng):
    reg, kp, issuer, ident, owner = env
    first = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V10, issuance_date=V10[1], rng=rng)
    assert first.firmware_history == (V10,)
    second = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V18, previous=first, rng=rng)
    third = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V20, previous=second, rng=rng)
    assert third.firmware_history == (V20, V18, V10)
    assert third.updatable.software_version == "v2.0"
    assert list(third.to_payload()["credentialSubject"]["firmwareHistory"].items()) == [
        ("v2.0", "2023-04-01T08:11:12Z"), ("v1.8", "2022-11-17T16:34:20Z"), ("v1.0", "2022-01-29T02:56:43Z")
    ]
    assert vc.verify_credential(third, reg).valid


def test_history_errors(env, rng):
    _, kp, issuer, ident, owner = env
    first = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V18, rng=rng)
    with pytest.raises(vc.HistoryError):
        vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V10, previous=first, rng=rng)
    with pytest.raises(vc.HistoryError):
        vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V18, previous=first, rng=rng)
    with pytest.raises(vc.HistoryError):
        vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=("v1.8", V20[1]), previous=first, rng=rng)
    other = dataclasses.replace(ident, serial_no="other")
    with pytest.raises(vc.CredentialError):
        vc.issue_inverter_credential(kp, issuer, other, owner=owner, installed=V20, previous=first, rng=rng)


def test_reinstall_after_reset_moves_to_head(env, rng):
    _, kp, issuer, ident, owner = env
    c = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V10, rng=rng)
    c = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=V18, previous=c, rng=rng)
    reset = V18[1] + timedelta(days=10)
    c = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=("v1.0", reset), previous=c, reset_at=reset, rng=rng)
    assert c.reset_history == (reset,) and c.latest_reset == reset
    assert [v for v, _ in c.firmware_history] == ["v1.0", "v1.8"]
    c = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=("v1.8", reset + timedelta(hours=1)), previous=c, rng=rng)
    assert [v for v, _ in c.firmware_history] == ["v1.8", "v1.0"]


def test_reissue_without_install_keeps_history(env, rng):
    _, kp, issuer, ident, owner = env
    c = vc.issue_inverter_credential(kp, issuer, ident, owner=issuer, installed=V10, rng=rng)
    d = vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=None, previous=c, rng=rng)
    assert d.firmware_history == c.firmware_history and d.updatable.owner == owner and d.id != c.id
    with pytest.raises(vc.HistoryError):
        vc.issue_inverter_credential(kp, issuer, ident, owner=owner, installed=None, rng=rng)


def test_canonical_bytes_deterministic_and_excludes_proof(rng):
    cred = sample_credential(random.Random(1)).credential
    assert vc.canonical_bytes(cred) == vc.canonical_bytes(cred)
    assert vc.canonical_bytes(cred) == vc.canonical_bytes(dataclasses.replace(cred, proof=None))
    assert vc.canonical_bytes(cred) == vc.canonical_bytes(vc.from_payload(json.loads(vc.canonical_bytes(cred))))
    changed = dataclasses.replace(cred, id=cred.id + "x")
    assert vc.canonical_bytes(changed) != vc.canonical_bytes(cred)
    assert list(json.loads(vc.canonical_bytes(cred))) == ["@context", "id", "type", "issuer", "issuanceDate", "credentialSubject"]


def test_compact_roundtrip_and_malformed(rng):
    cred = sample_credential(random.Random(2)).credential
    token = vc.compact_encoding(cred)
    assert vc.decode(token) == cred
    assert vc.decode(token.decode()) == cred
    with pytest.raises(vc.CredentialError):
        vc.compact_encoding(dataclasses.replace(cred, proof=None))
    head, claims, sig = token.split(b".")
    for bad in (b"", b"a.b", head + b"." + claims, b"\xff.\xff.\xff", head + b".e30." + sig, b"x" + token):
        with pytest.raises(vc.CredentialFormatError):
            vc.decode(bad)


def test_json_roundtrip(rng):
    cred = sample_credential(random.Random(3)).credential
    doc = vc.to_json(cred)
    assert doc["proof"]["type"] == "JsonWebSignature2020"
    assert vc.from_json(json.loads(json.dumps(doc))) == cred


def test_sample_size_in_band():
    cred = sample_credential(random.Random(4)).credential
    assert 1500 <= len(vc.compact_encoding(cred)) <= 3500
    assert 650 <= len(vc.canonical_bytes(cred)) <= 1950


def test_schema_files_accept_issued_credentials(env, rng):
    reg, kp, issuer, ident, owner = env
    fw = _firmware(kp, issuer, rng)
    inv = sample_credential(random.Random(5)).credential
    jsonschema.validate(vc.to_json(fw), schemas.load("firmware_vc"))
    jsonschema.validate(vc.to_json(inv), schemas.load("inverter_vc"))
    bad = vc.to_json(inv)
    del bad["credentialSubject"]["firmwareHistory"]
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(bad, schemas.load("inverter_vc"))
    props = schemas.load("firmware_vc")["properties"]["credentialSubject"]["properties"]
    assert {"associatedCVEs", "supportingModels", "firmwareInfo"} <= set(props)


def test_schema_errors_detect_inconsistent_head(rng):
    cred = sample_credential(random.Random(6)).credential
    broken = dataclasses.replace(cred, updatable=dataclasses.replace(cred.updatable, software_version="v9.9"))
    assert "softwareVersion must equal the newest firmwareHistory entry" in vc.schema_errors(broken)
    tie = dataclasses.replace(cred, firmware_history=((cred.firmware_history[0][0], cred.firmware_history[1][1]),) + cred.firmware_history[1:])
    assert any("newest-first" in e for e in vc.schema_errors(tie))


def test_every_single_field_mutation_is_detected():
    """1000 random single-claim mutations of issuer-signed credentials never verify."""
    rng = random.Random(99)
    samples = [sample_credential(random.Random(i)) for i in range(5)]
    failures = []
    for i in range(1000):
        s = samples[i % len(samples)]
        field = rng.choice(MUTABLE_FIELDS + ("id", "issuanceDate", "owner", "capabilities", "historyTime"))
        cred = s.credential
        if field == "id":
            m = dataclasses.replace(cred, id=cred.id + rng.choice("abc"))
        elif field == "issuanceDate":
            m = dataclasses.replace(cred, issuance_date=cred.issuance_date + timedelta(seconds=rng.randrange(1, 10**6)))
        elif field == "owner":
            m = dataclasses.replace(cred, updatable=dataclasses.replace(cred.updatable, owner=s.issuer))
        elif field == "capabilities":
            caps = dict(cred.immutable.capabilities)
            caps["ratedPowerW"] = caps["ratedPowerW"] + rng.randrange(1, 100)
            m = dataclasses.replace(cred, immutable=dataclasses.replace(cred.immutable, capabilities=tuple(caps.items())))
        elif field == "historyTime":
            (v, t), *rest = cred.firmware_history
            m = dataclasses.replace(cred, firmware_history=((v, t + timedelta(seconds=rng.randrange(1, 3600))),) + tuple(rest))
        else:
            m = mutate_status(cred, field, f"v{rng.randrange(3, 99)}.{rng.randrange(10)}")
        if vc.verify_credential(m, s.registry).valid:
            failures.append(field)
    assert failures == []


def _random_credential(rng: random.Random, kp, issuer):
    n = rng.randrange(1, 6)
    t = at(rng.randrange(0, 400), seconds=rng.randrange(86400))
    history = []
    for i in range(n):
        history.append((f"v{i}.{rng.randrange(100)}", t))
        t += timedelta(seconds=rng.randrange(1, 10**7))
    history.reverse()
    ident = vc.InverterIdentity(
        issuer, f"SN{rng.randrange(10**6)}", at(-1), rng.choice(["A", "B", "C"]), (("p", rng.randrange(3)),)
    )
    status = vc.InverterStatus(issuer, rng.choice(["active", "inactive"]), history[0][0], rng.random() < 0.5, rng.random() < 0.5)
    return vc.InverterCredential(
        id=f"urn:vc:inverter:{rng.getrandbits(24):06x}",
        issuer=issuer,
        issuance_date=history[0][1],
        immutable=ident,
        updatable=status,
        firmware_history=tuple(history),
    )


def test_canonical_bytes_injective_over_corpus(rng):
    kp = crypto.keypair_from_rng(rng)
    issuer, _ = Registry(rng).create_did("sim", kp)
    seen: dict[bytes, vc.InverterCredential] = {}
    for i in range(10_000):
        cred = _random_credential(random.Random(i), kp, issuer)
        key = vc.canonical_bytes(cred)
        if key in seen:
            assert seen[key] == cred
        seen[key] = cred
    assert len(seen) > 9_000


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(1, 10**6), st.booleans()), min_size=1, max_size=20))
def test_history_monotone_after_issuance_chain(steps):
    rng = random.Random(len(steps))
    reg = Registry(rng)
    kp = crypto.keypair_from_rng(rng)
    issuer, _ = reg.create_did("sim", kp)
    ident = vc.InverterIdentity(issuer, "S", at(0), "M")
    cred = vc.issue_inverter_credential(kp, issuer, ident, owner=issuer, installed=("v1.0", at(0)), rng=rng)
    t = at(0)
    minor = 0
    for gap, reset in steps:
        t += timedelta(seconds=gap)
        if reset:
            cred = vc.issue_inverter_credential(kp, issuer, ident, owner=issuer, installed=("v1.0", t), previous=cred, reset_at=t, rng=rng)
        else:
            minor += 1
            cred = vc.issue_inverter_credential(kp, issuer, ident, owner=issuer, installed=(f"v2.{minor}", t), previous=cred, rng=rng)
        assert vc.history_errors(cred.firmware_history, cred.reset_history) == []
        times = [ts for _, ts in cred.firmware_history]
        assert times == sorted(times, reverse=True) and len(set(times)) == len(times)
        assert cred.updatable.software_version == cred.firmware_history[0][0]
        assert vc.verify_credential(cred, reg).valid
