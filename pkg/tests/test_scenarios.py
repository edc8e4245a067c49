import json

import pytest

from inverter_trust.sim.adversary import KINDS
from inverter_trust.sim.scenario import ScenarioError, bundled_scenarios, load_scenario, parse_scenario, run_scenario

BUNDLED = sorted(bundled_scenarios())

EXPECTED = {
    "happy_path", "late_update", "missed_update", "factory_reset_recovery", "attack1_mimic",
    "attack2_foreign_enroll", "replay_vc_response", "tampered_binary", "offline_update",
}


def test_bundled_set():
    assert set(BUNDLED) == EXPECTED


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenario_passes(name):
    report = run_scenario(bundled_scenarios()[name])
    assert report.passed, report.summary()


@pytest.mark.parametrize("name", BUNDLED)
def test_same_seed_same_report(name):
    path = bundled_scenarios()[name]
    a, b = run_scenario(path), run_scenario(path)
    assert a.to_bytes() == b.to_bytes()
    assert a.capture_jsonl() == b.capture_jsonl()


def test_seed_override_changes_capture_but_still_passes():
    path = bundled_scenarios()["happy_path"]
    a, b = run_scenario(path), run_scenario(path, seed_override=5)
    assert b.passed and b.seed == 5
    assert a.capture_jsonl() != b.capture_jsonl()


def test_capture_lines_shape():
    report = run_scenario(bundled_scenarios()["happy_path"])
    lines = report.capture_jsonl().splitlines()
    assert lines
    for line in lines:
        rec = json.loads(line)
        assert set(rec) >= {"time", "from", "to", "kind", "payload_digest", "payload_size"}


def test_adversary_completeness():
    seen = {}
    for name in BUNDLED:
        report = run_scenario(bundled_scenarios()[name])
        for attack in report.attacks:
            seen.setdefault(attack["kind"], []).append(attack["rejected"])
    assert set(seen) == set(KINDS)
    assert all(all(flags) for flags in seen.values())


def test_attack1_enrollment_rejected():
    report = run_scenario(bundled_scenarios()["attack1_mimic"])
    assert any(e.check == "enrollment" and e.passed for e in report.expectations)
    assert report.passed


def _scenario(**overrides):
    base = json.loads(bundled_scenarios()["happy_path"].read_text())
    base.update(overrides)
    return base


def _error(doc) -> ScenarioError:
    text = json.dumps(doc, indent=2)
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text, "bad.json")
    return exc.value, text.splitlines()


def test_schema_violation_points_at_line():
    doc = _scenario()
    doc["steps"][3]["at"] = "yesterday"
    err, lines = _error(doc)
    assert err.line is not None and "yesterday" in lines[err.line - 1]
    assert str(err).startswith(f"bad.json:{err.line}:")


def test_unsorted_steps_rejected():
    doc = _scenario()
    doc["steps"][4]["at"] = "2021-01-01T00:00:00Z"
    err, lines = _error(doc)
    assert "sorted" in err.message and "2021-01-01" in lines[err.line - 1]


def test_undeclared_actor_rejected():
    doc = _scenario()
    doc["steps"][2]["params"]["operator"] = "ghost"
    err, lines = _error(doc)
    assert "ghost" in err.message and "ghost" in lines[err.line - 1]


def test_role_action_mismatch():
    doc = _scenario()
    doc["steps"][0]["action"] = "renew"
    err, _ = _error(doc)
    assert "cannot perform" in err.message


def test_missing_step_ref_and_duplicates():
    doc = _scenario()
    doc["expectations"][0]["params"]["step"] = "nope"
    assert "nope" in _error(doc)[0].message
    doc = _scenario()
    doc["actors"].append(dict(doc["actors"][0]))
    assert "twice" in _error(doc)[0].message


def test_invalid_json_line():
    with pytest.raises(ScenarioError) as exc:
        parse_scenario('{\n  "name": "x",\n  oops\n}', "x.json")
    assert exc.value.line == 3


def test_missing_file():
    with pytest.raises(ScenarioError):
        load_scenario("/nonexistent/scenario.json")


def test_failed_expectation_reported(tmp_path):
    doc = _scenario()
    doc["expectations"].append({"check": "installed_version", "params": {"inverter": "inv1", "version": "v9.9"}})
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    report = run_scenario(path)
    assert not report.passed
    assert [f.check for f in report.failures] == ["installed_version"]
