"""Scenario files: loading with line-level diagnostics, execution and reporting."""

from __future__ import annotations

import bisect
import enum
import json
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

import jsonschema

from .. import credentials as vc
from .. import schemas
from ..actors import InstallOutcome, IssuanceRejected, ProtocolError, ResponseRejected
from ..codec import canonical_json, format_ts, parse_ts
from ..credentials import CredentialError
from ..ledger import LedgerError
from ..registry import RegistryError
from ..trust import EnrollmentDecision, compute_trust_state
from . import adversary as adv
from .clock import ClockError
from .world import Adversary, InverterPlan, World, WorldError

Path_ = tuple[Union[str, int], ...]

ROLE_ACTIONS = {
    "manufacturer": {"manufacture", "transfer", "publish", "server_down", "server_up"},
    "inverter": {"sync", "apply_pending", "factory_reset", "reinstall_all", "offline_update"},
    "owner": {"renew", "renew_all", "enroll"},
    "operator": set(),
    "adversary": {"renew", "renew_all", "enroll"} | set(adv.KINDS),
}
# step/expectation params that name other actors, with the role they must have
ACTOR_PARAMS = {
    "inverter": ("inverter",),
    "owner": ("owner", "adversary"),
    "operator": ("operator",),
}


class ScenarioError(Exception):
    """A scenario file that cannot be run; ``line`` points into the file when known."""

    def __init__(self, message: str, line: Optional[int] = None, source: str = ""):
        where = f"{source}:{line}: " if line is not None and source else (f"line {line}: " if line else "")
        super().__init__(where + message)
        self.message = message
        self.line = line
        self.source = source


# -- locating values in the source text ---------------------------------------


def value_lines(text: str) -> dict[Path_, int]:
    """Map each JSON value's path to the 1-based line where the value starts.

    ``text`` must already be valid JSON.
    """
    newlines = [i for i, c in enumerate(text) if c == "\n"]
    decoder = json.JSONDecoder()
    lines: dict[Path_, int] = {}

    def line_of(pos: int) -> int:
        return bisect.bisect_right(newlines, pos - 1) + 1

    def skip(i: int) -> int:
        while i < len(text) and text[i] in " \t\r\n":
            i += 1
        return i

    def walk(i: int, path: Path_) -> int:
        i = skip(i)
        lines[path] = line_of(i)
        c = text[i]
        if c == "{":
            i = skip(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = json.decoder.scanstring(text, skip(i) + 1)
                i = skip(i) + 1  # colon
                i = skip(walk(i, path + (key,)))
                if text[i] == "}":
                    return i + 1
                i += 1  # comma
        if c == "[":
            i = skip(i + 1)
            if text[i] == "]":
                return i + 1
            n = 0
            while True:
                i = skip(walk(i, path + (n,)))
                n += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        _, end = decoder.raw_decode(text, i)
        return end

    walk(0, ())
    return lines


def _nearest_line(lines: dict[Path_, int], path: Path_) -> Optional[int]:
    path = tuple(path)
    while path not in lines and path:
        path = path[:-1]
    return lines.get(path)


# -- model --------------------------------------------------------------------


@dataclass(frozen=True)
class Step:
    at: datetime
    actor: str
    action: str
    params: dict
    id: Optional[str] = None


@dataclass(frozen=True)
class Expectation:
    check: str
    params: dict


@dataclass
class Scenario:
    name: str
    seed: int
    start: datetime
    actors: list[dict]
    steps: list[Step]
    expectations: list[Expectation]
    description: str = ""
    source: str = ""

    @property
    def roles(self) -> dict[str, str]:
        return {a["name"]: a["role"] for a in self.actors}


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON: {exc.msg}", exc.lineno, source) from None
    lines = value_lines(text)
    validator = jsonschema.Draft202012Validator(schemas.load("scenario"))
    errors = sorted(validator.iter_errors(data), key=lambda e: (_nearest_line(lines, e.absolute_path) or 0, e.message))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "(root)"
        raise ScenarioError(f"{where}: {err.message}", _nearest_line(lines, err.absolute_path), source)

    def fail(msg: str, path: Path_) -> ScenarioError:
        return ScenarioError(msg, _nearest_line(lines, path), source)

    roles: dict[str, str] = {}
    for i, actor in enumerate(data["actors"]):
        if actor["name"] in roles:
            raise fail(f"actor {actor['name']!r} declared twice", ("actors", i, "name"))
        roles[actor["name"]] = actor["role"]
    for i, actor in enumerate(data["actors"]):
        if actor["role"] == "inverter" and roles.get(actor["manufacturer"]) != "manufacturer":
            raise fail(f"{actor['manufacturer']!r} is not a declared manufacturer", ("actors", i, "manufacturer"))

    def check_refs(params: dict, path: Path_) -> None:
        for key, allowed in ACTOR_PARAMS.items():
            if key in params:
                name = params[key]
                if roles.get(name) not in allowed:
                    raise fail(f"{key} {name!r} is not a declared {'/'.join(allowed)}", path + ("params", key))

    steps = []
    last = parse_ts(data["start"])
    for i, s in enumerate(data["steps"]):
        at = parse_ts(s["at"])
        if at < last:
            raise fail("steps must be sorted by 'at'", ("steps", i, "at"))
        last = at
        role = roles.get(s["actor"])
        if role is None:
            raise fail(f"actor {s['actor']!r} is not declared", ("steps", i, "actor"))
        if s["action"] not in ROLE_ACTIONS[role]:
            raise fail(f"a {role} cannot perform {s['action']!r}", ("steps", i, "action"))
        params = s.get("params", {})
        check_refs(params, ("steps", i))
        steps.append(Step(at, s["actor"], s["action"], params, s.get("id")))
    ids = [s.id for s in steps if s.id]
    if len(ids) != len(set(ids)):
        raise fail("step ids must be unique", ("steps",))
    expectations = []
    for i, e in enumerate(data["expectations"]):
        params = e.get("params", {})
        check_refs(params, ("expectations", i))
        if "step" in params and params["step"] not in ids:
            raise fail(f"no step with id {params['step']!r}", ("expectations", i, "params", "step"))
        expectations.append(Expectation(e["check"], params))
    return Scenario(
        data["name"],
        data["seed"],
        parse_ts(data["start"]),
        data["actors"],
        steps,
        expectations,
        data.get("description", ""),
        source,
    )


def load_scenario(path: Union[str, Path]) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc.strerror or exc}", None, str(path)) from None
    return parse_scenario(text, str(path))


def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("inverter_trust").joinpath("scenarios")
    return {Path(str(p)).stem: Path(str(p)) for p in root.iterdir() if str(p).endswith(".json")}


# -- execution ----------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    index: int
    at: datetime
    actor: str
    action: str
    result: Any
    id: Optional[str] = None

    @property
    def error(self) -> Optional[str]:
        return self.result.get("error") if isinstance(self.result, dict) else None

    def to_json(self) -> dict:
        out = {"index": self.index, "at": format_ts(self.at), "actor": self.actor, "action": self.action, "result": self.result}
        if self.id:
            out["id"] = self.id
        return out


@dataclass(frozen=True)
class ExpectationResult:
    check: str
    params: dict
    passed: bool
    detail: str = ""

    def to_json(self) -> dict:
        return {"check": self.check, "params": self.params, "passed": self.passed, "detail": self.detail}


@dataclass
class ScenarioReport:
    name: str
    seed: int
    steps: list[StepRecord]
    expectations: list[ExpectationResult]
    capture: list[str] = field(repr=False, default_factory=list)
    world: Optional[World] = field(repr=False, default=None, compare=False)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.expectations)

    @property
    def failures(self) -> list[ExpectationResult]:
        return [e for e in self.expectations if not e.passed]

    @property
    def attacks(self) -> list[dict]:
        """Results of the adversary steps, in run order."""
        return [s.result for s in self.steps if s.action in adv.ACTIONS and isinstance(s.result, dict) and "kind" in s.result]

    def to_json(self) -> dict:
        return {
            "scenario": self.name,
            "seed": self.seed,
            "passed": self.passed,
            "steps": [s.to_json() for s in self.steps],
            "expectations": [e.to_json() for e in self.expectations],
            "capture_messages": len(self.capture),
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_json())

    def capture_jsonl(self) -> str:
        return "".join(line + "\n" for line in self.capture)

    def summary(self) -> str:
        lines = [f"scenario {self.name} (seed {self.seed}): {'PASS' if self.passed else 'FAIL'}"]
        for e in self.expectations:
            args = ", ".join(f"{k}={v}" for k, v in sorted(e.params.items()))
            mark = "ok  " if e.passed else "FAIL"
            lines.append(f"  {mark} {e.check}({args})" + (f": {e.detail}" if e.detail and not e.passed else ""))
        return "\n".join(lines)


STEP_FAILURES = (ProtocolError, LedgerError, RegistryError, CredentialError, WorldError, ClockError, KeyError)


def _reason(exc: Exception) -> str:
    reason = getattr(exc, "reason", None)
    if reason is None:
        return type(exc).__name__
    return reason.value if isinstance(reason, enum.Enum) else str(reason)


def _outcomes(outcomes: list[InstallOutcome]) -> list[str]:
    return [o.value for o in outcomes]


def _cred_summary(cred: vc.InverterCredential) -> dict:
    return {
        "credential": cred.id,
        "softwareVersion": cred.updatable.software_version,
        "timelyUpdated": cred.updatable.timely_updated,
        "missingUpdates": cred.updatable.missing_updates,
    }


class Runner:
    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.world = World.create(self.seed, scenario.start)
        self.records: list[StepRecord] = []
        self.attacks: dict[str, adv.AttackResult] = {}
        self.all_attacks: list[adv.AttackResult] = []
        self._declare()

    def _declare(self) -> None:
        w = self.world
        for a in self.scenario.actors:
            role = a["role"]
            if role == "manufacturer":
                w.add_manufacturer(a["name"], a.get("policy"))
            elif role == "owner":
                w.add_owner(a["name"])
            elif role == "adversary":
                w.add_owner(a["name"], adversary=True)
            elif role == "operator":
                w.add_operator(a["name"], a.get("policy"))
        for a in self.scenario.actors:
            if a["role"] == "inverter":
                w.declare_inverter(
                    InverterPlan(
                        a["name"],
                        a["manufacturer"],
                        a["model"],
                        a["serial"],
                        a.get("factory_version", "v1.0"),
                        a.get("auto_install", True),
                        tuple(a.get("capabilities", {}).items()),
                    )
                )

    # step dispatch

    def _manufacturer_step(self, name: str, action: str, p: dict) -> Any:
        w = self.world
        m = w.manufacturer(name)
        if action == "manufacture":
            inv = w.manufacture(name, p["inverter"])
            return {"did": str(inv.did), "version": inv.installed_version}
        if action == "transfer":
            owner = w.owner(p["owner"])
            doc = m.transfer_ownership(w.inverter(p["inverter"]), owner.did)
            return {"controller": str(doc.controller)}
        if action == "publish":
            models = p.get("models") or sorted({s.model for s in w.inverter_plans.values() if s.manufacturer == name})
            image = w.firmware_image(name, p["version"], models, int(p.get("size", 256)))
            fw, event = m.publish_firmware(image, p.get("update_type", "security"), p.get("cves", ()), with_link=p.get("link", True))
            return {"credential": fw.id, "sequence": event.sequence_no, "version": fw.version}
        if action in ("server_down", "server_up"):
            able = action == "server_up"
            m.server.tamper = None if able else (lambda _b: None)
            return {"server": m.server.name, "up": able}
        raise WorldError(action)

    def _inverter_step(self, name: str, action: str, p: dict) -> Any:
        w = self.world
        inv = w.inverter(name)
        if action == "sync":
            return {"outcomes": _outcomes(inv.sync()), "version": inv.installed_version}
        if action == "apply_pending":
            return {"outcomes": _outcomes(inv.apply_pending()), "version": inv.installed_version}
        if action == "factory_reset":
            proof = inv.factory_reset()
            return {"reset_at": format_ts(proof.timestamp), "version": inv.installed_version}
        if action == "reinstall_all":
            return {"outcomes": _outcomes(w.reinstall_all(inv)), "version": inv.installed_version}
        if action == "offline_update":
            return {"outcomes": [w.offline_update(inv, p["version"]).value], "version": inv.installed_version}
        raise WorldError(action)

    def _owner_step(self, name: str, action: str, p: dict) -> Any:
        w = self.world
        owner = w.owner(name)
        inv = w.inverter(p["inverter"])
        if action == "renew":
            return _cred_summary(owner.renew(inv))
        if action == "renew_all":
            creds = owner.renew_all(inv)
            return {"renewed": len(creds), **(_cred_summary(creds[-1]) if creds else {})}
        if action == "enroll":
            return owner.present(inv, w.operator(p["operator"])).to_json()
        raise WorldError(action)

    def _adversary_step(self, step: Step) -> Any:
        adversary = self.world.owner(step.actor)
        assert isinstance(adversary, Adversary)
        result = adv.ACTIONS[step.action](self.world, adversary, step.params)
        self.all_attacks.append(result)
        if step.id:
            self.attacks[step.id] = result
        return result.to_json()

    def _dispatch(self, step: Step) -> Any:
        role = self.scenario.roles[step.actor]
        if step.action in adv.ACTIONS:
            return self._adversary_step(step)
        if role == "manufacturer":
            return self._manufacturer_step(step.actor, step.action, step.params)
        if role == "inverter":
            return self._inverter_step(step.actor, step.action, step.params)
        return self._owner_step(step.actor, step.action, step.params)

    def run(self) -> ScenarioReport:
        for i, step in enumerate(self.scenario.steps):
            self.world.clock.advance_to(step.at)
            try:
                result = self._dispatch(step)
            except (IssuanceRejected, ResponseRejected) as exc:
                result = {"error": _reason(exc), "detail": str(exc)}
            except STEP_FAILURES as exc:
                result = {"error": _reason(exc), "detail": str(exc)}
            self.records.append(StepRecord(i, step.at, step.actor, step.action, result, step.id))
        results = [self._expect(e) for e in self.scenario.expectations]
        return ScenarioReport(self.scenario.name, self.seed, self.records, results, self.world.network.capture_lines(), self.world)

    # expectations

    def _expect(self, e: Expectation) -> ExpectationResult:
        fn = getattr(self, f"check_{e.check}")
        try:
            ok, detail = fn(**e.params)
        except (TypeError, KeyError, WorldError) as exc:
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        return ExpectationResult(e.check, e.params, bool(ok), detail)

    def _step(self, step_id: str) -> StepRecord:
        return next(r for r in self.records if r.id == step_id)

    def check_wallet_consistent(self, inverter: str):
        inv = self.world.inverter(inverter)
        creds = inv.wallet.inverter_credentials()
        if len(creds) != 1:
            return False, f"wallet holds {len(creds)} inverter credentials"
        cred = creds[0]
        status = vc.verify_credential(cred, self.world.registry)
        if not status.valid:
            return False, f"credential is {status.status.value}"
        if cred.updatable.software_version != inv.installed_version:
            return False, f"credential says {cred.updatable.software_version}, inverter runs {inv.installed_version}"
        log = tuple(reversed(inv.install_log))
        head = cred.firmware_history[: len(log)]
        if head != log or (not inv.reset_log and len(cred.firmware_history) != len(log)):
            return False, "firmware history does not match the install log"
        return True, ""

    def check_old_vcs_revoked(self, inverter: str):
        inv = self.world.inverter(inverter)
        m = self.world.manufacturer_of(inv)
        current = inv.wallet.current.id
        issued = {r.old_vc for r in m.issued if r.inverter == inv.did} | {r.new_vc for r in m.issued if r.inverter == inv.did}
        stale = [i for i in issued if i != current and not self.world.registry.is_revoked(m.did, i)]
        if self.world.registry.is_revoked(m.did, current):
            return False, "current credential is revoked"
        return (not stale, f"not revoked: {stale}" if stale else "")

    def check_nonce_echo(self, owner: str, min_count: int = 1):
        o = self.world.owner(owner)
        bad = [(n, e) for n, e in o.accepted if e != n + 1]
        if len(o.accepted) < min_count:
            return False, f"only {len(o.accepted)} responses accepted"
        return (not bad, f"mismatched echoes: {bad}" if bad else "")

    def check_installed_version(self, inverter: str, version: str):
        got = self.world.inverter(inverter).installed_version
        return got == version, f"installed {got}"

    def check_install_outcome(self, inverter: str, version: str, outcome: str):
        seen = [o.value for v, o in self.world.inverter(inverter).outcomes if v == version]
        return outcome in seen, f"outcomes for {version}: {seen}"

    def check_trust_state(self, inverter: str, operator: str, state: str):
        inv = self.world.inverter(inverter)
        op = self.world.operator(operator)
        cred = inv.wallet.current
        got = compute_trust_state(cred, op.updates_for(cred.issuer, cred.immutable.model), op.policy)
        return got.value == state, f"trust state {got.value}"

    def check_enrollment(
        self,
        inverter: str,
        operator: str,
        accepted: bool,
        trust: Optional[str] = None,
        reason: Optional[str] = None,
        step: Optional[str] = None,
    ):
        """Check the operator's latest decision for the inverter, or the one made at ``step``."""
        inv = self.world.inverter(inverter)
        if step is not None:
            result = self._step(step).result
            decision = EnrollmentDecision.from_json(result) if "accepted" in result else None
        else:
            decision = self.world.operator(operator).decisions.get(str(inv.did))
        if decision is None:
            return False, "no enrollment decision recorded"
        ok = decision.accepted == accepted
        ok = ok and (trust is None or decision.trust.value == trust)
        ok = ok and (reason is None or reason in decision.reasons)
        return ok, json.dumps(decision.to_json(), sort_keys=True)

    def check_attack_rejected(self, step: Optional[str] = None, reason: Optional[str] = None):
        attacks = [self.attacks[step]] if step else self.all_attacks
        rec = self._step(step) if step else None
        if rec is not None and rec.error:
            return False, f"attack step failed to run: {rec.error}"
        if not attacks:
            return False, "no attacks ran"
        bad = [a for a in attacks if not a.rejected or (reason is not None and a.reason != reason)]
        return (not bad, "; ".join(f"{a.kind}: rejected={a.rejected} reason={a.reason}" for a in bad))

    def check_step_error(self, step: str, reason: Optional[str] = None):
        rec = self._step(step)
        err = rec.error
        if err is None:
            return False, "step succeeded"
        return reason is None or err == reason, f"error {err}"

    def check_reset_history_head(self, inverter: str):
        inv = self.world.inverter(inverter)
        cred = inv.wallet.current
        if not inv.reset_log:
            return False, "inverter was never reset"
        return cred.latest_reset == inv.reset_log[-1], f"head {cred.latest_reset}, last reset {inv.reset_log[-1]}"

    def check_no_plaintext_leak(self):
        secrets = [s for s in self.world.owner_secrets() if s]
        leaks = 0
        for payload in self.world.network.raw_payloads():
            leaks += sum(1 for s in secrets if s in payload)
        return leaks == 0, f"{leaks} leaks"

    def check_no_downgrade(self, inverter: str):
        inv = self.world.inverter(inverter)
        keys = [vc.version_key(v) for v, _ in inv.install_log]
        ok = all(a < b for a, b in zip(keys, keys[1:]))
        return ok, f"install log {[v for v, _ in inv.install_log]}"

    def check_ledger_updates(self, manufacturer: str, count: int, model: Optional[str] = None):
        m = self.world.manufacturer(manufacturer)
        n = len(self.world.ledger.get_updates_for_model(m.contract, model)) if model else len(self.world.ledger.log(m.contract))
        return n == count, f"{n} updates"

    def check_credential_field(self, inverter: str, field: str, value: Any):
        cred = self.world.inverter(inverter).wallet.current
        got = cred.to_payload()["credentialSubject"]["updatable"].get(field)
        return got == value, f"{field} = {got!r}"


def run_scenario(path_or_scenario: Union[str, Path, Scenario], seed_override: Optional[int] = None) -> ScenarioReport:
    scenario = path_or_scenario if isinstance(path_or_scenario, Scenario) else load_scenario(path_or_scenario)
    return Runner(scenario, seed_override).run()
