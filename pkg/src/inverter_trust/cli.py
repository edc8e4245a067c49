"""Command-line entry point: ``inverter-trust``.

Exit codes: 0 success, 1 a scenario expectation failed, 2 usage, input or
schema error.
"""

from __future__ import annotations

import argparse
import json
import sys
from datetime import timedelta
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

from . import credentials as vc
from . import crypto, schemas
from .ledger import UpdateLedger
from .registry import Registry
from .trust import AvailableUpdate, TrustPolicy, check_update_list, compute_trust_state, permitted_interactions

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _read_json(path: str, what: str):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}: invalid JSON in {what}: {exc.msg}") from None


def _resolve_scenario(arg: str) -> Path:
    from .sim.scenario import bundled_scenarios

    p = Path(arg)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    if arg in bundled:
        return bundled[arg]
    return p  # let the loader report it


# -- scenario ----------------------------------------------------------------


def cmd_scenario_run(args) -> int:
    from .sim.scenario import ScenarioError, run_scenario

    try:
        report = run_scenario(_resolve_scenario(args.file), args.seed)
    except ScenarioError as exc:
        raise UsageError(str(exc)) from None
    if args.capture:
        Path(args.capture).write_text(report.capture_jsonl())
    if args.save_ledger:
        report.world.ledger.save(args.save_ledger)
    if args.json:
        print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    else:
        print(report.summary())
    if not report.passed:
        for f in report.failures:
            print(f"expectation failed: {f.check} {json.dumps(f.params, sort_keys=True)}: {f.detail}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_scenario_list(args) -> int:
    from .sim.scenario import bundled_scenarios, load_scenario

    for name, path in sorted(bundled_scenarios().items()):
        print(f"{name:<26}{load_scenario(path).description}")
    return EXIT_OK


# -- bench -------------------------------------------------------------------


def cmd_bench(args) -> int:
    from .sim.bench import run_bench

    if args.iters < 1:
        raise UsageError("--iters must be at least 1")
    report = run_bench(args.iters, args.seed)
    print(json.dumps(report.to_json(), indent=2) if args.json else report.table())
    return EXIT_OK


# -- trust -------------------------------------------------------------------


def load_credential_file(path: str) -> vc.InverterCredential:
    """Read an inverter credential as a JSON document or as a compact token."""
    try:
        text = Path(path).read_text().strip()
    except OSError as exc:
        raise UsageError(f"cannot read credential {path}: {exc.strerror or exc}") from None
    try:
        if text.startswith("{"):
            doc = json.loads(text)
            errors = sorted(jsonschema.Draft202012Validator(schemas.load("inverter_vc")).iter_errors(doc), key=str)
            if errors:
                where = "/".join(str(p) for p in errors[0].absolute_path) or "(root)"
                raise UsageError(f"{path}: {where}: {errors[0].message}")
            cred = vc.from_json(doc)
        else:
            cred = vc.decode(text.encode("ascii"))
    except (json.JSONDecodeError, UnicodeEncodeError, vc.CredentialError) as exc:
        raise UsageError(f"{path}: not a readable credential: {exc}") from None
    if not isinstance(cred, vc.InverterCredential):
        raise UsageError(f"{path}: not an inverter credential")
    problems = vc.schema_errors(cred)
    if problems:
        raise UsageError(f"{path}: {'; '.join(problems)}")
    return cred


def load_updates_file(path: str) -> list[AvailableUpdate]:
    data = _read_json(path, "update list")
    if isinstance(data, dict):
        data = data.get("updates")
    if not isinstance(data, list):
        raise UsageError(f"{path}: expected a JSON list of updates")
    try:
        updates = [AvailableUpdate.from_json(u) for u in data]
        check_update_list(updates)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: bad update entry: {exc}") from None
    return updates


def cmd_trust_eval(args) -> int:
    cred = load_credential_file(args.vc)
    updates = load_updates_file(args.updates)
    if args.policy:
        try:
            policy = TrustPolicy.from_json(_read_json(args.policy, "policy"))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{args.policy}: bad policy: {exc}") from None
        threshold = policy
    else:
        policy = None
        threshold = timedelta(days=args.threshold_days)
    state = compute_trust_state(cred, updates, threshold)
    if args.json:
        out = {
            "inverter": str(cred.immutable.inverter_id),
            "trust": state.value,
            "interactions": permitted_interactions(state, policy).value,
        }
        print(json.dumps(out, sort_keys=True))
    else:
        print(state.value)
    return EXIT_OK


# -- ledger ------------------------------------------------------------------


def cmd_ledger_list(args) -> int:
    if args.ledger:
        try:
            ledger = UpdateLedger.from_json(_read_json(args.ledger, "ledger"), Registry())
        except (KeyError, TypeError, ValueError, vc.CredentialError) as exc:
            raise UsageError(f"{args.ledger}: not a ledger snapshot: {exc}") from None
    else:
        from .sim.scenario import ScenarioError, run_scenario

        try:
            ledger = run_scenario(_resolve_scenario(args.scenario)).world.ledger
        except ScenarioError as exc:
            raise UsageError(str(exc)) from None
    rows = []
    for handle in ledger.contracts():
        for entry in ledger.log(handle):
            cred = entry.event.credential
            if args.model in cred.supporting_models:
                rows.append((handle.contract_id, entry.event.sequence_no, cred))
    if args.json:
        print(json.dumps([{"contract": c, "seq": n, **vc.to_json(cred)} for c, n, cred in rows], indent=2))
        return EXIT_OK
    for contract, seq, cred in rows:
        cves = ",".join(cred.associated_cves) or "-"
        print(f"{contract[:10]}  #{seq:<3} {cred.version:<8} {cred.firmware_info.update_type:<9}"
              f"{cred.released_date.strftime('%Y-%m-%dT%H:%M:%SZ')}  {cves}")
    if not rows:
        print(f"no updates for model {args.model}")
    return EXIT_OK


# -- keys --------------------------------------------------------------------


def cmd_keys_gen(args) -> int:
    seed = None
    if args.seed is not None:
        try:
            seed = bytes.fromhex(args.seed)
        except ValueError:
            raise UsageError("--seed must be hexadecimal") from None
        if len(seed) != 32:
            raise UsageError("--seed must be 32 bytes (64 hex characters)")
    kp = crypto.generate_keypair(seed)
    print(json.dumps({"key_id": kp.key_id, "verification_key": kp.verification_key.hex(), "curve": "P-256"}))
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inverter-trust", description="Inverter firmware credentials and VPP trust states.")
    sub = parser.add_subparsers(dest="command", required=True)

    scenario = sub.add_parser("scenario", help="run simulation scenarios")
    ssub = scenario.add_subparsers(dest="scenario_command", required=True)
    run = ssub.add_parser("run", help="run a scenario file or bundled scenario name")
    run.add_argument("file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--capture", metavar="OUT.jsonl", help="write the network capture as JSON lines")
    run.add_argument("--save-ledger", metavar="OUT.json", help="write the final ledger snapshot")
    run.add_argument("--json", action="store_true", help="print the full report as JSON")
    run.set_defaults(func=cmd_scenario_run)
    lst = ssub.add_parser("list", help="list bundled scenarios")
    lst.set_defaults(func=cmd_scenario_list)

    bench = sub.add_parser("bench", help="measure DID document and credential costs")
    bench.add_argument("--iters", type=int, default=10_000)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--json", action="store_true")
    bench.set_defaults(func=cmd_bench)

    trust = sub.add_parser("trust", help="trust-state evaluation")
    tsub = trust.add_subparsers(dest="trust_command", required=True)
    ev = tsub.add_parser("eval", help="compute the trust state of an inverter credential")
    ev.add_argument("--vc", required=True, help="credential file (JSON document or compact token)")
    ev.add_argument("--updates", required=True, help="JSON list of {version, published, updateType}")
    group = ev.add_mutually_exclusive_group(required=True)
    group.add_argument("--threshold-days", type=float, help="one threshold for every update")
    group.add_argument("--policy", help="policy JSON with per-type thresholds")
    ev.add_argument("--json", action="store_true")
    ev.set_defaults(func=cmd_trust_eval)

    ledger = sub.add_parser("ledger", help="inspect published updates")
    lsub = ledger.add_subparsers(dest="ledger_command", required=True)
    ll = lsub.add_parser("list", help="list updates published for a model")
    ll.add_argument("--model", required=True)
    src = ll.add_mutually_exclusive_group()
    src.add_argument("--ledger", help="ledger snapshot written by 'scenario run --save-ledger'")
    src.add_argument("--scenario", default="happy_path", help="run this scenario and list its ledger (default: happy_path)")
    ll.add_argument("--json", action="store_true")
    ll.set_defaults(func=cmd_ledger_list)

    keys = sub.add_parser("keys", help="key utilities")
    ksub = keys.add_subparsers(dest="keys_command", required=True)
    gen = ksub.add_parser("gen", help="generate a P-256 key pair and print its public half")
    gen.add_argument("--seed", help="32-byte hex seed for a reproducible key")
    gen.set_defaults(func=cmd_keys_gen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"inverter-trust: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"inverter-trust: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
