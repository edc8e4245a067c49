"""Desk-scale timing and size measurements for DID documents and inverter credentials."""

from __future__ import annotations

import math
import random
import statistics
import time
from dataclasses import asdict, dataclass
from datetime import datetime
from typing import Callable, Optional

from .. import credentials as vc
from .. import crypto
from ..codec import ordered_json, parse_ts
from ..registry import Did, Registry

FULL_SAMPLE = 10_000

# Device attributes attested at manufacture; a typical residential hybrid unit.
SAMPLE_CAPABILITIES = (
    ("ratedPowerW", 5000),
    ("maxInputVoltageV", 600),
    ("phases", 1),
    ("mpptTrackers", 2),
    ("gridStandard", "IEEE1547-2018"),
    ("communication", "Modbus-TCP"),
    ("batteryReady", True),
    ("ipRating", "IP65"),
)
SAMPLE_HISTORY = (
    ("v1.0", "2022-01-29T02:56:43Z"),
    ("v1.8", "2022-11-17T16:34:20Z"),
    ("v2.0", "2023-04-01T08:11:12Z"),
)


@dataclass(frozen=True)
class Stats:
    median: float
    p95: float
    mean: float
    n: int

    @classmethod
    def of(cls, samples: list[float]) -> "Stats":
        ordered = sorted(samples)
        # nearest-rank percentile
        idx = max(0, math.ceil(0.95 * len(ordered)) - 1)
        return cls(statistics.median(ordered), ordered[idx], statistics.fmean(ordered), len(ordered))


@dataclass(frozen=True)
class BenchReport:
    iterations: int
    diddoc_gen_ms: Stats
    vc_size_bytes: Stats
    unsigned_json_bytes: Stats
    vc_gen_ms: Stats
    vc_verify_ms: Stats

    @property
    def low_sample(self) -> bool:
        """True when fewer iterations ran than needed for reportable medians."""
        return self.iterations < FULL_SAMPLE

    def to_json(self) -> dict:
        out = asdict(self)
        out["low_sample"] = self.low_sample
        return out

    def table(self) -> str:
        rows = [
            ("DIDdoc gen (ms)", self.diddoc_gen_ms),
            ("VC size (bytes)", self.vc_size_bytes),
            ("Unsigned JSON (bytes)", self.unsigned_json_bytes),
            ("VC gen (ms)", self.vc_gen_ms),
            ("VC verify (ms)", self.vc_verify_ms),
        ]
        lines = [f"{'metric':<24}{'median':>12}{'p95':>12}", "-" * 48]
        lines += [f"{name:<24}{s.median:>12.4f}{s.p95:>12.4f}" for name, s in rows]
        flag = " (low sample)" if self.low_sample else ""
        lines.append(f"iterations: {self.iterations}{flag}")
        return "\n".join(lines)


@dataclass
class Sample:
    registry: Registry
    issuer_kp: crypto.KeyPair
    issuer: Did
    owner: Did
    previous: vc.InverterCredential
    credential: vc.InverterCredential


def _issue_chain(kp, issuer, identity, owner, history, rng, final_issuance: datetime) -> tuple:
    previous = None
    for i, (version, ts) in enumerate(history):
        at = final_issuance if i == len(history) - 1 else parse_ts(ts)
        cred = vc.issue_inverter_credential(
            kp, issuer, identity, owner=owner, installed=(version, parse_ts(ts)), previous=previous, issuance_date=at, rng=rng
        )
        if i < len(history) - 1:
            previous = cred
    return previous, cred


def sample_credential(rng: Optional[random.Random] = None) -> Sample:
    """An inverter credential shaped like the worked three-install example."""
    rng = rng or random.Random(0)
    registry = Registry(rng)
    kp = crypto.keypair_from_rng(rng)
    issuer, _ = registry.create_did("sov", kp)
    owner, _ = registry.create_did("sov", crypto.keypair_from_rng(rng))
    inverter, _ = registry.create_did("sov", crypto.keypair_from_rng(rng), controller=owner)
    identity = vc.InverterIdentity(inverter, "123456789", parse_ts("2021-01-01T00:01:02Z"), "SP-PRO-5K", SAMPLE_CAPABILITIES)
    previous, cred = _issue_chain(kp, issuer, identity, owner, SAMPLE_HISTORY, rng, parse_ts("2023-04-01T10:11:12Z"))
    return Sample(registry, kp, issuer, owner, previous, cred)


def _timed(fn: Callable[[], object]) -> float:
    start = time.perf_counter()
    fn()
    return (time.perf_counter() - start) * 1000.0


def run_bench(iterations: int = FULL_SAMPLE, seed: int = 0) -> BenchReport:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = random.Random(seed)
    sample = sample_credential(rng)
    keys = [crypto.keypair_from_rng(rng) for _ in range(min(iterations, 256))]
    registry = Registry(rng)
    prev, identity = sample.previous, sample.credential.immutable
    last_install = (SAMPLE_HISTORY[-1][0], parse_ts(SAMPLE_HISTORY[-1][1]))
    issued_at = sample.credential.issuance_date

    diddoc, size, unsigned, gen, verify = [], [], [], [], []
    for i in range(iterations):
        kp = keys[i % len(keys)]
        diddoc.append(_timed(lambda: registry.create_did("sov", kp, [("UpdateServer", "https://updates.example")])))

        holder = []

        def issue():
            holder.append(
                vc.issue_inverter_credential(
                    sample.issuer_kp,
                    sample.issuer,
                    identity,
                    owner=sample.owner,
                    installed=last_install,
                    previous=prev,
                    issuance_date=issued_at,
                    rng=rng,
                )
            )

        gen.append(_timed(issue))
        token = vc.compact_encoding(holder[0])
        size.append(float(len(token)))
        unsigned.append(float(len(ordered_json(holder[0].to_payload()))))

        def check():
            result = vc.verify_credential(vc.decode(token), sample.registry)
            if not result.valid:
                raise AssertionError(result.detail)

        verify.append(_timed(check))

    return BenchReport(iterations, Stats.of(diddoc), Stats.of(size), Stats.of(unsigned), Stats.of(gen), Stats.of(verify))
