import random
from datetime import timedelta

import pytest

from inverter_trust.sim.adversary import flip_bit
from inverter_trust.sim.bench import Stats, run_bench, sample_credential
from inverter_trust.sim.clock import ClockError, SimClock
from inverter_trust.sim.world import WorldError

from conftest import T0, make_world


def test_clock_monotonic():
    c = SimClock(T0)
    assert c() == c.now() == T0
    c.advance(timedelta(hours=1))
    c.advance_to(T0 + timedelta(hours=1))
    with pytest.raises(ClockError):
        c.advance_to(T0)
    with pytest.raises(ClockError):
        c.advance(timedelta(seconds=-1))


def test_stats_nearest_rank():
    s = Stats.of([5.0, 1.0, 3.0, 2.0, 4.0])
    assert s.median == 3.0 and s.p95 == 5.0 and s.n == 5
    assert Stats.of(list(map(float, range(1, 101)))).p95 == 95.0


def test_bench_single_iteration_flagged():
    report = run_bench(1, seed=0)
    assert report.iterations == 1 and report.low_sample
    assert report.to_json()["low_sample"] is True
    assert "VC size" in report.table() or "vc" in report.table().lower()


def test_sample_credential_shape():
    s = sample_credential(random.Random(0))
    cred = s.credential
    assert [v for v, _ in cred.firmware_history] == ["v2.0", "v1.8", "v1.0"]
    assert cred.immutable.model == "SP-PRO-5K" and cred.immutable.serial_no == "123456789"
    assert len(cred.immutable.capabilities) == 8


def test_flip_bit():
    assert flip_bit(b"\x00\x00", 9) == b"\x00\x02"
    assert flip_bit(flip_bit(b"abc", 5), 5) == b"abc"


def test_world_lookup_errors():
    w = make_world()
    for fn in (w.manufacturer, w.owner, w.operator, w.inverter):
        with pytest.raises(WorldError):
            fn("nobody")
    with pytest.raises(WorldError):
        w.manufacture("acme", "inv1")
    with pytest.raises(WorldError):
        w.offline_update(w.inverter("inv1"), "v7.0")


def test_adversary_holds_no_honest_secrets():
    w = make_world()
    w.add_owner("mallory", adversary=True)
    mallory = w.owner("mallory")
    honest = {p.kp.signing_key for p in list(w.manufacturers.values()) + [w.owner("alice"), w.operator("vpp")]}
    honest |= {inv._device_secret for inv in w.inverters.values()}
    mine = {getattr(mallory, "kp").signing_key}
    held = {v for v in vars(mallory).values() if isinstance(v, bytes)}
    assert not (mine | held) & honest
