import random
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import HealthCheck, settings

from inverter_trust import crypto
from inverter_trust.sim.world import InverterPlan, World

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

T0 = datetime(2022, 1, 1, tzinfo=timezone.utc)


def at(days: float = 0, **kw) -> datetime:
    return T0 + timedelta(days=days, **kw)


@pytest.fixture
def rng():
    return random.Random(1234)


@pytest.fixture
def keypair(rng):
    return crypto.keypair_from_rng(rng)


def make_world(seed: int = 7, *, owner: str = "alice", auto_install: bool = True, model: str = "SP-PRO") -> World:
    """Manufacturer ``acme``, one owner, one operator and inverter ``inv1`` handed to the owner."""
    w = World.create(seed, T0)
    w.add_manufacturer("acme")
    w.add_owner(owner, adversary=owner == "mallory")
    w.add_operator("vpp")
    w.declare_inverter(InverterPlan("inv1", "acme", model, "SN-1", auto_install=auto_install))
    w.manufacture("acme", "inv1")
    w.clock.advance(timedelta(days=1))
    w.manufacturer("acme").transfer_ownership(w.inverter("inv1"), w.owner(owner).did)
    return w


def publish(w: World, version: str, update_type: str = "security", models=("SP-PRO",), cves=()):
    image = w.firmware_image("acme", version, list(models))
    return w.manufacturer("acme").publish_firmware(image, update_type, cves)


@pytest.fixture
def world():
    return make_world()
