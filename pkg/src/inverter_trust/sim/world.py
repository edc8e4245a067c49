"""A seeded simulation world: shared registry, ledger, network and the actors on it."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Optional

from .. import credentials as vc
from .. import crypto
from ..actors import FirmwareImage, InstallOutcome, Manufacturer, Owner, SmartInverter, UpdateServer, VppOperator
from ..ledger import UpdateLedger
from ..network import Network
from ..registry import Registry
from ..trust import TrustPolicy
from .clock import SimClock


class WorldError(Exception):
    pass


class Adversary(Owner):
    """An owner-like party with its own DID and keys and nothing else.

    It may legitimately own inverters (a dishonest owner) and can read
    every captured network payload, but never holds another party's
    private key or any inverter's device secret.
    """


@dataclass
class InverterPlan:
    name: str
    manufacturer: str
    model: str
    serial: str
    factory_version: str = "v1.0"
    auto_install: bool = True
    capabilities: tuple = ()


@dataclass
class World:
    seed: int
    clock: SimClock
    rng: random.Random = field(init=False)
    registry: Registry = field(init=False)
    ledger: UpdateLedger = field(init=False)
    network: Network = field(init=False)
    manufacturers: dict[str, Manufacturer] = field(default_factory=dict)
    owners: dict[str, Owner] = field(default_factory=dict)
    operators: dict[str, VppOperator] = field(default_factory=dict)
    inverters: dict[str, SmartInverter] = field(default_factory=dict)
    inverter_plans: dict[str, InverterPlan] = field(default_factory=dict)
    images: dict[tuple[str, str], FirmwareImage] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.rng = random.Random(self.seed)
        self.registry = Registry(self.rng)
        self.ledger = UpdateLedger(self.registry, self.rng)
        self.network = Network(self.clock.now)

    @classmethod
    def create(cls, seed: int, start: datetime) -> "World":
        return cls(seed, SimClock(start))

    @property
    def now(self) -> datetime:
        return self.clock.now()

    # declarations

    def add_manufacturer(self, name: str, policy: Optional[dict] = None) -> Manufacturer:
        server = UpdateServer(f"{name}-updates")
        server.attach(self.network)
        m = Manufacturer(
            name,
            self.registry,
            self.ledger,
            server,
            self.network,
            self.clock.now,
            self.rng,
            TrustPolicy.from_json(policy) if policy else None,
        )
        self.manufacturers[name] = m
        return m

    def add_owner(self, name: str, adversary: bool = False) -> Owner:
        cls = Adversary if adversary else Owner
        o = cls(name, self.registry, self.network, self.clock.now, self.rng)
        self.owners[name] = o
        return o

    def add_operator(self, name: str, policy: Optional[dict] = None) -> VppOperator:
        op = VppOperator(
            name,
            self.registry,
            self.ledger,
            self.network,
            self.clock.now,
            TrustPolicy.from_json(policy) if policy else None,
            self.rng,
        )
        self.operators[name] = op
        return op

    def declare_inverter(self, plan: InverterPlan) -> None:
        self.inverter_plans[plan.name] = plan

    # lookups

    def manufacturer(self, name: str) -> Manufacturer:
        try:
            return self.manufacturers[name]
        except KeyError:
            raise WorldError(f"no manufacturer named {name!r}") from None

    def owner(self, name: str) -> Owner:
        try:
            return self.owners[name]
        except KeyError:
            raise WorldError(f"no owner named {name!r}") from None

    def operator(self, name: str) -> VppOperator:
        try:
            return self.operators[name]
        except KeyError:
            raise WorldError(f"no operator named {name!r}") from None

    def inverter(self, name: str) -> SmartInverter:
        try:
            return self.inverters[name]
        except KeyError:
            raise WorldError(f"inverter {name!r} has not been manufactured") from None

    def manufacturer_of(self, inverter: SmartInverter) -> Manufacturer:
        for m in self.manufacturers.values():
            if m.did == inverter.manufacturer_did:
                return m
        raise WorldError(f"no manufacturer for {inverter.name}")

    def owner_of(self, inverter: SmartInverter) -> Optional[Owner]:
        controller = self.registry.resolve(inverter.did).controller
        for o in self.owners.values():
            if o.did == controller:
                return o
        return None

    # manufacturer actions

    def manufacture(self, manufacturer: str, inverter: str) -> SmartInverter:
        plan = self.inverter_plans.get(inverter)
        if plan is None:
            raise WorldError(f"inverter {inverter!r} is not declared")
        if plan.manufacturer != manufacturer:
            raise WorldError(f"{inverter} is declared for {plan.manufacturer}, not {manufacturer}")
        if inverter in self.inverters:
            raise WorldError(f"{inverter} already manufactured")
        m = self.manufacturer(manufacturer)
        inv = m.manufacture_inverter(
            inverter,
            plan.model,
            plan.serial,
            factory_version=plan.factory_version,
            capabilities=plan.capabilities,
            auto_install=plan.auto_install,
        )
        self.inverters[inverter] = inv
        return inv

    def firmware_image(self, manufacturer: str, version: str, models: list[str], size: int = 256) -> FirmwareImage:
        key = (manufacturer, version)
        if key in self.images:
            raise WorldError(f"{manufacturer} already built {version}")
        header = f"FW|{manufacturer}|{version}|{','.join(models)}|".encode()
        image = FirmwareImage(tuple(models), version, header + crypto.random_bytes(size, self.rng))
        self.images[key] = image
        return image

    def published_firmware(self, manufacturer: Manufacturer) -> list[vc.FirmwareCredential]:
        now = self.now
        return [
            e.event.credential for e in self.ledger.log(manufacturer.contract) if e.event.credential.released_date <= now
        ]

    def reinstall_all(self, inverter: SmartInverter, spacing: timedelta = timedelta(minutes=5)) -> list[InstallOutcome]:
        """Install every published release newer than the running firmware, oldest version first.

        Installs are ``spacing`` apart on the simulated clock so each one
        gets its own install time.
        """
        out: list[InstallOutcome] = []
        releases = sorted(self.published_firmware(self.manufacturer_of(inverter)), key=lambda f: vc.version_key(f.version))
        for fw in releases:
            if inverter.model in fw.supporting_models and vc.is_newer(fw.version, inverter.installed_version):
                if out:
                    self.clock.advance(spacing)
                out.append(inverter.install_update(fw))
        return out

    def offline_update(self, inverter: SmartInverter, version: str) -> InstallOutcome:
        m = self.manufacturer_of(inverter)
        image = self.images.get((m.name, version))
        entry = m.published.get(version)
        if image is None or entry is None:
            raise WorldError(f"{m.name} has not published {version}")
        return inverter.offline_update(image.binary, entry[0])

    # observations

    def owner_secrets(self) -> list[bytes]:
        """Byte strings that must never appear in clear on the wire."""
        out: list[bytes] = []
        for inv in self.inverters.values():
            out.append(inv._device_secret)
            for cred in inv.wallet.inverter_credentials():
                out.append(vc.compact_encoding(cred))
                out.append(vc.canonical_bytes(cred))
        for o in self.owners.values():
            for cred in o.relayed:
                out.append(vc.compact_encoding(cred))
        parties: list[Any] = list(self.manufacturers.values()) + list(self.owners.values()) + list(self.operators.values())
        parties += list(self.inverters.values())
        for p in parties:
            out.append(p.kp.signing_key)
        return out
