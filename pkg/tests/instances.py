"""Random trust-evaluation instances, in both the library form and the oracle's plain-dict form."""

import random
from datetime import timedelta

from inverter_trust import credentials as vc
from inverter_trust.codec import format_ts
from inverter_trust.registry import Did
from inverter_trust.trust import AvailableUpdate

from conftest import at

ISSUER = Did("sim", "issuer")


def random_instance(rng: random.Random):
    """Up to six updates, a random installed subset, random delays and zero to two resets."""
    T = timedelta(days=rng.choice([0, 1, 7, 14, 30]), hours=rng.choice([0, 0, 6]))
    n = rng.randrange(0, 7)
    t = at(rng.randrange(0, 30))
    updates = []
    for i in range(n):
        t += timedelta(days=rng.choice([0, 1, 5, 20, 60]), minutes=rng.choice([0, 0, 30]))
        updates.append(AvailableUpdate(f"v1.{i + 1}", t, rng.choice(["security", "feature"])))

    used: set = set()

    def unique(ts):
        while ts in used:
            ts += timedelta(seconds=1)
        used.add(ts)
        return ts

    history = [("v1.0", unique(at(-10)))]
    for u in updates:
        if rng.random() < 0.8:
            r = rng.random()
            if r < 0.15:
                delay = T
            elif r < 0.3:
                delay = T - timedelta(seconds=1)
            elif r < 0.45:
                delay = T + timedelta(seconds=1)
            else:
                delay = timedelta(hours=rng.randrange(0, 24 * 45))
            history.append((u.version, unique(u.published + delay)))
    if rng.random() < 0.2:
        history.append(("v9.9", unique(at(rng.randrange(0, 400)))))
    history.sort(key=lambda e: e[1], reverse=True)

    resets = []
    for _ in range(rng.choice([0, 0, 1, 2])):
        if updates and rng.random() < 0.3:
            resets.append(rng.choice(updates).published)
        else:
            resets.append(at(rng.randrange(-5, 400), hours=rng.randrange(24)))
    resets = sorted(set(resets), reverse=True)

    ident = vc.InverterIdentity(Did("sim", "inv"), "SN", at(-20), "M")
    status = vc.InverterStatus(Did("sim", "owner"), "active", history[0][0], True, False)
    cred = vc.InverterCredential("urn:vc:x", ISSUER, history[0][1], ident, status, tuple(history), tuple(resets))
    return cred, updates, T


def oracle_updates(updates):
    return [{"version": u.version, "published": format_ts(u.published)} for u in updates]
