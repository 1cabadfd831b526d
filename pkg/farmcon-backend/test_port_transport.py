import os
import random

import pytest

from errors import DeviceUnavailable, EndpointClosed
from services.port_transport import TIMEOUT, PortId, create_linked_pair, open_device
from services.simclock import SimClock, parse_rfc3339, rfc3339


# --- clock -----------------------------------------------------------------

def test_timers_fire_in_deadline_then_insertion_order():
    clock = SimClock()
    fired = []
    clock.call_later(2.0, lambda: fired.append("b"))
    clock.call_later(1.0, lambda: fired.append("a"))
    clock.call_later(2.0, lambda: fired.append("c"))
    clock.advance(1.5)
    assert fired == ["a"]
    clock.advance(1.0)
    assert fired == ["a", "b", "c"]
    assert clock.now() == 2.5


def test_cancelled_timer_does_not_fire():
    clock = SimClock()
    fired = []
    timer = clock.call_later(1.0, lambda: fired.append(1))
    timer.cancel()
    clock.advance(5)
    assert fired == []
    assert clock.next_deadline() is None


def test_timestamps_round_trip():
    clock = SimClock()
    clock.advance(61.25)
    text = clock.timestamp()
    assert text == "2003-03-24T00:01:01.250Z"
    assert rfc3339(parse_rfc3339(text)) == text


# --- linked pairs ----------------------------------------------------------

def test_linked_pair_carries_bytes_verbatim():
    clock = SimClock()
    a, b = create_linked_pair(clock)
    payload = bytes(range(256))
    a.write(payload)
    assert b.read_available(4096, 0.0) == payload
    assert a.read_available(16, 0.0) is TIMEOUT


def test_read_available_respects_max_bytes():
    a, b = create_linked_pair(SimClock())
    a.write(b"abcdef")
    assert b.read_available(4, 0.0) == b"abcd"
    assert b.read_available(4, 0.0) == b"ef"


def test_read_timeout_advances_simulated_time():
    clock = SimClock()
    a, b = create_linked_pair(clock)
    assert not b.read_available(16, 2.0)
    assert clock.now() == pytest.approx(2.0)


def test_read_wakes_when_a_timer_writes():
    clock = SimClock()
    a, b = create_linked_pair(clock)
    clock.call_later(0.5, lambda: a.write(b"late"))
    assert b.read_available(16, 2.0) == b"late"
    assert clock.now() == pytest.approx(0.5)


def test_closed_peer_raises_endpoint_closed():
    a, b = create_linked_pair(SimClock())
    a.close()
    with pytest.raises(EndpointClosed):
        b.read_available(16, 0.0)
    with pytest.raises(EndpointClosed):
        b.write(b"x")


def test_listener_sees_writes_synchronously():
    a, b = create_linked_pair(SimClock())
    seen = []
    b.listener = lambda ep: seen.append(ep.read_available(16, 0.0))
    a.write(b"\x05")
    assert seen == [b"\x05"]


@pytest.mark.parametrize("seed", range(5))
def test_random_chunking_keeps_byte_order(seed):
    rng = random.Random(seed)
    a, b = create_linked_pair(SimClock())
    sent = {id(a): bytearray(), id(b): bytearray()}
    got = {id(a): bytearray(), id(b): bytearray()}
    for _ in range(300):
        writer, reader = (a, b) if rng.random() < 0.5 else (b, a)
        if rng.random() < 0.6:
            chunk = bytes(rng.randrange(256) for _ in range(rng.randint(1, 64)))
            writer.write(chunk)
            sent[id(writer)] += chunk
        else:
            data = reader.read_available(rng.randint(1, 50), 0.0)
            if data:
                got[id(reader)] += data
    for end in (a, b):
        while True:
            data = end.read_available(4096, 0.0)
            if not data:
                break
            got[id(end)] += data
    assert got[id(b)] == sent[id(a)]
    assert got[id(a)] == sent[id(b)]


def test_pairs_do_not_cross_talk():
    clock = SimClock()
    pairs = [create_linked_pair(clock, f"port{i}") for i in range(8)]
    for i, (a, b) in enumerate(pairs):
        a.write(f"to-{i}".encode())
        b.write(f"from-{i}".encode())
    for i, (a, b) in enumerate(pairs):
        assert b.read_available(64, 0.0) == f"to-{i}".encode()
        assert a.read_available(64, 0.0) == f"from-{i}".encode()
        assert b.read_available(64, 0.0) is TIMEOUT


def test_port_id_label():
    assert PortId("consrv01", 7).label == "ttyS7"
    with pytest.raises(ValueError):
        PortId("consrv01", -1)


# --- devices ---------------------------------------------------------------

def test_named_pipe_is_opened_exclusively(tmp_path):
    fifo = tmp_path / "ttyS0"
    os.mkfifo(fifo)
    ep = open_device(str(fifo))
    try:
        with pytest.raises(DeviceUnavailable, match="busy"):
            open_device(str(fifo))
        ep.write(b"\x00\x05raw\r\n")
        assert ep.read_available(64, 1.0) == b"\x00\x05raw\r\n"
        assert not ep.read_available(64, 0.0)
    finally:
        ep.close()
    open_device(str(fifo)).close()


def test_missing_or_regular_path_is_unavailable(tmp_path):
    with pytest.raises(DeviceUnavailable):
        open_device(str(tmp_path / "nope"))
    plain = tmp_path / "plain"
    plain.write_text("x")
    with pytest.raises(DeviceUnavailable):
        open_device(str(plain))
