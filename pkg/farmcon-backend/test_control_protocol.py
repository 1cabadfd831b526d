from dataclasses import replace

import pytest

from errors import BadRequest
from services import registry as reg_mod
from services.control_protocol import (
    CommandHandler,
    Reply,
    ReplyLine,
    decode_data,
    encode_data,
    encode_request,
    format_record,
    parse_reply_line,
    parse_request,
)
from services.consoled import SessionMode
from services.registry import ConsoleWiring

from conftest import build_farm, topology_text


@pytest.fixture
def handler(farm):
    return CommandHandler(farm.daemon, farm.resets, farm.watchdog, farm.errors)


def ask(handler, principal, verb, *args):
    return handler.handle(principal, encode_request(verb, *args))


# --- wire helpers ----------------------------------------------------------

def test_request_fields_are_tab_separated():
    assert encode_request("reset", "lxb0042", "hung\tafter\ntest") == "RESET\tlxb0042\thung after test"
    assert parse_request("list\thosts\r\n") == ("LIST", ["hosts"])
    with pytest.raises(BadRequest):
        parse_request("   ")


def test_requests_may_be_separated_by_spaces():
    assert parse_request("LIST hosts") == ("LIST", ["hosts"])
    assert parse_request("attach  lxb0001   ro\r\n") == ("ATTACH", ["lxb0001", "ro"])
    assert parse_request("RESET lxb0042 hung after  kernel test ") == ("RESET", ["lxb0042", "hung after  kernel test"])
    assert parse_request("SUBSCRIBE lxb0001 /Kernel panic/") == ("SUBSCRIBE", ["lxb0001", "/Kernel panic/"])
    assert parse_request("DETECT") == ("DETECT", [])
    assert parse_request("RESET lxb0042") == ("RESET", ["lxb0042"])


def test_reply_lines():
    assert Reply([("a", "b")]).lines() == ["+ a\tb", "OK"]
    assert Reply(error_code="denied", error_message="no\nway").lines() == ["ERR denied no way"]
    assert format_record(("x\ty", 3)) == "+ x y\t3"
    assert parse_reply_line("+ a\tb") == ReplyLine("record", ("a", "b"))
    assert parse_reply_line("OK") == ReplyLine("ok")
    assert parse_reply_line("OK s12") == ReplyLine("ok", ("s12",))
    assert parse_reply_line("ERR busy port held read-write by admin") == ReplyLine(
        "err", code="busy", message="port held read-write by admin"
    )
    with pytest.raises(ValueError):
        parse_reply_line("hello")


def test_data_frames():
    assert encode_data(b"ls\r") == b"D 3\nls\r"
    assert decode_data(b"D 0\n") == b""
    assert decode_data(encode_data(b"\x00\n\xff")) == b"\x00\n\xff"
    for bad in (b"D 3\nab", b"X 1\na", b"D one\na", b"D 1"):
        with pytest.raises(BadRequest):
            decode_data(bad)


# --- verbs -----------------------------------------------------------------

def test_list_hosts_shows_only_authorized_hosts(handler):
    ops = ask(handler, "ops", "LIST", "hosts")
    assert ops.ok and [r[0] for r in ops.records] == ["lxb0000", "lxb0001", "lxb0002", "lxb0003"]
    assert ops.records[1] == ("lxb0001", "ttyS1", "chain0:0/1")
    assert [r[0] for r in ask(handler, "guest", "LIST", "hosts").records] == ["lxb0001"]
    assert ask(handler, "mallory", "LIST", "hosts").records == []


def test_list_ports_and_sessions_are_admin_only(handler, farm):
    farm.daemon.attach("ops", "lxb0002", SessionMode.READ_WRITE)
    assert ask(handler, "ops", "LIST", "ports").error_code == "denied"
    ports = ask(handler, "admin", "LIST", "ports")
    assert ports.records[2][3] == "ops"
    sessions = ask(handler, "admin", "LIST", "sessions")
    assert [(r[1], r[2], r[3]) for r in sessions.records] == [("ops", "lxb0002", "rw")]
    assert ask(handler, "admin", "LIST", "cables").error_code == "bad-request"
    assert ask(handler, "admin", "LIST").error_code == "bad-request"


def test_reset_reports_the_audit_event(handler, farm):
    reply = ask(handler, "ops", "RESET", "lxb0001", "hung after kernel test")
    assert reply.ok
    assert "RESET principal=ops host=lxb0001 addr=0/1 outcome=Ok" in reply.records[0][0]
    assert farm.harness.emulator.pulse_count() == 1

    again = ask(handler, "ops", "RESET", "lxb0001", "still hung")
    assert again.error_code == "rate-limited"
    assert "outcome=RateLimited" in again.records[0][0]

    denied = ask(handler, "guest", "RESET", "lxb0001", "curious")
    assert (denied.error_code, denied.error_message) == ("denied", "lxb0001: not authorized to reset")
    assert ask(handler, "ops", "RESET", "lxb0002").error_code == "bad-request"
    assert ask(handler, "ops", "RESET", "lxb0002", "  ").error_code == "bad-request"
    assert farm.harness.emulator.pulse_count() == 1


def test_reset_transport_failure(handler, farm):
    farm.harness.corrupt_next_relay_write()
    reply = ask(handler, "admin", "RESET", "lxb0003", "test")
    assert (reply.error_code, reply.error_message) == ("transport", "lxb0003: relay box answered NAK")
    assert farm.errors.get_error_stats()["by_type"] == {"Nak": 1}


def test_log_needs_read_access(handler, farm):
    lines = ask(handler, "guest", "LOG", "lxb0001")
    assert lines.ok and lines.records[-1][3] == "lxb0001 login: "
    assert ask(handler, "guest", "LOG", "lxb0002").error_code == "denied"
    assert ask(handler, "admin", "LOG", "lxb9999").error_code == "not-found"
    assert ask(handler, "guest", "LOG", "lxb0001", "2099-01-01T00:00:00.000Z").records == []


def test_detection_is_admin_only(handler, farm):
    report = ask(handler, "admin", "DETECT", "consrv01")
    assert report.ok
    header, *ports = report.records
    assert header == ("detected", "consrv01", farm.clock.timestamp())
    assert ports == [("port", str(i), f"lxb{i:04d}") for i in range(4)]
    assert ask(handler, "ops", "DETECT", "consrv01").error_code == "denied"
    assert ask(handler, "admin", "DETECT", "consrv02").error_code == "not-found"
    assert ask(handler, "admin", "DETECT", "consrv01", "ack=x").error_code == "bad-request"


def _swap_ports(registry, a, b):
    records = []
    for rec in registry.records:
        if rec.host == a:
            rec = replace(rec, console=ConsoleWiring(rec.console.server_id, registry.record(b).console.port_index))
        elif rec.host == b:
            rec = replace(rec, console=ConsoleWiring(rec.console.server_id, registry.record(a).console.port_index))
        records.append(rec)
    return registry.with_records(records)


def test_detection_conflicts_need_acknowledgement(tmp_path):
    farm = build_farm(topology=topology_text(3, resets=False))
    farm.boot()
    handler = CommandHandler(farm.daemon, farm.resets, farm.watchdog, farm.errors, str(tmp_path))
    farm.daemon.update_registry(_swap_ports(farm.daemon.registry, "lxb0001", "lxb0002"))
    before = farm.daemon.registry

    reply = ask(handler, "admin", "DETECT", "consrv01", "apply")
    assert reply.error_code == "conflict"
    assert ("conflict", "1", "lxb0002", "lxb0001", "-") in reply.records
    assert ("conflict", "2", "lxb0001", "lxb0002", "-") in reply.records
    assert farm.daemon.registry == before

    reply = ask(handler, "admin", "DETECT", "consrv01", "apply", "ack=1", "ack=2")
    assert reply.ok
    assert [r[:2] for r in farm.daemon.list_hosts()] == [("lxb0000", "ttyS0"), ("lxb0001", "ttyS1"), ("lxb0002", "ttyS2")]
    saved = reg_mod.load(tmp_path)
    assert saved.record("lxb0001").console.port_index == 1


def test_acknowledging_a_host_with_reset_wiring_is_refused(handler, farm):
    farm.daemon.update_registry(_swap_ports(farm.daemon.registry, "lxb0001", "lxb0002"))
    reply = ask(handler, "admin", "DETECT", "consrv01", "apply", "ack=1")
    assert reply.error_code == "conflict"
    assert "has reset wiring" in reply.error_message


def test_grant_and_revoke(tmp_path, farm):
    handler = CommandHandler(farm.daemon, farm.resets, farm.watchdog, farm.errors, str(tmp_path))
    assert ask(handler, "ops", "GRANT", "guest", "console-ro", "lxb0002").error_code == "denied"
    assert ask(handler, "admin", "GRANT", "guest", "console-ro", "lxb0002").ok
    assert [r[0] for r in ask(handler, "guest", "LIST", "hosts").records] == ["lxb0001", "lxb0002"]
    assert any(g.principal == "guest" and g.host_pattern == "lxb0002" for g in reg_mod.load(tmp_path).grants)

    assert ask(handler, "admin", "REVOKE", "guest", "console-ro", "lxb0002").ok
    assert [r[0] for r in ask(handler, "guest", "LIST", "hosts").records] == ["lxb0001"]
    assert ask(handler, "admin", "GRANT", "guest", "sudo", "lxb0002").error_code == "bad-request"
    assert ask(handler, "admin", "GRANT", "bad name", "console", "lxb0002").error_code == "bad-request"
    assert ask(handler, "admin", "GRANT", "guest").error_code == "bad-request"


def test_watchdog_verbs(handler, farm):
    farm.run(10)
    status = ask(handler, "ops", "WATCHDOG", "status")
    assert [r[:2] for r in status.records] == [(h, "Healthy") for h in farm.hosts]
    cleared = ask(handler, "admin", "WATCHDOG", "clear", "lxb0001")
    assert cleared.ok and "outcome=NoOp" in cleared.records[0][0]
    assert ask(handler, "ops", "WATCHDOG", "clear", "lxb0001").error_code == "denied"
    assert ask(handler, "ops", "WATCHDOG", "pause").error_code == "bad-request"
    assert CommandHandler(farm.daemon, farm.resets).handle("ops", "WATCHDOG\tstatus").error_code == "bad-request"


def test_alarms_and_audit(handler, farm):
    farm.errors.raise_alarm("console log sink failed", host="-")
    alarms = ask(handler, "ops", "ALARMS")
    assert [r[1:] for r in alarms.records] == [("-", "console log sink failed")]
    ask(handler, "ops", "RESET", "lxb0001", "one")
    ask(handler, "admin", "RESET", "lxb0002", "two")
    assert len(ask(handler, "ops", "AUDIT").records) == 2
    only = ask(handler, "ops", "AUDIT", "principal=admin")
    assert len(only.records) == 1 and "host=lxb0002" in only.records[0][0]
    assert ask(handler, "ops", "AUDIT", "colour=red").error_code == "bad-request"
    assert ask(handler, "ops", "AUDIT", "lxb0001").error_code == "bad-request"


def test_unknown_verb_and_internal_errors(handler, farm, monkeypatch):
    assert ask(handler, "ops", "REBOOT", "lxb0001").lines() == ["ERR bad-request unknown verb REBOOT"]

    def boom():
        raise RuntimeError("registry vanished")

    monkeypatch.setattr(farm.daemon, "list_hosts", boom)
    reply = ask(handler, "ops", "LIST", "hosts")
    assert (reply.error_code, reply.error_message) == ("internal", "registry vanished")
    assert farm.errors.get_error_stats()["total_errors"] == 1


def test_reads_do_not_change_state(handler, farm):
    digest = farm.daemon.state_digest()
    for verb, *args in [("LIST", "hosts"), ("LIST", "ports"), ("LIST", "sessions"), ("LOG", "lxb0001"),
                        ("AUDIT",), ("WATCHDOG", "status"), ("ALARMS",)]:
        assert ask(handler, "admin", verb, *args).ok
    assert farm.daemon.state_digest() == digest


def test_plain_text_requests(handler, farm):
    hosts = handler.handle("ops", "LIST hosts")
    assert hosts.ok and [r[0] for r in hosts.records] == farm.hosts
    reply = handler.handle("ops", "RESET lxb0001 stuck in fsck after upgrade")
    assert reply.ok and 'reason="stuck in fsck after upgrade"' in reply.records[0][0]
    assert handler.handle("ops", "RESET lxb0002").error_code == "bad-request"


def test_detect_defaults_to_this_server(handler):
    assert handler.handle("admin", "DETECT").records[1:] == [("port", str(i), f"lxb{i:04d}") for i in range(4)]
    assert ask(handler, "admin", "DETECT", "apply").ok
    assert handler.handle("ops", "DETECT").error_code == "denied"
