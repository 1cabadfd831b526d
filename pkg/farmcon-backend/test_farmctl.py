import base64
import io
import stat

import httpx
import pytest

import farmctl
from errors import AuthFailed, BadRequest, FarmError, RemoteError
from farmctl import CliConfig, ControlClient, arguments_parse, emit, main, render_console
from services.authchan import ChallengeStore, DigestTestScheme, parse_credential
from services.registry import Registry, parse_report
from services.simclock import SimClock

from conftest import principal_keys, standard_keys


class FakeWs:
    def __init__(self, replies=()):
        self.replies = list(replies)
        self.sent = []
        self.closed = False

    def send(self, message):
        self.sent.append(message)

    def recv(self):
        return self.replies.pop(0)

    def close(self):
        self.closed = True


class HandshakeWs(FakeWs):
    """Plays the server side of the challenge handshake"""

    def __init__(self):
        super().__init__()
        self.store = ChallengeStore("consrv01", SimClock(), DigestTestScheme())
        self.registry = Registry(keys=standard_keys())
        self.challenge = self.store.issue_challenge()
        self.replies.append(self.challenge.wire())

    def send(self, message):
        super().send(message)
        credential = parse_credential(message)
        try:
            self.replies.append(f"OK {self.store.authenticate(self.challenge, credential, self.registry)}")
        except FarmError as e:
            self.replies.append(f"ERR {e.code} {e.message}")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("FARMCTL_SERVER", "FARMCTL_PRINCIPAL", "FARMCTL_KEY", "FARMCTL_SCHEME", "FARMCTL_FORMAT"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def fake_server(monkeypatch):
    """Route main() to a FakeWs; returns (ws, configs seen)"""
    ws = FakeWs()
    configs = []

    def fake_connect(config):
        configs.append(config)
        return ControlClient(ws, config.principal)

    monkeypatch.setattr(ControlClient, "connect", staticmethod(fake_connect))
    return ws, configs


def key_file(tmp_path, principal):
    path = tmp_path / f"{principal}.key"
    path.write_text(base64.b64encode(principal_keys(principal)[0]).decode() + "\n")
    return str(path)


# --- arguments and config ---------------------------------------------------

def test_usage_errors_exit_2(capsys):
    assert main(["reset", "lxb0001"]) == 2
    assert main(["--format", "xml", "list", "hosts"]) == 2
    assert main(["list", "cables"]) == 2
    assert main([]) == 2
    assert "farmctl:" in capsys.readouterr().err


def test_global_principal_survives_verb_arguments():
    args = arguments_parse(["--principal", "admin", "grant", "guest", "console-ro", "lxb0002"])
    assert (args.principal, args.grantee) == ("admin", "guest")
    args = arguments_parse(["audit", "--principal", "ops"])
    assert (args.principal, args.principal_filter) == (None, "ops")


def test_config_from_environment(monkeypatch):
    monkeypatch.setenv("FARMCTL_SERVER", "ws://consrv01:9000/")
    monkeypatch.setenv("FARMCTL_PRINCIPAL", "ops")
    monkeypatch.setenv("FARMCTL_FORMAT", "tsv")
    config = CliConfig.from_args(arguments_parse(["list", "hosts"]))
    assert config.principal == "ops" and config.output_format == "tsv"
    assert config.control_url == "ws://consrv01:9000/ws/control"
    assert config.health_url == "http://consrv01:9000/health"
    assert CliConfig("wss://cs", "ops", None).health_url == "https://cs/health"
    assert CliConfig.from_args(arguments_parse(["--server", "ws://other", "list", "hosts"])).server == "ws://other"
    with pytest.raises(BadRequest):
        CliConfig("ws://cs", "ops", None, output_format="json")


# --- output -----------------------------------------------------------------

def test_emit_formats():
    records = [("lxb0001", "ttyS1", "chain0:0/1"), ("lxb0002", "ttyS10", "-")]
    out = io.StringIO()
    emit(records, "human", out)
    assert out.getvalue() == "lxb0001  ttyS1   chain0:0/1\nlxb0002  ttyS10  -\n"
    out = io.StringIO()
    emit(records, "tsv", out)
    assert out.getvalue() == "lxb0001\tttyS1\tchain0:0/1\nlxb0002\tttyS10\t-\n"
    out = io.StringIO()
    emit([], "human", out)
    assert out.getvalue() == ""


def test_render_console_keeps_terminal_bytes():
    assert render_console(b"ok\r\n\x1b[0m\t") == b"ok\r\n\x1b[0m\t"
    assert render_console(b"\x00\x07\xff") == b"\\x00\\x07\\xFF"


# --- control client ---------------------------------------------------------

def test_request_collects_records():
    client = ControlClient(FakeWs([b"D 1\nx", "+ a\tb", "+ c", "OK"]), "ops")
    records, fields = client.request("LIST", "hosts")
    assert records == [("a", "b"), ("c",)] and fields == ()
    assert client.ws.sent == ["LIST\thosts"]


def test_request_raises_remote_errors():
    client = ControlClient(FakeWs(["+ partial", "ERR rate-limited lxb0001: host was reset too recently"]), "ops")
    with pytest.raises(RemoteError) as err:
        client.request("RESET", "lxb0001", "again")
    assert err.value.code == "rate-limited" and err.value.exit_code == 7
    assert err.value.records == [("partial",)]


def test_connect_signs_the_challenge(tmp_path, monkeypatch):
    ws = HandshakeWs()
    monkeypatch.setattr(farmctl, "connect", lambda url, open_timeout: ws)
    config = CliConfig("ws://cs", "ops", key_file(tmp_path, "ops"), scheme="digest-test")
    with ControlClient.connect(config) as client:
        assert client.principal == "ops"
    assert ws.sent[0].startswith("AUTH ops ") and ws.closed


def test_connect_with_the_wrong_key_is_denied(tmp_path, monkeypatch):
    ws = HandshakeWs()
    monkeypatch.setattr(farmctl, "connect", lambda url, open_timeout: ws)
    config = CliConfig("ws://cs", "ops", key_file(tmp_path, "mallory"), scheme="digest-test")
    with pytest.raises(RemoteError) as err:
        ControlClient.connect(config)
    assert err.value.exit_code == AuthFailed.exit_code
    assert ws.closed


def test_connect_needs_a_readable_key(tmp_path):
    with pytest.raises(BadRequest):
        ControlClient.connect(CliConfig("ws://cs", "ops", None))
    bad = tmp_path / "bad.key"
    bad.write_text("not base64!")
    with pytest.raises(BadRequest):
        ControlClient.connect(CliConfig("ws://cs", "ops", str(bad)))


def test_unreachable_server_is_a_transport_error(tmp_path, monkeypatch):
    def refuse(url, open_timeout):
        raise ConnectionRefusedError("refused")

    monkeypatch.setattr(farmctl, "connect", refuse)
    argv = ["--key", key_file(tmp_path, "ops"), "--scheme", "digest-test", "list", "hosts"]
    assert main(argv, out=io.StringIO()) == 6


# --- verbs through main -----------------------------------------------------

def test_list_hosts(fake_server):
    ws, _ = fake_server
    ws.replies += ["+ lxb0001\tttyS1\tchain0:0/1", "OK"]
    out = io.StringIO()
    assert main(["--format", "tsv", "list", "hosts"], out=out) == 0
    assert out.getvalue() == "lxb0001\tttyS1\tchain0:0/1\n"
    assert ws.sent == ["LIST\thosts"] and ws.closed


def test_denied_reset_exits_3(fake_server, capsys):
    ws, _ = fake_server
    ws.replies += ["+ audit line", "ERR denied lxb0001: not authorized to reset"]
    assert main(["reset", "lxb0001", "--reason", "curious"]) == 3
    assert ws.sent == ["RESET\tlxb0001\tcurious"]
    assert "not authorized to reset" in capsys.readouterr().err


def test_empty_reason_never_reaches_the_server(fake_server):
    ws, _ = fake_server
    assert main(["reset", "lxb0001", "--reason", "  "]) == 2
    assert ws.sent == []


def test_detect_prints_conflicts_and_exits_8(fake_server):
    ws, _ = fake_server
    ws.replies += [
        "+ detected\tconsrv01\t2003-03-24T00:00:10.000Z",
        "+ port\t0\tlxb0000",
        "+ port\t1\tlxb0001",
        "+ conflict\t1\tlxb0002\tlxb0001\t-",
        "ERR conflict 1 unresolved conflicts",
    ]
    out = io.StringIO()
    assert main(["--principal", "admin", "detect", "consrv01", "--apply", "--force-acknowledge", "2"], out=out) == 8
    assert ws.sent == ["DETECT\tconsrv01\tapply\tack=2"]
    assert out.getvalue().splitlines() == [
        "detected consrv01 2003-03-24T00:00:10.000Z",
        "port  0  lxb0000",
        "port  1  lxb0001",
        "conflict port 1: was lxb0002, saw lxb0001",
    ]


def test_detect_tsv_reads_back_as_a_report(fake_server):
    ws, _ = fake_server
    ws.replies += [
        "+ detected\tconsrv01\t2003-03-24T00:00:10.000Z",
        "+ port\t0\tlxb0000",
        "+ port\t1\tunknown",
        "OK",
    ]
    out = io.StringIO()
    assert main(["--principal", "admin", "--format", "tsv", "detect", "consrv01"], out=out) == 0
    assert out.getvalue().splitlines()[0] == "detected\tconsrv01\t2003-03-24T00:00:10.000Z"
    report = parse_report(out.getvalue())
    assert report.server_id == "consrv01"
    assert report.entries == ((0, "lxb0000"), (1, None))


def test_grant_authenticates_as_the_caller(fake_server):
    ws, configs = fake_server
    ws.replies += ["OK"]
    assert main(["--principal", "admin", "grant", "guest", "console-ro", "lxb0002"]) == 0
    assert configs[0].principal == "admin"
    assert ws.sent == ["GRANT\tguest\tconsole-ro\tlxb0002"]


def test_audit_filters(fake_server):
    ws, _ = fake_server
    ws.replies += ["OK"]
    assert main(["audit", "--host", "lxb0001", "--principal", "ops"], out=io.StringIO()) == 0
    assert ws.sent == ["AUDIT\thost=lxb0001\tprincipal=ops"]


def test_watchdog_verbs(fake_server):
    ws, _ = fake_server
    ws.replies += ["+ lxb0001\tAlarmed\t3\t2003-03-24T00:00:00.000Z\tunresponsive", "OK"]
    out = io.StringIO()
    assert main(["watchdog", "status"], out=out) == 0
    assert out.getvalue().startswith("lxb0001  Alarmed  3")
    ws.replies += ["OK"]
    assert main(["watchdog", "alarms"], out=io.StringIO()) == 0
    assert ws.sent == ["WATCHDOG\tstatus", "ALARMS"]
    assert main(["watchdog", "clear"]) == 2


def test_log_prints_lines(fake_server):
    ws, _ = fake_server
    ws.replies += ["+ 2003-03-24T00:00:01.000Z\tlxb0001\tttyS1\tLILO", "OK"]
    out = io.StringIO()
    assert main(["log", "lxb0001"], out=out) == 0
    assert out.getvalue() == "2003-03-24T00:00:01.000Z lxb0001 ttyS1 LILO\n"
    assert ws.sent == ["LOG\tlxb0001\t"]


# --- local verbs ------------------------------------------------------------

def test_keygen_writes_a_private_key(tmp_path):
    path = tmp_path / "ops.key"
    out = io.StringIO()
    assert main(["--scheme", "digest-test", "keygen", "ops", "--out", str(path)], out=out) == 0
    private = base64.b64decode(path.read_text())
    _, principal, public = out.getvalue().split()
    assert principal == "ops"
    assert base64.b64decode(public) == private
    assert stat.S_IMODE(path.stat().st_mode) == 0o600
    assert main(["--scheme", "digest-test", "keygen", "ops", "--out", str(path)], out=io.StringIO()) == 2


def test_ed25519_keygen_matches_its_public_half(tmp_path):
    from services.authchan import Ed25519Scheme

    path = tmp_path / "admin.key"
    out = io.StringIO()
    assert main(["keygen", "admin", "--out", str(path)], out=out) == 0
    private = base64.b64decode(path.read_text())
    public = out.getvalue().split()[2]
    assert base64.b64decode(public) == Ed25519Scheme().keypair(private)[1]


def test_ping(monkeypatch):
    seen = []

    def fake_get(url, timeout):
        seen.append(url)
        return httpx.Response(200, json={"status": "ok", "ports": 4}, request=httpx.Request("GET", url))

    monkeypatch.setattr(farmctl.httpx, "get", fake_get)
    out = io.StringIO()
    assert main(["--server", "ws://cs:8000", "ping"], out=out) == 0
    assert seen == ["http://cs:8000/health"]
    assert out.getvalue() == "status  ok\nports   4\n"


def test_ping_failure(monkeypatch):
    def fake_get(url, timeout):
        raise httpx.ConnectError("connection refused")

    monkeypatch.setattr(farmctl.httpx, "get", fake_get)
    assert main(["ping"], out=io.StringIO()) == 6
