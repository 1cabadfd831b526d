"""farmctl - command line client for the farm console server

    farmctl console <host> [--read-only]
    farmctl log <host> [--follow] [--since <ts>]
    farmctl reset <host> --reason <text>
    farmctl detect <server> [--apply] [--force-acknowledge <port>]...
    farmctl grant|revoke <principal> <action> <pattern>
    farmctl list hosts|ports|sessions
    farmctl watchdog status|alarms|clear <host>
    farmctl audit [--host H] [--principal P] [--since T] [--until T]
    farmctl ping
    farmctl keygen <principal> --out <keyfile>

Data goes to stdout, diagnostics to stderr. Exit status: 0 ok, 1 internal,
2 usage, 3 denied, 4 not found, 5 busy, 6 transport, 7 rate limited,
8 unresolved detection conflicts.
"""

import argparse
import base64
import logging
import os
import secrets
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import httpx
from dotenv import load_dotenv
from websockets.exceptions import WebSocketException
from websockets.sync.client import ClientConnection, connect

from errors import BadRequest, FarmError, RemoteError, TransportError
from services.authchan import make_credential, parse_challenge, scheme_by_name
from services.control_protocol import decode_data, encode_data, encode_request, parse_reply_line

logger = logging.getLogger(__name__)

DEFAULT_SERVER = "ws://localhost:8000"
FORMATS = ("human", "tsv")


@dataclass(frozen=True)
class CliConfig:
    server: str
    principal: str
    key_path: Optional[str]
    scheme: str = "ed25519"
    output_format: str = "human"

    def __post_init__(self):
        if self.output_format not in FORMATS:
            raise BadRequest(f"output format must be one of {', '.join(FORMATS)}")

    @property
    def control_url(self) -> str:
        return self.server.rstrip("/") + "/ws/control"

    @property
    def health_url(self) -> str:
        base = self.server.rstrip("/")
        if base.startswith("ws"):
            base = "http" + base[2:]
        return base + "/health"

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "CliConfig":
        load_dotenv()
        return cls(
            server=args.server or os.getenv("FARMCTL_SERVER", DEFAULT_SERVER),
            principal=args.principal or os.getenv("FARMCTL_PRINCIPAL") or os.getenv("USER", ""),
            key_path=args.key or os.getenv("FARMCTL_KEY"),
            scheme=args.scheme or os.getenv("FARMCTL_SCHEME", "ed25519"),
            output_format=args.format or os.getenv("FARMCTL_FORMAT", "human"),
        )


def read_private_key(path: str) -> bytes:
    try:
        return base64.b64decode(Path(path).read_text().strip(), validate=True)
    except (OSError, ValueError) as e:
        raise BadRequest(f"cannot read key file {path}: {e}")


class ControlClient:
    """One authenticated control connection"""

    def __init__(self, ws: ClientConnection, principal: str):
        self.ws = ws
        self.principal = principal

    @classmethod
    def connect(cls, config: CliConfig) -> "ControlClient":
        if not config.key_path:
            raise BadRequest("no key file (use --key or FARMCTL_KEY)")
        scheme = scheme_by_name(config.scheme)
        private = read_private_key(config.key_path)
        try:
            ws = connect(config.control_url, open_timeout=10)
        except (OSError, WebSocketException) as e:
            raise TransportError(f"cannot reach {config.control_url}: {e}")
        challenge = parse_challenge(ws.recv())
        credential = make_credential(scheme, private, config.principal, challenge.nonce, challenge.server_id)
        ws.send(credential.wire())
        status = parse_reply_line(ws.recv())
        if status.kind == "err":
            ws.close()
            raise RemoteError(status.code, status.message)
        return cls(ws, config.principal)

    def close(self) -> None:
        try:
            self.ws.close()
        except WebSocketException:
            pass

    def __enter__(self) -> "ControlClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def request(self, verb: str, *args: str) -> Tuple[List[Tuple[str, ...]], Tuple[str, ...]]:
        """
        Send one request and collect its reply.

        Returns (records, fields after OK). Raises RemoteError on ERR, with
        the records received so far attached as .records.
        """
        self.ws.send(encode_request(verb, *args))
        records: List[Tuple[str, ...]] = []
        while True:
            message = self.ws.recv()
            if isinstance(message, bytes):
                continue
            line = parse_reply_line(message)
            if line.kind == "record":
                records.append(line.fields)
            elif line.kind == "ok":
                return records, line.fields
            else:
                error = RemoteError(line.code, line.message)
                error.records = records
                raise error


# --- output ----------------------------------------------------------------

def emit(records: Sequence[Sequence[str]], fmt: str, out: TextIO) -> None:
    if fmt == "tsv":
        for record in records:
            out.write("\t".join(record) + "\n")
        return
    if not records:
        return
    width = max(len(r) for r in records)
    widths = [max((len(r[i]) for r in records if i < len(r)), default=0) for i in range(width)]
    for record in records:
        cells = [cell.ljust(widths[i]) if i < len(record) - 1 else cell for i, cell in enumerate(record)]
        out.write("  ".join(cells).rstrip() + "\n")


def render_console(data: bytes) -> bytes:
    """Raw console bytes for the terminal; other control bytes as \\xNN"""
    out = bytearray()
    for b in data:
        if 0x20 <= b <= 0x7E or b in (0x08, 0x09, 0x0A, 0x0D, 0x1B):
            out.append(b)
        else:
            out += b"\\x%02X" % b
    return bytes(out)


# --- verbs -----------------------------------------------------------------

def cmd_console(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    mode = "ro" if args.read_only else "rw"
    client.request("ATTACH", args.host, mode)
    print(f"[attached to {args.host} ({mode}), ~. to detach]", file=sys.stderr)
    done = threading.Event()
    reason = {"text": ""}

    def pump_output():
        stdout = sys.stdout.buffer
        try:
            while not done.is_set():
                message = client.ws.recv()
                if isinstance(message, bytes):
                    stdout.write(render_console(decode_data(message)))
                    stdout.flush()
                elif message.startswith("END"):
                    reason["text"] = message[4:]
                    break
                elif message.startswith("ERR"):
                    print(f"\r\n[{message}]", file=sys.stderr)
        except (WebSocketException, OSError):
            pass
        finally:
            done.set()

    reader = threading.Thread(target=pump_output, daemon=True)
    reader.start()
    fd = sys.stdin.fileno()
    saved = _raw_mode(fd)
    try:
        at_line_start, held = True, False
        while not done.is_set():
            chunk = os.read(fd, 1024)
            if not chunk:
                break
            if mode == "ro":
                # The server never sees keystrokes of a read-only session.
                for b in chunk:
                    if held and b == ord("."):
                        done.set()
                        break
                    held = at_line_start and b == ord("~")
                    at_line_start = b in (0x0A, 0x0D)
                continue
            client.ws.send(encode_data(chunk))
    finally:
        _restore_mode(fd, saved)
        try:
            client.ws.send("DETACH")
        except WebSocketException:
            pass
        reader.join(timeout=2.0)
    print(f"\r\n[detached from {args.host}{': ' + reason['text'] if reason['text'] else ''}]", file=sys.stderr)
    return 0


def _raw_mode(fd: int):
    if not os.isatty(fd):
        return None
    import termios
    import tty
    saved = termios.tcgetattr(fd)
    tty.setraw(fd)
    return saved


def _restore_mode(fd: int, saved) -> None:
    if saved is not None:
        import termios
        termios.tcsetattr(fd, termios.TCSADRAIN, saved)


def cmd_log(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    records, _ = client.request("LOG", args.host, args.since or "")
    if config.output_format == "tsv":
        emit(records, "tsv", out)
    else:
        for record in records:
            out.write(" ".join(record) + "\n")
    out.flush()
    if not args.follow:
        return 0
    client.ws.send(encode_request("SUBSCRIBE", args.host, ""))
    status = parse_reply_line(client.ws.recv())
    if status.kind == "err":
        raise RemoteError(status.code, status.message)
    try:
        while True:
            line = parse_reply_line(client.ws.recv())
            if line.kind == "record":
                emit([line.fields], config.output_format, out)
                out.flush()
    except KeyboardInterrupt:
        client.ws.send("UNSUBSCRIBE")
    return 0


def cmd_reset(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    if not args.reason.strip():
        raise BadRequest("--reason must not be empty")
    records, _ = client.request("RESET", args.host, args.reason)
    emit(records, config.output_format, out)
    return 0


def cmd_detect(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    request = [args.server]
    if args.apply:
        request.append("apply")
    request += [f"ack={port}" for port in args.force_acknowledge or []]
    try:
        records, _ = client.request("DETECT", *request)
    except RemoteError as e:
        if e.code == "conflict":
            _emit_detection(getattr(e, "records", []), config, out)
        raise
    _emit_detection(records, config, out)
    return 0


def _emit_detection(records, config: CliConfig, out: TextIO) -> None:
    """Header and port lines as in the report file, then conflicts"""
    header = [r for r in records if r and r[0] == "detected"]
    ports = [r for r in records if r and r[0] == "port"]
    conflicts = [r for r in records if r and r[0] == "conflict"]
    if config.output_format == "tsv":
        emit(header, "tsv", out)
    else:
        for h in header:
            out.write(" ".join(h) + "\n")
    emit(ports, config.output_format, out)
    for c in conflicts:
        if config.output_format == "tsv":
            out.write("\t".join(c) + "\n")
        else:
            note = f" ({c[4]})" if len(c) > 4 and c[4] != "-" else ""
            out.write(f"conflict port {c[1]}: was {c[2]}, saw {c[3]}{note}\n")


def cmd_grant(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    client.request(args.verb.upper(), args.grantee, args.action, args.pattern)
    return 0


def cmd_list(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    records, _ = client.request("LIST", args.what)
    emit(records, config.output_format, out)
    return 0


def cmd_watchdog(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    if args.action == "status":
        records, _ = client.request("WATCHDOG", "status")
    elif args.action == "alarms":
        records, _ = client.request("ALARMS")
    else:
        if not args.host:
            raise BadRequest("usage: farmctl watchdog clear <host>")
        records, _ = client.request("WATCHDOG", "clear", args.host)
    emit(records, config.output_format, out)
    return 0


def cmd_audit(client: ControlClient, args, config: CliConfig, out: TextIO) -> int:
    filters = [f"{k}={v}" for k, v in (("host", args.host), ("principal", args.principal_filter),
                                        ("since", args.since), ("until", args.until)) if v]
    records, _ = client.request("AUDIT", *filters)
    emit(records, config.output_format, out)
    return 0


def cmd_ping(config: CliConfig, out: TextIO) -> int:
    try:
        response = httpx.get(config.health_url, timeout=5.0)
        response.raise_for_status()
    except httpx.HTTPError as e:
        raise TransportError(f"{config.health_url}: {e}")
    health = response.json()
    fields = [(k, str(v)) for k, v in health.items()]
    emit(fields, config.output_format, out)
    return 0


def cmd_keygen(config: CliConfig, args, out: TextIO) -> int:
    scheme = scheme_by_name(config.scheme)
    private, public = scheme.keypair(secrets.token_bytes(32))
    path = Path(args.out)
    if path.exists():
        raise BadRequest(f"{path} exists; refusing to overwrite a key")
    path.write_text(base64.b64encode(private).decode() + "\n")
    path.chmod(0o600)
    out.write(f"key {args.owner} {base64.b64encode(public).decode()}\n")
    return 0


VERBS: Dict[str, Callable] = {
    "console": cmd_console,
    "log": cmd_log,
    "reset": cmd_reset,
    "detect": cmd_detect,
    "grant": cmd_grant,
    "revoke": cmd_grant,
    "list": cmd_list,
    "watchdog": cmd_watchdog,
    "audit": cmd_audit,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise BadRequest(message)


def arguments_parse(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = _Parser(prog="farmctl", description="Farm console and reset control")
    parser.add_argument("--server", default=None, help="Console server URL (default $FARMCTL_SERVER or ws://localhost:8000)")
    parser.add_argument("--principal", default=None, help="Principal to authenticate as (default $FARMCTL_PRINCIPAL)")
    parser.add_argument("--key", default=None, help="Private key file (default $FARMCTL_KEY)")
    parser.add_argument("--scheme", default=None, help="Signature scheme (default ed25519)")
    parser.add_argument("--format", default=None, choices=FORMATS, help="Output format (default human)")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("console", help="Attach to a console (~. detaches)")
    p.add_argument("host")
    p.add_argument("--read-only", action="store_true")

    p = sub.add_parser("log", help="Show a host's console log")
    p.add_argument("host")
    p.add_argument("--follow", action="store_true")
    p.add_argument("--since", default=None)

    p = sub.add_parser("reset", help="Pulse a host's reset line")
    p.add_argument("host")
    p.add_argument("--reason", required=True)

    p = sub.add_parser("detect", help="Probe every port for answerbacks")
    p.add_argument("server")
    p.add_argument("--apply", action="store_true")
    p.add_argument("--force-acknowledge", type=int, action="append", metavar="PORT")

    for verb in ("grant", "revoke"):
        p = sub.add_parser(verb)
        p.add_argument("grantee", metavar="principal")
        p.add_argument("action", choices=["console", "console-ro", "reset", "admin"])
        p.add_argument("pattern")

    p = sub.add_parser("list")
    p.add_argument("what", choices=["hosts", "ports", "sessions"])

    p = sub.add_parser("watchdog")
    p.add_argument("action", choices=["status", "alarms", "clear"])
    p.add_argument("host", nargs="?")

    p = sub.add_parser("audit")
    p.add_argument("--host", default=None)
    p.add_argument("--principal", dest="principal_filter", default=None)
    p.add_argument("--since", default=None)
    p.add_argument("--until", default=None)

    sub.add_parser("ping", help="Check the server's health endpoint")

    p = sub.add_parser("keygen", help="Create a key pair; prints the keys.conf line")
    p.add_argument("owner", metavar="principal")
    p.add_argument("--out", required=True)

    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None, out: TextIO = sys.stdout) -> int:
    try:
        args = arguments_parse(argv)
        config = CliConfig.from_args(args)
        if args.verb == "ping":
            return cmd_ping(config, out)
        if args.verb == "keygen":
            return cmd_keygen(config, args, out)
        with ControlClient.connect(config) as client:
            return VERBS[args.verb](client, args, config, out)
    except FarmError as e:
        print(f"farmctl: {e.message}", file=sys.stderr)
        return e.exit_code
    except (OSError, WebSocketException) as e:
        print(f"farmctl: connection failed: {e}", file=sys.stderr)
        return TransportError.exit_code
    except Exception as e:
        print(f"farmctl: internal error: {e}", file=sys.stderr)
        return FarmError.exit_code


if __name__ == "__main__":
    sys.exit(main())
