"""
Control Protocol

After the challenge handshake every request is one text message, verb
first, fields separated by whitespace:

    RESET lxb0042 hung after kernel test
    SUBSCRIBE lxb0042 /Kernel panic/

The reason of RESET and the pattern of SUBSCRIBE run to the end of the
line. A request containing a tab is split on tabs only, which lets
farmctl send any field verbatim.

and every reply is zero or more records followed by a status line:

    + <tab-separated fields>
    OK
    ERR <code> <message>

Console bytes travel as binary messages `D <len>\\n<bytes>` in both
directions while a session is attached.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from errors import BadRequest, ConflictError, Denied, FarmError, UnknownServer
from services import registry as reg_mod
from services.consoled import ConsoleDaemon
from services.registry import Action, Grant
from services.reset_service import AuditOutcome, ResetRequest, ResetService
from services.simclock import rfc3339
from services.watchdog import Watchdog

logger = logging.getLogger(__name__)

STREAMING_VERBS = frozenset({"ATTACH", "SUBSCRIBE"})

# Fields before the free-text tail.
FREE_TEXT_AFTER = {"RESET": 1, "SUBSCRIBE": 1}

_OUTCOME_ERRORS: Dict[AuditOutcome, Tuple[str, str]] = {
    AuditOutcome.DENIED: ("denied", "not authorized to reset"),
    AuditOutcome.NO_WIRING: ("not-found", "no reset wiring"),
    AuditOutcome.NAK: ("transport", "relay box answered NAK"),
    AuditOutcome.TIMEOUT: ("transport", "relay box did not answer"),
    AuditOutcome.RATE_LIMITED: ("rate-limited", "host was reset too recently"),
}


def clean_field(value: str) -> str:
    return value.replace("\t", " ").replace("\r", " ").replace("\n", " ")


def format_record(fields: Sequence[str]) -> str:
    return "+ " + "\t".join(clean_field(str(f)) for f in fields)


def encode_request(verb: str, *args: str) -> str:
    return "\t".join([verb.upper(), *(clean_field(a) for a in args)])


def parse_request(line: str) -> Tuple[str, List[str]]:
    text = line.rstrip("\r\n")
    if "\t" in text:
        verb, *args = text.split("\t")
    else:
        head = text.split(None, 1)
        verb = head[0] if head else ""
        rest = head[1] if len(head) > 1 else ""
        fixed = FREE_TEXT_AFTER.get(verb.upper())
        args = rest.split() if fixed is None else rest.strip().split(None, fixed)
    if not verb.strip():
        raise BadRequest("empty request")
    return verb.strip().upper(), args


@dataclass
class Reply:
    records: List[Tuple[str, ...]] = field(default_factory=list)
    error_code: Optional[str] = None
    error_message: str = ""

    @classmethod
    def from_error(cls, error: FarmError, records=None) -> "Reply":
        return cls(list(records or []), error.code, error.message)

    @property
    def ok(self) -> bool:
        return self.error_code is None

    def lines(self) -> List[str]:
        out = [format_record(r) for r in self.records]
        if self.ok:
            out.append("OK")
        else:
            out.append(f"ERR {self.error_code} {clean_field(self.error_message)}")
        return out


@dataclass(frozen=True)
class ReplyLine:
    kind: str  # "record", "ok" or "err"
    fields: Tuple[str, ...] = ()
    code: str = ""
    message: str = ""


def parse_reply_line(line: str) -> ReplyLine:
    line = line.rstrip("\r\n")
    if line.startswith("+ "):
        return ReplyLine("record", tuple(line[2:].split("\t")))
    if line == "+":
        return ReplyLine("record", ("",))
    if line == "OK" or line.startswith("OK "):
        return ReplyLine("ok", tuple(line[3:].split("\t")) if len(line) > 3 else ())
    if line.startswith("ERR "):
        _, code, *rest = line.split(" ", 2)
        return ReplyLine("err", code=code, message=rest[0] if rest else "")
    raise ValueError(f"not a reply line: {line!r}")


def encode_data(data: bytes) -> bytes:
    return b"D %d\n" % len(data) + data


def decode_data(frame: bytes) -> bytes:
    head, sep, body = frame.partition(b"\n")
    if not sep or not head.startswith(b"D "):
        raise BadRequest("malformed data frame")
    try:
        size = int(head[2:])
    except ValueError:
        raise BadRequest("malformed data frame length")
    if size != len(body):
        raise BadRequest(f"data frame says {size} bytes, carries {len(body)}")
    return body


def _options(args: Sequence[str]) -> Dict[str, str]:
    opts = {}
    for arg in args:
        key, sep, value = arg.partition("=")
        if not sep:
            raise BadRequest(f"expected key=value, got {arg!r}")
        opts[key] = value
    return opts


def _need(args: Sequence[str], n: int, usage: str) -> None:
    if len(args) < n:
        raise BadRequest(f"usage: {usage}")


class CommandHandler:
    """
    Executes non-streaming control requests for an authenticated principal.

    Registry changes (grant, revoke, detection merges) are saved to
    registry_dir when one is configured, then pushed to the daemon.
    """

    def __init__(
        self,
        daemon: ConsoleDaemon,
        resets: ResetService,
        watchdog: Optional[Watchdog] = None,
        error_handler=None,
        registry_dir: Optional[str] = None,
    ):
        self.daemon = daemon
        self.resets = resets
        self.watchdog = watchdog
        self.error_handler = error_handler
        self.registry_dir = Path(registry_dir) if registry_dir else None
        self._verbs: Dict[str, Callable[[str, List[str]], Reply]] = {
            "LIST": self._list,
            "LOG": self._log,
            "RESET": self._reset,
            "DETECT": self._detect,
            "GRANT": self._grant,
            "REVOKE": self._revoke,
            "WATCHDOG": self._watchdog,
            "ALARMS": self._alarms,
            "AUDIT": self._audit,
        }

    def handle(self, principal: str, line: str) -> Reply:
        try:
            verb, args = parse_request(line)
            handler = self._verbs.get(verb)
            if handler is None:
                raise BadRequest(f"unknown verb {verb}")
            return handler(principal, args)
        except FarmError as e:
            logger.info(f"{principal}: {(line.split() or [''])[0]} -> ERR {e.code} {e.message}")
            return Reply.from_error(e)
        except Exception as e:
            if self.error_handler is not None:
                self.error_handler.log_error(e, context=f"control request from {principal}")
            else:
                logger.exception("control request failed")
            return Reply(error_code="internal", error_message=str(e) or type(e).__name__)

    def _require_admin(self, principal: str, target: str = "*") -> None:
        if not reg_mod.authorize(self.daemon.registry, principal, Action.ADMIN, target):
            raise Denied(f"{principal} is not an administrator for {target}")

    def _commit(self, registry: reg_mod.Registry) -> None:
        if self.registry_dir is not None:
            reg_mod.save(registry, self.registry_dir)
        self.daemon.update_registry(registry)

    # --- verbs -------------------------------------------------------------

    def _list(self, principal: str, args: List[str]) -> Reply:
        _need(args, 1, "LIST hosts|ports|sessions")
        what = args[0].lower()
        if what == "hosts":
            rows = [r for r in self.daemon.list_hosts()
                    if reg_mod.authorize(self.daemon.registry, principal, Action.CONSOLE_RO, r[0])
                    or reg_mod.authorize(self.daemon.registry, principal, Action.RESET, r[0])]
        elif what == "ports":
            self._require_admin(principal)
            rows = self.daemon.list_ports()
        elif what == "sessions":
            self._require_admin(principal)
            rows = self.daemon.list_sessions()
        else:
            raise BadRequest(f"cannot list {what!r}")
        return Reply(rows)

    def _log(self, principal: str, args: List[str]) -> Reply:
        _need(args, 1, "LOG <host> [since]")
        host = args[0]
        self.daemon.port_for_host(host)
        if not reg_mod.authorize(self.daemon.registry, principal, Action.CONSOLE_RO, host):
            raise Denied(f"{principal} may not read the log of {host}")
        since = args[1] if len(args) > 1 and args[1] else None
        lines = self.daemon.read_log(host, since)
        return Reply([(ln.timestamp, ln.host, ln.port_label, ln.payload) for ln in lines])

    def _reset(self, principal: str, args: List[str]) -> Reply:
        _need(args, 2, "RESET <host> <reason>")
        event = self.resets.submit_reset(ResetRequest(principal, args[0], args[1], self.daemon.clock.timestamp()))
        records = [(event.format(),)]
        if event.outcome is AuditOutcome.OK:
            return Reply(records)
        code, message = _OUTCOME_ERRORS[event.outcome]
        return Reply(records, code, f"{args[0]}: {message}")

    def _detect(self, principal: str, args: List[str]) -> Reply:
        server, options = self.daemon.server_id, args
        if args and args[0] != "apply" and not args[0].startswith("ack="):
            server, options = args[0], args[1:]
        if server != self.daemon.server_id:
            raise UnknownServer(f"this is {self.daemon.server_id}, not {server}")
        self._require_admin(principal)
        apply = "apply" in options
        acks = set()
        for arg in options:
            if arg.startswith("ack="):
                if not arg[4:].isdigit():
                    raise BadRequest(f"bad port in {arg!r}")
                acks.add(int(arg[4:]))
        report = self.daemon.run_detection(principal)
        records = [("detected", report.server_id, rfc3339(report.generated_at))]
        records += [("port", str(p), h if h is not None else "unknown") for p, h in report.entries]
        if not apply:
            return Reply(records)
        merged, conflicts = reg_mod.merge_detection(self.daemon.registry, report)
        remaining = []
        for conflict in conflicts:
            if conflict.port_index in acks:
                merged = reg_mod.acknowledge_conflict(merged, conflict)
            else:
                remaining.append(conflict)
        if merged != self.daemon.registry:
            self._commit(merged)
        records += [("conflict", str(c.port_index), c.was or "-", c.saw, c.note or "-") for c in remaining]
        if remaining:
            return Reply.from_error(ConflictError(f"{len(remaining)} unresolved conflicts"), records)
        return Reply(records)

    def _grant_arg(self, args: List[str], verb: str) -> Grant:
        _need(args, 3, f"{verb} <principal> <action> <pattern>")
        try:
            action = Action(args[1].lower())
        except ValueError:
            raise BadRequest(f"unknown action {args[1]!r}")
        if not reg_mod.valid_name(args[0]):
            raise BadRequest(f"invalid principal {args[0]!r}")
        return Grant(args[0], action, args[2])

    def _grant(self, principal: str, args: List[str]) -> Reply:
        grant = self._grant_arg(args, "GRANT")
        self._require_admin(principal, grant.host_pattern)
        try:
            updated = self.daemon.registry.with_grant(grant)
        except ValueError as e:
            raise BadRequest(str(e))
        self._commit(updated)
        logger.info(f"{principal} granted {grant.principal} {grant.action.value} on {grant.host_pattern}")
        return Reply()

    def _revoke(self, principal: str, args: List[str]) -> Reply:
        grant = self._grant_arg(args, "REVOKE")
        self._require_admin(principal, grant.host_pattern)
        self._commit(self.daemon.registry.without_grant(grant))
        logger.info(f"{principal} revoked {grant.principal} {grant.action.value} on {grant.host_pattern}")
        return Reply()

    def _watchdog(self, principal: str, args: List[str]) -> Reply:
        _need(args, 1, "WATCHDOG status|clear <host>")
        if self.watchdog is None:
            raise BadRequest("watchdog is not running")
        if args[0].lower() == "status":
            return Reply(self.watchdog.status())
        if args[0].lower() == "clear":
            _need(args, 2, "WATCHDOG clear <host>")
            event = self.watchdog.clear_alarm(principal, args[1])
            return Reply([(event.format(),)])
        raise BadRequest(f"unknown watchdog command {args[0]!r}")

    def _alarms(self, principal: str, args: List[str]) -> Reply:
        if self.error_handler is None:
            return Reply()
        return Reply([(a["timestamp"], a["host"], a["message"]) for a in self.error_handler.alarms()])

    def _audit(self, principal: str, args: List[str]) -> Reply:
        opts = _options(args)
        unknown = set(opts) - {"host", "principal", "since", "until"}
        if unknown:
            raise BadRequest(f"unknown audit filter {sorted(unknown)[0]!r}")
        events = self.resets.audit_query(opts.get("host"), opts.get("principal"), opts.get("since"), opts.get("until"))
        return Reply([(e.format(),) for e in events])
