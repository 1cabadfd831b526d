"""
Reset Requests and Audit Trail

A reset request carries a principal, a host and a reason. It is authorized,
rate limited per host, executed as one relay pulse, and always leaves exactly
one audit line behind:

    <RFC3339> RESET principal=<p> host=<h> addr=<box>/<relay> outcome=<code> reason="<escaped>"
"""

import enum
import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from errors import BadRequest, NoResetWiring, NotFound, UnknownHost
from services import registry as reg_mod
from services.console_log import escape, unescape
from services.consoled import ConsoleDaemon, PulseOutcome
from services.registry import Action
from services.relaynet import RelayAddress
from services.simclock import parse_rfc3339, time_filter

logger = logging.getLogger(__name__)

DEFAULT_MIN_INTERVAL = 30.0


class AuditOutcome(enum.Enum):
    OK = "Ok"
    DENIED = "Denied"
    NO_WIRING = "NoWiring"
    NAK = "Nak"
    TIMEOUT = "Timeout"
    RATE_LIMITED = "RateLimited"
    NOOP = "NoOp"


_PULSE_OUTCOMES = {
    PulseOutcome.ACK: AuditOutcome.OK,
    PulseOutcome.NAK: AuditOutcome.NAK,
    PulseOutcome.TIMEOUT: AuditOutcome.TIMEOUT,
}


@dataclass(frozen=True)
class ResetRequest:
    principal: str
    host: str
    reason: str
    requested_at: str = ""

    def __post_init__(self):
        if not self.reason or not self.reason.strip():
            raise BadRequest("a reset needs a reason")
        if not self.principal or not self.host:
            raise BadRequest("principal and host are required")


@dataclass(frozen=True)
class AuditEvent:
    timestamp: str
    principal: str
    host: str
    address: Optional[RelayAddress]
    reason: str
    outcome: AuditOutcome
    kind: str = "RESET"

    def format(self) -> str:
        addr = str(self.address) if self.address is not None else "-"
        return (
            f"{self.timestamp} {self.kind} principal={self.principal} host={self.host} "
            f"addr={addr} outcome={self.outcome.value} reason=\"{_escape_reason(self.reason)}\""
        )

    @classmethod
    def parse(cls, line: str) -> "AuditEvent":
        m = _AUDIT_RE.match(line.rstrip("\n"))
        if m is None:
            raise ValueError(f"not an audit line: {line!r}")
        addr = None
        if m.group("addr") != "-":
            box, relay = m.group("addr").split("/")
            addr = RelayAddress(int(box), int(relay))
        return cls(
            m.group("ts"),
            m.group("principal"),
            m.group("host"),
            addr,
            unescape(m.group("reason")).decode("utf-8", errors="replace"),
            AuditOutcome(m.group("outcome")),
            m.group("kind"),
        )


_AUDIT_RE = re.compile(
    r'^(?P<ts>\S+) (?P<kind>RESET|CLEAR) principal=(?P<principal>\S+) host=(?P<host>\S+) '
    r'addr=(?P<addr>\d/\d|-) outcome=(?P<outcome>\w+) reason="(?P<reason>[^"]*)"$'
)


def _escape_reason(reason: str) -> str:
    return escape(reason.encode("utf-8")).replace('"', "\\x22")


class AuditLog:
    """Append-only audit file, one event per line"""

    def __init__(self, path: Optional[str] = None):
        self.path = Path(path) if path else None
        self._events: List[AuditEvent] = []
        self._lock = threading.Lock()

    def append(self, event: AuditEvent) -> None:
        with self._lock:
            if self.path is None:
                self._events.append(event)
                return
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="ascii") as f:
                f.write(event.format() + "\n")

    def events(self) -> List[AuditEvent]:
        with self._lock:
            if self.path is None:
                return list(self._events)
            if not self.path.exists():
                return []
            with open(self.path, encoding="ascii") as f:
                return [AuditEvent.parse(line) for line in f if line.strip()]

    def query(
        self,
        host: Optional[str] = None,
        principal: Optional[str] = None,
        since: Optional[str] = None,
        until: Optional[str] = None,
    ) -> List[AuditEvent]:
        low, high = time_filter(since), time_filter(until)
        out = [
            e for e in self.events()
            if (host is None or e.host == host)
            and (principal is None or e.principal == principal)
            and (low is None or parse_rfc3339(e.timestamp) >= low)
            and (high is None or parse_rfc3339(e.timestamp) <= high)
        ]
        return sorted(out, key=lambda e: e.timestamp)


class HostRateLimiter:
    """
    Minimum interval between successful pulses, per host.

    reserve() is an atomic check-and-reserve; a reservation is released again
    if the pulse does not succeed.
    """

    def __init__(self, clock, min_interval: float = DEFAULT_MIN_INTERVAL):
        if min_interval < 0:
            raise ValueError("min_interval must be >= 0")
        self.clock = clock
        self.min_interval = min_interval
        self._last_ok: Dict[str, float] = {}
        self._lock = threading.Lock()

    def reserve(self, host: str) -> Optional[object]:
        """Returns a release token, or None if the host is inside its interval"""
        now = self.clock.now()
        with self._lock:
            last = self._last_ok.get(host)
            if last is not None and now - last < self.min_interval:
                return None
            self._last_ok[host] = now
            return ("prior", last)

    def release(self, host: str, token) -> None:
        _, prior = token
        with self._lock:
            if prior is None:
                self._last_ok.pop(host, None)
            else:
                self._last_ok[host] = prior


class ResetService:
    def __init__(self, daemon: ConsoleDaemon, audit: AuditLog, min_interval: float = DEFAULT_MIN_INTERVAL):
        self.daemon = daemon
        self.audit = audit
        self.limiter = HostRateLimiter(daemon.clock, min_interval)

    def _address(self, host: str) -> Optional[RelayAddress]:
        try:
            return reg_mod.lookup_reset(self.daemon.registry, host)[2]
        except NotFound:
            return None

    def submit_reset(self, req: ResetRequest) -> AuditEvent:
        """
        Authorize, rate limit and execute one reset. Failures are reported as
        the event's outcome, never raised.
        """
        address = self._address(req.host)
        outcome = self._run(req)
        event = AuditEvent(self.daemon.clock.timestamp(), req.principal, req.host, address, req.reason, outcome)
        self.audit.append(event)
        level = logging.INFO if outcome is AuditOutcome.OK else logging.WARNING
        logger.log(level, f"Reset {req.host} by {req.principal}: {outcome.value}")
        return event

    def _run(self, req: ResetRequest) -> AuditOutcome:
        if not reg_mod.authorize(self.daemon.registry, req.principal, Action.RESET, req.host):
            return AuditOutcome.DENIED
        try:
            self.daemon.resolve_reset(req.host)
        except (UnknownHost, NoResetWiring):
            return AuditOutcome.NO_WIRING
        token = self.limiter.reserve(req.host)
        if token is None:
            return AuditOutcome.RATE_LIMITED
        try:
            result = self.daemon.execute_reset(req.host)
        except NotFound:
            self.limiter.release(req.host, token)
            return AuditOutcome.NO_WIRING
        except Exception:
            self.limiter.release(req.host, token)
            raise
        outcome = _PULSE_OUTCOMES[result.outcome]
        if outcome is not AuditOutcome.OK:
            self.limiter.release(req.host, token)
        return outcome

    def record_clear(self, principal: str, host: str, outcome: AuditOutcome, reason: str) -> AuditEvent:
        event = AuditEvent(self.daemon.clock.timestamp(), principal, host, None, reason, outcome, kind="CLEAR")
        self.audit.append(event)
        return event

    def audit_query(self, host=None, principal=None, since=None, until=None) -> List[AuditEvent]:
        return self.audit.query(host, principal, since, until)
