"""
Console Server Daemon

Owns every console port of one server. Each port is a serialized pipeline:

    endpoint -> (probe filter) -> console log -> pattern subscriptions
                               -> ring buffer -> attached sessions

The log sees every byte exactly once, whether or not anyone is attached.
Sessions see what the node printed, minus detection probe answerbacks.
At most one read-write session per port; any number of read-only ones.
"""

import enum
import hashlib
import itertools
import logging
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Deque, Dict, List, Optional, Tuple

from errors import (
    BadPattern,
    Denied,
    EndpointClosed,
    NoResetWiring,
    UnknownHost,
    WriterBusy,
)
from services import registry as reg_mod
from services.console_log import (
    ALARM_LABEL,
    DEFAULT_FLUSH_BYTES,
    DEFAULT_IDLE_FLUSH,
    ConsoleLogSink,
    LineAssembler,
    LogLine,
    escape,
    make_payload,
)
from services.port_transport import PortEndpoint, PortId
from services.registry import Action, DetectionReport, Registry
from services.relaynet import AckTimeout, Nak, RelayAddress, RelayDriver
from services.simclock import parse_rfc3339, time_filter

logger = logging.getLogger(__name__)

ENQ = b"\x05"
ANSWERBACK_START = 0x06
ANSWERBACK_PREFIX = b"\x06ID:"
MAX_ANSWERBACK = 128
# Longest a waiting probe goes without pumping the other ports.
PROBE_SLICE = 0.1


@dataclass(frozen=True)
class ConsoleSettings:
    ring_size: int = 8192
    flush_bytes: int = DEFAULT_FLUSH_BYTES
    idle_flush: float = DEFAULT_IDLE_FLUSH
    escape: bytes = b"~."
    answerback_timeout: float = 2.0
    probe_attempts: int = 3
    session_buffer: int = 1 << 20
    pulse_tenths: int = 10

    def __post_init__(self):
        if self.ring_size < 1 or self.flush_bytes < 1 or self.session_buffer < 1:
            raise ValueError("ring_size, flush_bytes and session_buffer must be positive")
        if self.idle_flush <= 0 or self.answerback_timeout <= 0 or self.probe_attempts < 1:
            raise ValueError("idle_flush, answerback_timeout and probe_attempts must be positive")
        if len(self.escape) != 2:
            raise ValueError("escape sequence must be two bytes")
        if not 1 <= self.pulse_tenths <= 255:
            raise ValueError("pulse_tenths must be 1..255")


class SessionMode(enum.Enum):
    READ_WRITE = "rw"
    READ_ONLY = "ro"


class PulseOutcome(enum.Enum):
    ACK = "ack"
    NAK = "nak"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class PulseResult:
    outcome: PulseOutcome
    address: RelayAddress
    device: str


class PortRing:
    """Last N bytes of a port with monotone offsets"""

    def __init__(self, size: int):
        self.size = size
        self._buf = bytearray()
        self.end = 0

    @property
    def start(self) -> int:
        return self.end - len(self._buf)

    def append(self, data: bytes) -> None:
        self._buf += data
        self.end += len(data)
        if len(self._buf) > self.size:
            del self._buf[: len(self._buf) - self.size]

    def snapshot(self) -> Tuple[int, bytes]:
        return self.start, bytes(self._buf)


class ConsoleSession:
    """A principal attached to one port"""

    _ids = itertools.count(1)

    def __init__(self, principal: str, host: str, mode: SessionMode, attached_at: str,
                 offset: int, buffer_limit: int, escape_seq: bytes):
        self.session_id = f"s{next(self._ids)}"
        self.principal = principal
        self.host = host
        self.mode = mode
        self.attached_at = attached_at
        self.offset = offset
        self.authorized = False
        self.lagged = False
        self.closed = False
        self.end_reason = ""
        self.port: Optional["ConsolePort"] = None
        self._chunks: Deque[bytes] = deque()
        self._buffered = 0
        self._limit = buffer_limit
        self._escape = escape_seq
        self._at_line_start = True
        self._held = False
        self._lock = threading.Lock()

    def deliver(self, offset: int, data: bytes) -> None:
        if not data:
            return
        with self._lock:
            if offset != self.offset:
                self.lagged = True
            self.offset = offset + len(data)
            if self._buffered + len(data) > self._limit:
                self.lagged = True
                return
            self._chunks.append(data)
            self._buffered += len(data)

    def read(self) -> bytes:
        with self._lock:
            data = b"".join(self._chunks)
            self._chunks.clear()
            self._buffered = 0
            return data

    def filter_keys(self, data: bytes) -> Tuple[bytes, bool]:
        """Strip the detach escape; returns (bytes for the port, detach?)"""
        out = bytearray()
        lead, tail = self._escape[0], self._escape[1]
        for b in data:
            if self._held:
                self._held = False
                if b == tail:
                    return bytes(out), True
                out.append(lead)
            elif b == lead and self._at_line_start:
                self._held = True
                continue
            out.append(b)
            self._at_line_start = b in (0x0D, 0x0A)
        return bytes(out), False


@dataclass
class _Probe:
    capture: Optional[bytearray] = None
    answer: Optional[str] = None
    finished: bool = False


class ConsolePort:
    def __init__(self, port_id: PortId, endpoint: PortEndpoint, settings: ConsoleSettings):
        self.port_id = port_id
        self.endpoint = endpoint
        self.ring = PortRing(settings.ring_size)
        self.assembler = LineAssembler(settings.flush_bytes, settings.idle_flush)
        self.lock = threading.RLock()
        self.probe_lock = threading.Lock()
        self.probe_done = threading.Condition(self.lock)
        self.writer: Optional[ConsoleSession] = None
        self.sessions: List[ConsoleSession] = []
        self.probe: Optional[_Probe] = None
        self.bytes_in = 0
        self.dead = False

    @property
    def label(self) -> str:
        return self.port_id.label

    def split_probe(self, data: bytes) -> bytes:
        """
        Remove answerback bytes of an active probe; returns visible bytes.

        A capture starts at 0x06 and must follow `\\x06ID:` byte by byte;
        the first mismatch, an overlong capture or a bad name releases the
        captured bytes back into the stream in order.
        """
        probe = self.probe
        if probe is None:
            return data
        visible = bytearray()
        for b in data:
            capture = probe.capture
            if capture is None:
                if b == ANSWERBACK_START and not probe.finished:
                    probe.capture = bytearray([b])
                else:
                    visible.append(b)
                continue
            capture.append(b)
            if len(capture) <= len(ANSWERBACK_PREFIX):
                if capture != ANSWERBACK_PREFIX[:len(capture)]:
                    probe.capture = None
                    visible += capture[:-1]
                    if b == ANSWERBACK_START:
                        probe.capture = bytearray([b])
                    else:
                        visible.append(b)
                continue
            if capture.endswith(b"\r\n"):
                probe.capture = None
                name = bytes(capture[len(ANSWERBACK_PREFIX):-2])
                if name and all(0x21 <= c <= 0x7E for c in name):
                    probe.answer = name.decode("ascii")
                    probe.finished = True
                else:
                    visible += capture
            elif len(capture) > MAX_ANSWERBACK:
                probe.capture = None
                visible += capture
        return bytes(visible)

    def end_probe(self) -> bytes:
        """Clear the probe; returns captured bytes that never became an answerback"""
        probe, self.probe = self.probe, None
        if probe is None or probe.capture is None:
            return b""
        return bytes(probe.capture)


class PatternSubscription:
    def __init__(self, principal: str, host: str, pattern: str):
        self.principal = principal
        self.host = host
        self.pattern = pattern
        self._matcher = compile_pattern(pattern)
        self._events: Deque[Tuple[str, str]] = deque()
        self._lock = threading.Lock()
        self.closed = False

    def offer(self, line: LogLine) -> None:
        text = line.text
        if self._matcher(text):
            with self._lock:
                self._events.append((line.timestamp, text))

    def events(self) -> List[Tuple[str, str]]:
        with self._lock:
            out = list(self._events)
            self._events.clear()
            return out


def compile_pattern(pattern: str) -> Callable[[str], bool]:
    """`/regex/` or a literal substring"""
    if len(pattern) >= 2 and pattern.startswith("/") and pattern.endswith("/"):
        try:
            rx = re.compile(pattern[1:-1])
        except re.error as e:
            raise BadPattern(f"bad regular expression: {e}")
        return lambda text: rx.search(text) is not None
    if pattern.startswith("/"):
        raise BadPattern("unterminated /regex/")
    return lambda text: pattern in text


class ConsoleDaemon:
    """
    One console server: ports, sessions, logging, detection and reset.

    Drive it by calling poll() regularly (a background task in the server,
    the simulation loop in tests).
    """

    def __init__(
        self,
        server_id: str,
        registry: Registry,
        endpoints: Dict[int, PortEndpoint],
        clock,
        log_sink: Optional[ConsoleLogSink] = None,
        chains: Optional[Dict[str, RelayDriver]] = None,
        settings: Optional[ConsoleSettings] = None,
        error_handler=None,
        report_dir: Optional[str] = None,
    ):
        self.server_id = server_id
        self.clock = clock
        self.settings = settings or ConsoleSettings()
        self.error_handler = error_handler
        self.chains: Dict[str, RelayDriver] = dict(chains or {})
        self.report_dir = Path(report_dir) if report_dir else None
        self.log_sink = log_sink or ConsoleLogSink()
        if self.log_sink.on_failure is None:
            self.log_sink.on_failure = self._log_sink_failed
        self._registry = registry
        self._ports: Dict[int, ConsolePort] = {
            index: ConsolePort(PortId(server_id, index), ep, self.settings)
            for index, ep in sorted(endpoints.items())
        }
        self._subs: Dict[str, List[PatternSubscription]] = {}
        self._output_listeners: List[Callable[[str, float], None]] = []
        self._control_lock = threading.Lock()
        self._sink_alarmed = False
        self.denied_deliveries = 0
        logger.info(f"Console daemon {server_id}: {len(self._ports)} ports, chains {sorted(self.chains)}")

    # --- registry ----------------------------------------------------------

    @property
    def registry(self) -> Registry:
        return self._registry

    def update_registry(self, registry: Registry) -> None:
        with self._control_lock:
            self._registry = registry

    def host_for_port(self, index: int) -> str:
        host = self._registry.host_at(self.server_id, index)
        return host if host is not None else f"unmapped-{self.server_id}-{index}"

    def port_for_host(self, host: str) -> ConsolePort:
        server, index = reg_mod.lookup_console(self._registry, host)
        if server != self.server_id or index not in self._ports:
            raise UnknownHost(f"{host} is not on console server {self.server_id}")
        return self._ports[index]

    @property
    def ports(self) -> List[ConsolePort]:
        return list(self._ports.values())

    def add_output_listener(self, callback: Callable[[str, float], None]) -> None:
        self._output_listeners.append(callback)

    # --- pump --------------------------------------------------------------

    def poll(self) -> int:
        """Move every available byte through its port pipeline"""
        moved = 0
        for port in self._ports.values():
            with port.lock:
                moved += self._pump(port)
                self._idle_flush(port)
        return moved

    def _pump(self, port: ConsolePort) -> int:
        """Ingest whatever the port has buffered; caller holds port.lock"""
        if port.dead:
            return 0
        moved = 0
        while True:
            try:
                data = port.endpoint.read_available(4096, 0.0)
            except EndpointClosed as e:
                self._port_lost(port, e)
                return moved
            if not data:
                return moved
            self._ingest(port, data)
            moved += len(data)

    def _ingest(self, port: ConsolePort, data: bytes) -> None:
        now = self.clock.now()
        host = self.host_for_port(port.port_id.index)
        port.bytes_in += len(data)
        for line in port.assembler.feed(data, now):
            self._emit(host, port.label, line)
        self._fan_out(port, port.split_probe(data))
        if port.probe is not None and port.probe.finished:
            port.probe_done.notify_all()
        for callback in self._output_listeners:
            callback(host, now)

    def _fan_out(self, port: ConsolePort, visible: bytes) -> None:
        if not visible:
            return
        offset = port.ring.end
        port.ring.append(visible)
        for session in list(port.sessions):
            if not session.authorized:
                self.denied_deliveries += 1
                continue
            session.deliver(offset, visible)

    def _idle_flush(self, port: ConsolePort) -> None:
        line = port.assembler.poll_idle(self.clock.now())
        if line is not None:
            self._emit(self.host_for_port(port.port_id.index), port.label, line)

    def _emit(self, host: str, label: str, raw: bytes) -> None:
        line = LogLine(self.clock.timestamp(), host, label, make_payload(raw))
        self.log_sink.write(line)
        for sub in list(self._subs.get(host, ())):
            sub.offer(line)

    def flush_logs(self) -> None:
        """Write out every partial line (shutdown)"""
        for port in self._ports.values():
            with port.lock:
                line = port.assembler.flush()
                if line is not None:
                    self._emit(self.host_for_port(port.port_id.index), port.label, line)

    def write_alarm(self, host: str, cause: str) -> None:
        self.log_sink.write(LogLine(self.clock.timestamp(), host, ALARM_LABEL, escape(cause.encode())))

    def _log_sink_failed(self, error: Exception) -> None:
        if self.error_handler is not None and not self._sink_alarmed:
            self.error_handler.raise_alarm("console log sink failed", context=str(error))
        self._sink_alarmed = True
        logger.error(f"Console log write failed: {error}")

    def _port_lost(self, port: ConsolePort, error: Exception) -> None:
        port.dead = True
        line = port.assembler.flush()
        if line is not None:
            self._emit(self.host_for_port(port.port_id.index), port.label, line)
        for session in list(port.sessions):
            self._end_session(session, f"port closed: {error}")
        logger.error(f"Port {port.label} lost: {error}")
        self._transport_failed(port.label, error)

    def _transport_failed(self, what: str, error: Exception) -> None:
        if self.error_handler is not None:
            self.error_handler.handle_transport_error(what, error)

    # --- sessions ----------------------------------------------------------

    def attach(self, principal: str, host: str, mode: SessionMode) -> ConsoleSession:
        port = self.port_for_host(host)
        action = Action.CONSOLE if mode is SessionMode.READ_WRITE else Action.CONSOLE_RO
        if not reg_mod.authorize(self._registry, principal, action, host):
            raise Denied(f"{principal} may not {action.value} {host}")
        with port.lock:
            if port.dead:
                raise EndpointClosed(f"{port.label} is closed")
            if mode is SessionMode.READ_WRITE and port.writer is not None:
                raise WriterBusy(port.writer.principal)
            start, replay = port.ring.snapshot()
            session = ConsoleSession(principal, host, mode, self.clock.timestamp(), start,
                                     self.settings.session_buffer, self.settings.escape)
            session.authorized = True
            session.port = port
            session.deliver(start, replay)
            port.sessions.append(session)
            if mode is SessionMode.READ_WRITE:
                port.writer = session
        logger.info(f"{principal} attached to {host} ({mode.value}) as {session.session_id}")
        return session

    def send_keys(self, session: ConsoleSession, data: bytes) -> bool:
        """Forward writer keystrokes; returns False once the session has ended"""
        if session.closed:
            return False
        if session.mode is not SessionMode.READ_WRITE:
            raise Denied("read-only session")
        forward, detach = session.filter_keys(data)
        port = session.port
        if forward:
            with port.lock:
                try:
                    port.endpoint.write(forward)
                except EndpointClosed as e:
                    self._port_lost(port, e)
                    return False
        if detach:
            self.detach(session, "escape")
            return False
        return True

    def detach(self, session: ConsoleSession, reason: str = "detach") -> None:
        self._end_session(session, reason)
        logger.info(f"{session.principal} detached from {session.host} ({reason})")

    def _end_session(self, session: ConsoleSession, reason: str) -> None:
        port = session.port
        if port is None:
            return
        with port.lock:
            if session in port.sessions:
                port.sessions.remove(session)
            if port.writer is session:
                port.writer = None
        session.closed = True
        session.end_reason = reason

    def sessions(self) -> List[ConsoleSession]:
        out = []
        for port in self._ports.values():
            with port.lock:
                out.extend(port.sessions)
        return out

    # --- pattern subscriptions ---------------------------------------------

    def subscribe_pattern(self, principal: str, host: str, pattern: str) -> PatternSubscription:
        self.port_for_host(host)
        if not reg_mod.authorize(self._registry, principal, Action.CONSOLE_RO, host):
            raise Denied(f"{principal} may not watch {host}")
        sub = PatternSubscription(principal, host, pattern)
        with self._control_lock:
            self._subs.setdefault(host, []).append(sub)
        return sub

    def unsubscribe(self, sub: PatternSubscription) -> None:
        sub.closed = True
        with self._control_lock:
            subs = self._subs.get(sub.host, [])
            if sub in subs:
                subs.remove(sub)

    # --- detection ---------------------------------------------------------

    def _probe(self, port: ConsolePort, attempts: int) -> Optional[str]:
        """
        ENQ/answerback exchange on one port. Only port.probe_lock is held
        while waiting; every port keeps pumping, this one included.
        """
        timeout = self.settings.answerback_timeout
        with port.probe_lock:
            with port.lock:
                self._pump(port)
                probe = port.probe = _Probe()
            try:
                for attempt in range(attempts):
                    with port.lock:
                        if port.dead:
                            return None
                        try:
                            port.endpoint.write(ENQ)
                        except EndpointClosed as e:
                            self._port_lost(port, e)
                            return None
                    if self._await_answer(port, probe, self.clock.now() + timeout):
                        return probe.answer
                    logger.debug(f"{port.label}: no answerback (attempt {attempt + 1}/{attempts})")
                return None
            finally:
                with port.lock:
                    self._fan_out(port, port.end_probe())

    def _await_answer(self, port: ConsolePort, probe: _Probe, deadline: float) -> bool:
        while True:
            self.poll()
            if probe.finished or port.dead:
                return probe.finished
            remaining = deadline - self.clock.now()
            if remaining <= 0:
                return False
            with port.lock:
                if not probe.finished:
                    self.clock.wait(port.probe_done, min(remaining, PROBE_SLICE))

    def run_detection(self, principal: Optional[str] = None) -> DetectionReport:
        """
        Probe every port with ENQ and collect answerbacks.

        principal=None is the daemon itself; otherwise Admin is required.
        """
        if principal is not None and not reg_mod.authorize(self._registry, principal, Action.ADMIN, "*"):
            raise Denied(f"{principal} may not run detection")
        entries = []
        for index, port in self._ports.items():
            entries.append((index, self._probe(port, self.settings.probe_attempts)))
        report = DetectionReport(self.server_id, tuple(entries), self.clock.datetime())
        found = sum(1 for _, h in entries if h is not None)
        logger.info(f"Detection on {self.server_id}: {found}/{len(entries)} ports answered")
        if self.report_dir is not None:
            self.report_dir.mkdir(parents=True, exist_ok=True)
            reg_mod._atomic_write(self.report_dir / f"detected-{self.server_id}.txt", reg_mod.format_report(report))
        return report

    def probe_host(self, host: str, attempts: Optional[int] = None) -> Optional[str]:
        """Single-port detection; returns the answered hostname or None"""
        port = self.port_for_host(host)
        return self._probe(port, attempts or self.settings.probe_attempts)

    # --- reset -------------------------------------------------------------

    def resolve_reset(self, host: str) -> Tuple[str, RelayAddress]:
        server, device, address = reg_mod.lookup_reset(self._registry, host)
        if server != self.server_id or device not in self.chains:
            raise NoResetWiring(f"{host} is wired to {server}:{device}, not served here")
        return device, address

    def execute_reset(self, host: str) -> PulseResult:
        device, address = self.resolve_reset(host)
        driver = self.chains[device]
        try:
            driver.pulse(address, self.settings.pulse_tenths / 10)
            outcome = PulseOutcome.ACK
        except Nak as e:
            outcome = PulseOutcome.NAK
            self._transport_failed(f"{device}:{address}", e)
        except (AckTimeout, EndpointClosed) as e:
            outcome = PulseOutcome.TIMEOUT
            self._transport_failed(f"{device}:{address}", e)
        logger.info(f"Reset pulse {host} at {device}:{address}: {outcome.value}")
        return PulseResult(outcome, address, device)

    # --- read-only views ---------------------------------------------------

    def read_log(self, host: str, since: Optional[str] = None) -> List[LogLine]:
        lines = [line for line in self.log_sink.read_lines() if line.host == host]
        low = time_filter(since)
        if low is not None:
            lines = [line for line in lines if parse_rfc3339(line.timestamp) >= low]
        return lines

    def list_hosts(self) -> List[Tuple[str, ...]]:
        rows = []
        for rec in self._registry.records:
            if rec.console.server_id != self.server_id:
                continue
            reset = f"{rec.reset.device}:{rec.reset.address}" if rec.reset else "-"
            rows.append((rec.host, f"ttyS{rec.console.port_index}", reset))
        return rows

    def list_ports(self) -> List[Tuple[str, ...]]:
        rows = []
        for index, port in self._ports.items():
            with port.lock:
                writer = port.writer.principal if port.writer else "-"
                rows.append((str(index), port.label, self.host_for_port(index), writer,
                             str(len(port.sessions)), str(port.bytes_in), "dead" if port.dead else "up"))
        return rows

    def list_sessions(self) -> List[Tuple[str, ...]]:
        return [
            (s.session_id, s.principal, s.host, s.mode.value, s.attached_at, "lagged" if s.lagged else "ok")
            for s in self.sessions()
        ]

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for name, text in sorted(reg_mod.dump_files(self._registry).items()):
            h.update(name.encode() + text.encode())
        for row in self.list_sessions():
            h.update("\t".join(row).encode())
        return h.hexdigest()
