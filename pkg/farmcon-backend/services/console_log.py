"""
Console Logging

Every byte a port emits ends up in exactly one LogLine:

    <RFC3339> <host> <port_label> <payload>

Payload escaping: printable ASCII other than backslash is written as is,
every other byte as \\xNN. A line terminated by CRLF is written without the
terminator; a line flushed any other way (bare LF, size limit, idle) keeps
all its bytes and ends with the marker \\c. reconstruct_stream() inverts this
exactly.
"""

import logging
import logging.handlers
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

logger = logging.getLogger(__name__)

NO_CRLF_MARK = "\\c"
DEFAULT_FLUSH_BYTES = 512
DEFAULT_IDLE_FLUSH = 1.0
# Daemon-written lines (watchdog alarms) carry this in place of a port label.
ALARM_LABEL = "alarm"

_ESCAPE = {b: f"\\x{b:02X}" for b in range(256) if not 0x20 <= b <= 0x7E or b == 0x5C}
_UNESCAPE_RE = re.compile(r"\\x([0-9A-F]{2})")


def escape(data: bytes) -> str:
    return data.decode("latin-1").translate(_ESCAPE)


def unescape(text: str) -> bytes:
    out = bytearray()
    pos = 0
    for m in _UNESCAPE_RE.finditer(text):
        out += text[pos:m.start()].encode("ascii")
        out.append(int(m.group(1), 16))
        pos = m.end()
    out += text[pos:].encode("ascii")
    return bytes(out)


@dataclass(frozen=True)
class LogLine:
    timestamp: str
    host: str
    port_label: str
    payload: str

    def format(self) -> str:
        return f"{self.timestamp} {self.host} {self.port_label} {self.payload}"

    @classmethod
    def parse(cls, line: str) -> "LogLine":
        parts = line.rstrip("\n").split(" ", 3)
        if len(parts) < 3:
            raise ValueError(f"not a console log line: {line!r}")
        payload = parts[3] if len(parts) == 4 else ""
        return cls(parts[0], parts[1], parts[2], payload)

    @property
    def raw(self) -> bytes:
        """The console bytes this line stands for"""
        if self.payload.endswith(NO_CRLF_MARK):
            return unescape(self.payload[: -len(NO_CRLF_MARK)])
        return unescape(self.payload) + b"\r\n"

    @property
    def text(self) -> str:
        """Line content without terminator, for pattern matching"""
        data = self.raw
        if data.endswith(b"\r\n"):
            data = data[:-2]
        return data.decode("latin-1")


def make_payload(data: bytes) -> str:
    if data.endswith(b"\r\n"):
        return escape(data[:-2])
    return escape(data) + NO_CRLF_MARK


class LineAssembler:
    """
    Cuts one port's byte stream into log lines.

    Flush on LF, when flush_bytes have accumulated, or after idle_flush
    seconds without new bytes (checked by poll_idle).
    """

    def __init__(self, flush_bytes: int = DEFAULT_FLUSH_BYTES, idle_flush: float = DEFAULT_IDLE_FLUSH):
        self.flush_bytes = flush_bytes
        self.idle_flush = idle_flush
        self._buf = bytearray()
        self._last_byte_at: Optional[float] = None

    @property
    def pending(self) -> bytes:
        return bytes(self._buf)

    def feed(self, data: bytes, now: float) -> List[bytes]:
        lines = []
        self._last_byte_at = now
        pos = 0
        while pos < len(data):
            room = self.flush_bytes - len(self._buf)
            nl = data.find(b"\n", pos, pos + room)
            end = nl + 1 if nl >= 0 else min(len(data), pos + room)
            self._buf += data[pos:end]
            pos = end
            if nl >= 0 or len(self._buf) >= self.flush_bytes:
                lines.append(bytes(self._buf))
                self._buf.clear()
        return lines

    def poll_idle(self, now: float) -> Optional[bytes]:
        if self._buf and self._last_byte_at is not None and now - self._last_byte_at >= self.idle_flush:
            line = bytes(self._buf)
            self._buf.clear()
            return line
        return None

    def flush(self) -> Optional[bytes]:
        if not self._buf:
            return None
        line = bytes(self._buf)
        self._buf.clear()
        return line


class ConsoleLogSink:
    """
    Append-only console log file, optionally mirrored to syslog.

    Write failures are reported to on_failure and never raised: console I/O
    must keep flowing when the log disk is full.
    """

    def __init__(
        self,
        path: Optional[str] = None,
        syslog_address: Optional[str] = None,
        on_failure: Optional[Callable[[Exception], None]] = None,
    ):
        self.path = Path(path) if path else None
        self.on_failure = on_failure
        self.lines: List[LogLine] = []
        self.keep_in_memory = path is None
        self._lock = threading.Lock()
        self._file = None
        self._syslog: Optional[logging.Logger] = None
        if syslog_address:
            self._syslog = logging.getLogger("farmcon.console")
            self._syslog.propagate = False
            self._syslog.addHandler(logging.handlers.SysLogHandler(address=syslog_address))
        self.failed = False

    def _open(self):
        if self._file is None and self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "a", encoding="ascii", buffering=1)
        return self._file

    def write(self, line: LogLine) -> bool:
        text = line.format()
        with self._lock:
            if self.keep_in_memory:
                self.lines.append(line)
            try:
                f = self._open()
                if f is not None:
                    f.write(text + "\n")
                if self._syslog is not None:
                    self._syslog.info(text)
                self.failed = False
                return True
            except Exception as e:
                self.failed = True
                if self.on_failure is not None:
                    self.on_failure(e)
                return False

    def read_lines(self) -> List[LogLine]:
        with self._lock:
            if self.path is None:
                return list(self.lines)
            if self._file is not None:
                self._file.flush()
            if not self.path.exists():
                return []
            with open(self.path, encoding="ascii") as f:
                return [LogLine.parse(raw) for raw in f if raw.strip()]

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None


def reconstruct_stream(lines: Iterable[LogLine], host: str) -> bytes:
    """Concatenate the console bytes of one host's log lines"""
    return b"".join(line.raw for line in lines if line.host == host and line.port_label != ALARM_LABEL)


def lines_by_host(lines: Iterable[LogLine]) -> Dict[str, List[LogLine]]:
    grouped: Dict[str, List[LogLine]] = {}
    for line in lines:
        grouped.setdefault(line.host, []).append(line)
    return grouped
