"""
Port Transport

Byte-stream endpoints standing in for the serial lines of a console server.

- LinkedEndpoint: one end of an in-process null-modem cable
  (create_linked_pair). Deterministic, used by the simulator and all tests.
- DeviceEndpoint: a character device (through pyserial) or a named pipe,
  opened exclusively (open_device).

Reads are bounded-blocking: read_available() returns 1..max bytes, or the
TIMEOUT sentinel when nothing arrived in time. Timeouts are measured on the
clock the endpoint was created with.
"""

import logging
import os
import select
import stat
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Optional, Set, Tuple, Union

import serial

from errors import DeviceUnavailable, EndpointClosed
from services.simclock import WallClock

logger = logging.getLogger(__name__)


class _Timeout:
    """Sentinel returned by read_available when no byte arrived in time"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self) -> bool:
        return False

    def __repr__(self) -> str:
        return "TIMEOUT"


TIMEOUT = _Timeout()

ReadResult = Union[bytes, _Timeout]


@dataclass(frozen=True, order=True)
class PortId:
    server_id: str
    index: int

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"port index must be >= 0, got {self.index}")

    @property
    def label(self) -> str:
        return f"ttyS{self.index}"


class PortEndpoint:
    """Interface shared by every backend"""

    raw = True  # bytes pass through unmodified, no newline or flow translation

    def write(self, data: bytes) -> None:
        raise NotImplementedError

    def read_available(self, max_bytes: int = 4096, timeout: float = 0.0) -> ReadResult:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        raise NotImplementedError


class LinkedEndpoint(PortEndpoint):
    """One end of an in-process linked pair"""

    def __init__(self, name: str, cond: threading.Condition, clock):
        self.name = name
        self._cond = cond
        self._clock = clock
        self._inbox: Deque[bytes] = deque()
        self._closed = False
        self.peer: Optional["LinkedEndpoint"] = None
        # Called after bytes land in this end's inbox; simulated devices use
        # it to react to input synchronously.
        self.listener: Optional[Callable[["LinkedEndpoint"], None]] = None

    @property
    def closed(self) -> bool:
        return self._closed

    def pending(self) -> int:
        with self._cond:
            return sum(len(chunk) for chunk in self._inbox)

    def write(self, data: bytes) -> None:
        if not data:
            return
        peer = self.peer
        with self._cond:
            if self._closed:
                raise EndpointClosed(f"{self.name} is closed")
            if peer is None or peer._closed:
                raise EndpointClosed(f"peer of {self.name} is gone")
            peer._inbox.append(bytes(data))
            self._cond.notify_all()
        if peer.listener is not None:
            peer.listener(peer)

    def read_available(self, max_bytes: int = 4096, timeout: float = 0.0) -> ReadResult:
        if max_bytes < 1:
            raise ValueError("max_bytes must be >= 1")
        with self._cond:
            deadline = self._clock.now() + timeout
            while not self._inbox:
                if self._closed or self.peer is None or self.peer._closed:
                    raise EndpointClosed(f"peer of {self.name} is gone")
                remaining = deadline - self._clock.now()
                if remaining <= 0:
                    return TIMEOUT
                self._clock.wait(self._cond, remaining)
            out = bytearray()
            while self._inbox and len(out) < max_bytes:
                chunk = self._inbox.popleft()
                take = max_bytes - len(out)
                if len(chunk) > take:
                    self._inbox.appendleft(chunk[take:])
                    chunk = chunk[:take]
                out += chunk
            return bytes(out)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


def create_linked_pair(clock=None, name: str = "link") -> Tuple[LinkedEndpoint, LinkedEndpoint]:
    """Two endpoints joined like a null-modem cable"""
    clock = clock or WallClock()
    cond = threading.Condition(threading.RLock())
    a = LinkedEndpoint(f"{name}.a", cond, clock)
    b = LinkedEndpoint(f"{name}.b", cond, clock)
    a.peer, b.peer = b, a
    return a, b


# --- device backend --------------------------------------------------------

_open_paths: Set[str] = set()
_open_lock = threading.Lock()


class DeviceEndpoint(PortEndpoint):
    """Exclusive endpoint over a serial character device or a named pipe"""

    def __init__(self, path: str, fd: Optional[int] = None, port: Optional[serial.Serial] = None):
        self.path = path
        self._fd = fd
        self._port = port
        self._closed = False
        self._read_lock = threading.Lock()

    @property
    def closed(self) -> bool:
        return self._closed

    def write(self, data: bytes) -> None:
        if self._closed:
            raise EndpointClosed(self.path)
        try:
            if self._port is not None:
                self._port.write(data)
                return
            view = memoryview(data)
            while view:
                select.select([], [self._fd], [], 1.0)
                try:
                    n = os.write(self._fd, view)
                except BlockingIOError:
                    continue
                view = view[n:]
        except (OSError, serial.SerialException) as e:
            raise EndpointClosed(f"{self.path}: {e}") from e

    def read_available(self, max_bytes: int = 4096, timeout: float = 0.0) -> ReadResult:
        if max_bytes < 1:
            raise ValueError("max_bytes must be >= 1")
        if self._closed:
            raise EndpointClosed(self.path)
        with self._read_lock:
            try:
                if self._port is not None:
                    self._port.timeout = timeout
                    first = self._port.read(1)
                    if not first:
                        return TIMEOUT
                    rest = self._port.read(min(self._port.in_waiting, max_bytes - 1)) if max_bytes > 1 else b""
                    return first + rest
                ready, _, _ = select.select([self._fd], [], [], timeout)
                if not ready:
                    return TIMEOUT
                data = os.read(self._fd, max_bytes)
            except BlockingIOError:
                return TIMEOUT
            except (OSError, serial.SerialException) as e:
                raise EndpointClosed(f"{self.path}: {e}") from e
        if not data:
            raise EndpointClosed(f"{self.path}: end of stream")
        return data

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            if self._port is not None:
                self._port.close()
            elif self._fd is not None:
                os.close(self._fd)
        finally:
            with _open_lock:
                _open_paths.discard(self.path)


def open_device(path: str) -> DeviceEndpoint:
    """Open a serial device or named pipe; one open endpoint per path"""
    real = os.path.realpath(path)
    with _open_lock:
        if real in _open_paths:
            raise DeviceUnavailable(f"{path} is busy")
        try:
            mode = os.stat(real).st_mode
        except OSError as e:
            raise DeviceUnavailable(f"{path}: {e.strerror}") from e
        try:
            if stat.S_ISFIFO(mode):
                fd = os.open(real, os.O_RDWR | os.O_NONBLOCK)
                endpoint = DeviceEndpoint(real, fd=fd)
            elif stat.S_ISCHR(mode):
                port = serial.Serial(real, timeout=0, exclusive=True,
                                     xonxoff=False, rtscts=False, dsrdtr=False)
                endpoint = DeviceEndpoint(real, port=port)
            else:
                raise DeviceUnavailable(f"{path} is not a character device or pipe")
        except (OSError, serial.SerialException) as e:
            raise DeviceUnavailable(f"{path}: {e}") from e
        _open_paths.add(real)
    logger.info(f"Opened device {real}")
    return endpoint
