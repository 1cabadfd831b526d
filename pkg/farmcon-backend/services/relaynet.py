"""
Relay Chain Protocol, Driver and Emulator

Up to eight 8-relay boxes cascade on one serial line, giving 64 reset
contacts. Every command is one 6-byte frame:

    STX  addr  cmd  dur  cks  ETX
    02   b*8+r P/N/F tenths addr^cmd^dur 03

A box answers a frame addressed to it with ACK+addr (06 aa), a frame with a
bad checksum with NAK (15). Frames for boxes that are not on the chain get no
answer. The box times a pulse itself; the driver returns on ACK.
"""

import enum
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from errors import AckTimeout, BadChecksum, BadCommand, BadFraming, EndpointClosed, Nak
from services.port_transport import PortEndpoint

logger = logging.getLogger(__name__)

STX = 0x02
ETX = 0x03
ACK = 0x06
NAK = 0x15
FRAME_LEN = 6

MAX_BOXES = 8
RELAYS_PER_BOX = 8

DEFAULT_PULSE_TENTHS = 10
DEFAULT_ACK_TIMEOUT = 2.0
DEFAULT_RETRIES = 1


class RelayCommand(enum.Enum):
    PULSE = 0x50
    ON = 0x4E
    OFF = 0x46


@dataclass(frozen=True, order=True)
class RelayAddress:
    box: int
    relay: int

    def __post_init__(self):
        if not 0 <= self.box < MAX_BOXES:
            raise ValueError(f"box must be 0..7, got {self.box}")
        if not 0 <= self.relay < RELAYS_PER_BOX:
            raise ValueError(f"relay must be 0..7, got {self.relay}")

    @property
    def flat(self) -> int:
        return self.box * RELAYS_PER_BOX + self.relay

    @classmethod
    def from_flat(cls, flat: int) -> "RelayAddress":
        return cls(flat // RELAYS_PER_BOX, flat % RELAYS_PER_BOX)

    def __str__(self) -> str:
        return f"{self.box}/{self.relay}"


@dataclass(frozen=True)
class RelayFrame:
    address: RelayAddress
    command: RelayCommand
    duration_tenths: int = 0

    def __post_init__(self):
        if not 0 <= self.duration_tenths <= 255:
            raise ValueError(f"duration_tenths must be 0..255, got {self.duration_tenths}")
        if self.command is not RelayCommand.PULSE and self.duration_tenths != 0:
            raise ValueError("duration is only meaningful for PULSE")


def encode(frame: RelayFrame) -> bytes:
    addr = frame.address.flat
    cmd = frame.command.value
    dur = frame.duration_tenths if frame.command is RelayCommand.PULSE else 0
    return bytes([STX, addr, cmd, dur, addr ^ cmd ^ dur, ETX])


def decode(raw: bytes) -> RelayFrame:
    """Decode the first 6 bytes of raw"""
    if len(raw) < FRAME_LEN or raw[0] != STX or raw[5] != ETX:
        raise BadFraming(f"not a relay frame: {raw[:FRAME_LEN].hex(' ')}")
    addr, cmd, dur, cks = raw[1], raw[2], raw[3], raw[4]
    if addr ^ cmd ^ dur != cks:
        raise BadChecksum(f"checksum {cks:02X} != {addr ^ cmd ^ dur:02X}")
    if addr >= MAX_BOXES * RELAYS_PER_BOX:
        raise BadFraming(f"address {addr} out of range")
    try:
        command = RelayCommand(cmd)
    except ValueError:
        raise BadCommand(f"unknown command byte {cmd:02X}")
    if command is not RelayCommand.PULSE and dur != 0:
        raise BadCommand(f"duration {dur} on {command.name}")
    return RelayFrame(RelayAddress.from_flat(addr), command, dur)


@dataclass(frozen=True)
class Ack:
    address: RelayAddress
    attempts: int


class RelayDriver:
    """Issues commands on one chain endpoint, one command in flight at a time"""

    def __init__(
        self,
        chain: PortEndpoint,
        ack_timeout: float = DEFAULT_ACK_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        name: str = "chain",
    ):
        self.chain = chain
        self.ack_timeout = ack_timeout
        self.retries = retries
        self.name = name
        self._lock = threading.Lock()

    def pulse(self, addr: RelayAddress, duration: float = DEFAULT_PULSE_TENTHS / 10) -> Ack:
        """
        Pulse one relay

        Args:
            addr: (box, relay) on this chain
            duration: seconds, in (0, 25.5]

        Raises:
            Nak: the box rejected the frame's checksum
            AckTimeout: no reply within ack_timeout, after retries
        """
        tenths = round(duration * 10)
        if not 0 < duration <= 25.5 or tenths < 1:
            raise ValueError(f"pulse duration must be in (0, 25.5] s, got {duration}")
        return self.send(RelayFrame(addr, RelayCommand.PULSE, tenths))

    def send(self, frame: RelayFrame) -> Ack:
        raw = encode(frame)
        expected = bytes([ACK, frame.address.flat])
        with self._lock:
            for attempt in range(1, self.retries + 2):
                self._drain()
                self.chain.write(raw)
                reply = self._read_reply()
                if reply is None:
                    logger.warning(f"[{self.name}] no ack from {frame.address} (attempt {attempt})")
                    continue
                if reply == bytes([NAK]):
                    raise Nak(f"box {frame.address.box} rejected frame for {frame.address}")
                if reply == expected:
                    return Ack(frame.address, attempt)
                logger.warning(f"[{self.name}] unexpected reply {reply.hex(' ')} for {frame.address}")
        raise AckTimeout(f"no ack from {frame.address} on {self.name}")

    def _drain(self) -> None:
        while self.chain.read_available(64, 0.0):
            pass

    def _read_reply(self) -> Optional[bytes]:
        """Read an ACK pair or a NAK; None on timeout"""
        buf = b""
        for _ in range(64):
            chunk = self.chain.read_available(1, self.ack_timeout)
            if not chunk:
                return None
            buf += chunk
            if buf[0] == NAK:
                return bytes([NAK])
            if buf[0] != ACK:
                buf = b""
                continue
            if len(buf) == 2:
                return buf
        return None


# --- emulator --------------------------------------------------------------

ResetSink = Callable[[RelayAddress, float], None]


@dataclass
class RelayBox:
    index: int
    contacts: List[bool] = field(default_factory=lambda: [False] * RELAYS_PER_BOX)
    sinks: Dict[int, ResetSink] = field(default_factory=dict)


class ChainEmulator:
    """
    A chain of relay boxes on the far end of a serial line.

    Box index is fixed by chain position at construction. Pulses are timed on
    the given clock; contact intervals are recorded for inspection.
    """

    def __init__(self, clock, box_count: int = MAX_BOXES):
        if not 1 <= box_count <= MAX_BOXES:
            raise ValueError(f"a chain holds 1..8 boxes, got {box_count}")
        self.clock = clock
        self.boxes = [RelayBox(i) for i in range(box_count)]
        self._buf = bytearray()
        self._lock = threading.RLock()
        self.pulses: List[Tuple[RelayAddress, float, Optional[float]]] = []
        self.frames_seen = 0

    def wire(self, addr: RelayAddress, sink: ResetSink) -> None:
        if addr.box >= len(self.boxes):
            raise ValueError(f"box {addr.box} is not on this chain")
        self.boxes[addr.box].sinks[addr.relay] = sink

    def contact(self, addr: RelayAddress) -> bool:
        return self.boxes[addr.box].contacts[addr.relay]

    def pulse_count(self) -> int:
        return len(self.pulses)

    def feed(self, raw: bytes) -> bytes:
        """Consume serial bytes, return the chain's reply bytes"""
        reply = bytearray()
        with self._lock:
            self._buf += raw
            while True:
                start = self._buf.find(bytes([STX]))
                if start < 0:
                    self._buf.clear()
                    break
                del self._buf[:start]
                if len(self._buf) < FRAME_LEN:
                    break
                candidate = bytes(self._buf[:FRAME_LEN])
                try:
                    frame = decode(candidate)
                except BadChecksum:
                    reply.append(NAK)
                    del self._buf[:FRAME_LEN]
                    continue
                except (BadFraming, BadCommand):
                    # Resynchronise on the next STX.
                    del self._buf[:1]
                    continue
                del self._buf[:FRAME_LEN]
                self.frames_seen += 1
                if frame.address.box >= len(self.boxes):
                    continue
                self._apply(frame)
                reply += bytes([ACK, frame.address.flat])
        return bytes(reply)

    def _apply(self, frame: RelayFrame) -> None:
        addr = frame.address
        box = self.boxes[addr.box]
        if frame.command is RelayCommand.ON:
            box.contacts[addr.relay] = True
            return
        if frame.command is RelayCommand.OFF:
            box.contacts[addr.relay] = False
            return
        width = frame.duration_tenths / 10
        start = self.clock.now()
        box.contacts[addr.relay] = True
        index = len(self.pulses)
        self.pulses.append((addr, start, None))

        def release():
            with self._lock:
                box.contacts[addr.relay] = False
                self.pulses[index] = (addr, start, self.clock.now())

        self.clock.call_at(start + width, release)
        sink = box.sinks.get(addr.relay)
        if sink is not None:
            sink(addr, width)

    def attach(self, endpoint) -> None:
        """Serve a LinkedEndpoint: answer each write synchronously"""

        def on_input(ep):
            data = ep.read_available(4096, 0.0)
            if data:
                answer = self.feed(data)
                if answer:
                    try:
                        ep.write(answer)
                    except EndpointClosed:
                        pass

        endpoint.listener = on_input
