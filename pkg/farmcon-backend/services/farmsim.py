"""
Simulated Farm

Worker nodes on the far end of linked console pairs, reset lines wired to a
relay chain emulator, all on one SimClock. Topology file:

    node <host> console <port> [reset <box> <relay>] [heartbeat <s>] [transcript <file>]

A transcript file holds `<delay seconds> <text>` lines; `{host}` in the text
is replaced by the node's hostname. Everything the farm does is a function of
(topology, seed, injected events).
"""

import enum
import logging
import os
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple, Union

from errors import EndpointClosed, TopologyError
from services import registry as reg_mod
from services.port_transport import LinkedEndpoint, PortEndpoint, create_linked_pair
from services.registry import ConsoleWiring, InterconnectionRecord, Registry, ResetWiring
from services.relaynet import ChainEmulator, RelayAddress, MAX_BOXES
from services.simclock import SimClock

logger = logging.getLogger(__name__)

PRE_CONSOLE_DELAY = 2.0
ENQ = 0x05
PANIC_LINE = b"Kernel panic - not syncing: Attempted to kill init!\r\n"

DEFAULT_TRANSCRIPT: List[Tuple[float, str]] = [
    (0.0, "LILO 22.5.1 Loading linux........."),
    (0.4, "Linux version 2.4.20-28.7smp (gcc version 2.96 20000731) #1 SMP"),
    (0.1, "BIOS-provided physical RAM map:"),
    (0.3, "Kernel command line: ro root=/dev/hda1 console=tty0 console=ttyS0,9600"),
    (1.2, "Freeing unused kernel memory: 236k freed"),
    (0.8, "INIT: version 2.78 booting"),
    (2.5, "{host} login: "),
]


class NodeState(enum.Enum):
    OFF = "Off"
    BOOTING = "Booting"
    UP = "Up"
    HUNG = "Hung"
    PANICED = "Paniced"


@dataclass(frozen=True)
class NodeSpec:
    host: str
    port: int
    reset: Optional[RelayAddress] = None
    heartbeat: Optional[float] = None
    transcript: Optional[str] = None
    line_no: int = 0


def parse_topology(text: str, path: str = "topology") -> List[NodeSpec]:
    specs: List[NodeSpec] = []
    hosts: Dict[str, int] = {}
    ports: Dict[int, int] = {}
    relays: Dict[RelayAddress, int] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        f = raw.split("#", 1)[0].split()
        if not f:
            continue
        where = f"{path}:{line_no}"
        if f[0] != "node" or len(f) < 4 or f[2] != "console":
            raise TopologyError(f"{where}: expected: node <host> console <port> [...]")
        host = f[1]
        try:
            port = int(f[3])
            reset = None
            heartbeat = None
            transcript = None
            rest = f[4:]
            while rest:
                key = rest[0]
                if key == "reset" and len(rest) >= 3:
                    reset = RelayAddress(int(rest[1]), int(rest[2]))
                    rest = rest[3:]
                elif key == "heartbeat" and len(rest) >= 2:
                    heartbeat = float(rest[1])
                    if heartbeat <= 0:
                        raise ValueError("heartbeat must be positive")
                    rest = rest[2:]
                elif key == "transcript" and len(rest) >= 2:
                    transcript = rest[1]
                    rest = rest[2:]
                else:
                    raise TopologyError(f"{where}: unexpected {key!r}")
        except ValueError as e:
            raise TopologyError(f"{where}: {e}")
        if port < 0:
            raise TopologyError(f"{where}: port must be >= 0")
        if host in hosts:
            raise TopologyError(f"{where}: host {host} already defined at line {hosts[host]}")
        if port in ports:
            raise TopologyError(f"{where}: console port {port} already used at line {ports[port]}")
        if reset is not None and reset in relays:
            raise TopologyError(f"{where}: relay {reset} already used at line {relays[reset]}")
        hosts[host] = line_no
        ports[port] = line_no
        if reset is not None:
            relays[reset] = line_no
        specs.append(NodeSpec(host, port, reset, heartbeat, transcript, line_no))
    return specs


def parse_transcript(text: str) -> List[Tuple[float, str]]:
    lines = []
    for raw in text.splitlines():
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        delay, _, body = raw.partition(" ")
        lines.append((float(delay), body))
    return lines


class SimNode:
    """One worker node as seen through its serial console"""

    def __init__(
        self,
        spec: NodeSpec,
        clock: SimClock,
        endpoint: LinkedEndpoint,
        seed: int = 0,
        transcript: Optional[List[Tuple[float, str]]] = None,
        record: bool = True,
    ):
        self.spec = spec
        self.host = spec.host
        self.clock = clock
        self.endpoint = endpoint
        self.rng = random.Random(f"{seed}:{spec.host}")
        self.transcript = [(d, text.replace("{host}", spec.host)) for d, text in (transcript or DEFAULT_TRANSCRIPT)]
        self.state = NodeState.OFF
        self.record = record
        self.output = bytearray()
        self.timeline: List[Tuple[float, bytes]] = []
        self.boots = 0
        self.heartbeats = 0
        self._generation = 0
        self._traffic_rate = 0.0
        self._traffic_active = False
        self.hang_on_boot = False
        endpoint.listener = self._on_input

    @property
    def transcript_bytes(self) -> bytes:
        return b"".join(text.encode("latin-1") + b"\r\n" for _, text in self.transcript)

    def _emit(self, data: bytes) -> None:
        if self.record:
            self.output += data
            self.timeline.append((self.clock.now(), data))
        try:
            self.endpoint.write(data)
        except EndpointClosed:
            pass

    def _bump(self) -> None:
        """Invalidate every pending timer of this node"""
        self._generation += 1
        self._traffic_active = False

    def _later(self, delay: float, action: Callable[[], None]) -> None:
        generation = self._generation

        def fire():
            if generation == self._generation:
                action()

        self.clock.call_later(delay, fire)

    # --- state transitions -------------------------------------------------

    def boot(self) -> None:
        """Any state -> Booting; transcript restarts after the BIOS delay"""
        self._bump()
        self.state = NodeState.BOOTING
        self.boots += 1
        self._later(PRE_CONSOLE_DELAY, lambda: self._transcript_step(0))

    def _transcript_step(self, i: int) -> None:
        if i >= len(self.transcript):
            self._come_up()
            return
        delay, text = self.transcript[i]

        def emit():
            self._emit(text.encode("latin-1") + b"\r\n")
            self._transcript_step(i + 1)

        if delay > 0:
            self._later(delay, emit)
        else:
            emit()

    def _come_up(self) -> None:
        if self.hang_on_boot:
            self.state = NodeState.HUNG
            return
        self.state = NodeState.UP
        if self.spec.heartbeat:
            self._later(self.spec.heartbeat, self._heartbeat)
        self._schedule_traffic()

    def _heartbeat(self) -> None:
        if self.state is not NodeState.UP:
            return
        self.heartbeats += 1
        self._emit(f"heartbeat {self.heartbeats}\r\n".encode())
        self._later(self.spec.heartbeat, self._heartbeat)

    def reset(self, addr: Optional[RelayAddress] = None, width: float = 0.0) -> None:
        logger.debug(f"{self.host} reset (pulse {width}s)")
        self.boot()

    def power(self, on: bool) -> None:
        if on:
            if self.state is NodeState.OFF:
                self.boot()
            return
        self._bump()
        self.state = NodeState.OFF

    def inject_hang(self, persistent: bool = False) -> None:
        """Up -> Hung; persistent nodes hang again at the end of every boot"""
        if self.state is not NodeState.UP:
            raise ValueError(f"{self.host} is {self.state.value}; only an Up node can hang")
        self.hang_on_boot = persistent
        self._bump()
        self.state = NodeState.HUNG

    def inject_panic(self) -> None:
        if self.state is not NodeState.UP:
            raise ValueError(f"{self.host} is {self.state.value}; only an Up node can panic")
        self._bump()
        self._emit(PANIC_LINE)
        self.state = NodeState.PANICED

    # --- console input -----------------------------------------------------

    def _on_input(self, endpoint: LinkedEndpoint) -> None:
        data = endpoint.read_available(4096, 0.0)
        if not data or self.state is not NodeState.UP:
            return
        out = bytearray()
        for b in data:
            if b == ENQ:
                out += b"\x06ID:" + self.host.encode() + b"\r\n"
            else:
                out.append(b)
        self._emit(bytes(out))

    # --- background traffic ------------------------------------------------

    def start_traffic(self, rate: float) -> None:
        """Random console output at about `rate` bytes per second while Up"""
        self._traffic_rate = rate
        if self.state is NodeState.UP:
            self._schedule_traffic()

    def _schedule_traffic(self) -> None:
        if self._traffic_rate > 0 and not self._traffic_active:
            self._traffic_active = True
            self._later(self._traffic_interval(), self._traffic)

    def _traffic_interval(self) -> float:
        return 0.5

    def _traffic(self) -> None:
        if self.state is not NodeState.UP or self._traffic_rate <= 0:
            self._traffic_active = False
            return
        size = max(1, int(self._traffic_rate * self._traffic_interval() * self.rng.uniform(0.5, 1.5)))
        chunk = bytearray()
        while len(chunk) < size:
            if self.rng.random() < 0.1:
                chunk += bytes(self.rng.choice(_NOISE) for _ in range(8))
            else:
                words = " ".join(self.rng.choice(_WORDS) for _ in range(self.rng.randint(2, 12)))
                chunk += words.encode() + (b"\r\n" if self.rng.random() < 0.9 else b"\n")
        self._emit(bytes(chunk[:size]))
        self._later(self._traffic_interval(), self._traffic)


_WORDS = ["kernel:", "eth0:", "link", "up", "down", "job", "started", "finished", "cpu0",
          "memory", "ok", "warning", "disk", "hda:", "dma", "timeout", "nfs:", "server", "not", "responding"]
_NOISE = bytes(range(256))


class ChainLine(PortEndpoint):
    """Daemon side of the relay chain cable, with fault injection"""

    def __init__(self, endpoint: LinkedEndpoint):
        self.endpoint = endpoint
        self.unplugged = False
        self._corrupt_next = False
        self.writes = 0

    @property
    def closed(self) -> bool:
        return self.endpoint.closed

    def corrupt_next_write(self) -> None:
        self._corrupt_next = True

    def write(self, data: bytes) -> None:
        self.writes += 1
        if self.unplugged:
            return
        if self._corrupt_next and len(data) >= 4:
            self._corrupt_next = False
            damaged = bytearray(data)
            damaged[3] ^= 0x01
            data = bytes(damaged)
        self.endpoint.write(data)

    def read_available(self, max_bytes: int = 4096, timeout: float = 0.0):
        return self.endpoint.read_available(max_bytes, timeout)

    def close(self) -> None:
        self.endpoint.close()


class FarmHarness:
    def __init__(self, clock: SimClock, server_id: str, chain_name: str, emulator: ChainEmulator, chain_endpoint: ChainLine):
        self.clock = clock
        self.server_id = server_id
        self.chain_name = chain_name
        self.emulator = emulator
        self.chain_endpoint = chain_endpoint
        self.nodes: Dict[str, SimNode] = {}
        self.console_endpoints: Dict[int, LinkedEndpoint] = {}

    def node(self, host: str) -> SimNode:
        return self.nodes[host]

    def inject_hang(self, host: str, persistent: bool = False) -> None:
        self.nodes[host].inject_hang(persistent)

    def inject_panic(self, host: str) -> None:
        self.nodes[host].inject_panic()

    def power(self, host: str, on: bool) -> None:
        self.nodes[host].power(on)

    def corrupt_next_relay_write(self) -> None:
        self.chain_endpoint.corrupt_next_write()

    def unplug_chain(self, unplugged: bool = True) -> None:
        self.chain_endpoint.unplugged = unplugged

    def start_traffic(self, rate: float) -> None:
        for node in self.nodes.values():
            node.start_traffic(rate)

    def states(self) -> Dict[str, NodeState]:
        return {host: node.state for host, node in self.nodes.items()}

    def records(self) -> List[InterconnectionRecord]:
        out = []
        for node in self.nodes.values():
            reset = None
            if node.spec.reset is not None:
                reset = ResetWiring(self.server_id, self.chain_name, node.spec.reset)
            out.append(InterconnectionRecord(node.host, ConsoleWiring(self.server_id, node.spec.port), reset))
        return out

    def registry(self, grants: Iterable = (), keys: Iterable = ()) -> Registry:
        return Registry(self.records(), list(grants), list(keys))

    def registry_text(self) -> str:
        return reg_mod.dump_files(self.registry())[reg_mod.INTERCONNECTIONS]

    def run(self, seconds: float, step: float = 0.1, on_step: Optional[Callable[[], None]] = None) -> None:
        """Advance the clock in steps, calling on_step after each one"""
        end = self.clock.now() + seconds
        while self.clock.now() < end - 1e-9:
            self.clock.advance_to(min(end, self.clock.now() + step))
            if on_step is not None:
                on_step()

    def run_until_up(self, limit: float = 60.0, step: float = 0.1, on_step: Optional[Callable[[], None]] = None) -> None:
        end = self.clock.now() + limit
        while any(n.state is NodeState.BOOTING for n in self.nodes.values()) and self.clock.now() < end:
            self.run(step, step, on_step)


def _load_topology(spec: Union[str, os.PathLike]) -> Tuple[str, str, Optional[Path]]:
    if isinstance(spec, os.PathLike) or ("\n" not in spec and Path(spec).is_file()):
        path = Path(spec)
        return path.read_text(encoding="utf-8"), str(path), path.parent
    return spec, "topology", None


def spawn_farm(
    spec: Union[str, os.PathLike],
    seed: int = 0,
    server_id: str = "consrv01",
    chain_name: str = "chain0",
    clock: Optional[SimClock] = None,
    box_count: int = MAX_BOXES,
    power_on: bool = True,
    record: bool = True,
) -> FarmHarness:
    """
    Build a farm from topology text or a topology file path.

    Raises:
        TopologyError: malformed line, duplicate host, port or relay address
    """
    text, path, base = _load_topology(spec)
    specs = parse_topology(text, path)
    clock = clock or SimClock()
    emulator = ChainEmulator(clock, box_count)
    daemon_side, box_side = create_linked_pair(clock, f"{server_id}.{chain_name}")
    emulator.attach(box_side)
    harness = FarmHarness(clock, server_id, chain_name, emulator, ChainLine(daemon_side))

    transcripts: Dict[str, List[Tuple[float, str]]] = {}
    for ns in specs:
        transcript = None
        if ns.transcript:
            file = Path(ns.transcript)
            if not file.is_absolute() and base is not None:
                file = base / file
            if str(file) not in transcripts:
                try:
                    transcripts[str(file)] = parse_transcript(file.read_text(encoding="utf-8"))
                except (OSError, ValueError) as e:
                    raise TopologyError(f"{path}:{ns.line_no}: transcript {ns.transcript}: {e}")
            transcript = transcripts[str(file)]
        daemon_end, node_end = create_linked_pair(clock, f"{server_id}.ttyS{ns.port}")
        node = SimNode(ns, clock, node_end, seed, transcript, record)
        harness.nodes[ns.host] = node
        harness.console_endpoints[ns.port] = daemon_end
        if ns.reset is not None:
            try:
                emulator.wire(ns.reset, node.reset)
            except ValueError as e:
                raise TopologyError(f"{path}:{ns.line_no}: {e}")

    if power_on:
        for node in harness.nodes.values():
            node.power(True)
    logger.info(f"Spawned farm {server_id}: {len(harness.nodes)} nodes, seed {seed}")
    return harness
