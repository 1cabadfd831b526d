"""Shared fixtures: a simulated farm wired to a console daemon, registry and keys."""

import base64
from dataclasses import dataclass
from typing import Dict, List, Optional

import pytest

from error_handler import ErrorHandler
from services.authchan import DigestTestScheme
from services.console_log import ConsoleLogSink
from services.consoled import ConsoleDaemon, ConsoleSettings
from services.farmsim import FarmHarness, spawn_farm
from services.registry import Action, Grant, PrincipalKey
from services.relaynet import RelayDriver
from services.reset_service import AuditLog, ResetService
from services.simclock import SimClock
from services.watchdog import Watchdog, WatchdogPolicy

SERVER_ID = "consrv01"
SCHEME = DigestTestScheme()
PRINCIPALS = ("admin", "ops", "guest", "mallory")


def principal_keys(principal: str):
    """(private, public) test key pair for a principal"""
    return SCHEME.keypair(principal.encode().ljust(32, b"\0"))


def standard_keys() -> List[PrincipalKey]:
    return [
        PrincipalKey(p, base64.b64encode(principal_keys(p)[1]).decode())
        for p in PRINCIPALS
    ]


def standard_grants() -> List[Grant]:
    return [
        Grant("admin", Action.ADMIN, "*"),
        Grant("ops", Action.CONSOLE, "lxb*"),
        Grant("ops", Action.RESET, "lxb*"),
        Grant("guest", Action.CONSOLE_RO, "lxb0001"),
        Grant("watchdog", Action.RESET, "*"),
    ]


def topology_text(n: int, heartbeat: Optional[float] = None, resets: bool = True) -> str:
    """n nodes lxb0000.. on ports 0.., relay (i // 8, i % 8)"""
    lines = []
    for i in range(n):
        line = f"node lxb{i:04d} console {i}"
        if resets:
            line += f" reset {i // 8} {i % 8}"
        if heartbeat:
            line += f" heartbeat {heartbeat}"
        lines.append(line)
    return "\n".join(lines) + "\n"


@dataclass
class Farm:
    clock: SimClock
    harness: FarmHarness
    daemon: ConsoleDaemon
    resets: ResetService
    watchdog: Watchdog
    errors: ErrorHandler

    def step(self) -> None:
        self.daemon.poll()
        self.watchdog.maybe_tick()

    def run(self, seconds: float, step: float = 0.5, watchdog: bool = True) -> None:
        self.harness.run(seconds, step, self.step if watchdog else self.daemon.poll)

    def boot(self) -> None:
        self.harness.run_until_up(limit=120.0, on_step=self.daemon.poll)
        self.daemon.poll()

    def node(self, host: str):
        return self.harness.nodes[host]

    @property
    def hosts(self) -> List[str]:
        return sorted(self.harness.nodes)


def build_farm(
    n: int = 4,
    seed: int = 0,
    topology: Optional[str] = None,
    policy: Optional[WatchdogPolicy] = None,
    console_settings: Optional[ConsoleSettings] = None,
    box_count: int = 8,
    min_interval: float = 30.0,
    log_path: Optional[str] = None,
    audit_path: Optional[str] = None,
    grants: Optional[List[Grant]] = None,
    heartbeat: Optional[float] = None,
) -> Farm:
    clock = SimClock()
    harness = spawn_farm(topology or topology_text(n, heartbeat), seed=seed, server_id=SERVER_ID,
                         clock=clock, box_count=box_count)
    registry = harness.registry(standard_grants() if grants is None else grants, standard_keys())
    errors = ErrorHandler(clock=clock)
    driver = RelayDriver(harness.chain_endpoint, name=harness.chain_name)
    daemon = ConsoleDaemon(
        SERVER_ID,
        registry,
        harness.console_endpoints,
        clock,
        log_sink=ConsoleLogSink(log_path),
        chains={harness.chain_name: driver},
        settings=console_settings,
        error_handler=errors,
    )
    resets = ResetService(daemon, AuditLog(audit_path), min_interval)
    watchdog = Watchdog(daemon, resets, policy or WatchdogPolicy(), error_handler=errors)
    return Farm(clock, harness, daemon, resets, watchdog, errors)


@pytest.fixture
def farm() -> Farm:
    """Four booted nodes, all with reset wiring, no heartbeat"""
    f = build_farm(4)
    f.boot()
    return f


@pytest.fixture
def chatty_farm() -> Farm:
    """Four booted nodes with a 30 s heartbeat"""
    f = build_farm(4, heartbeat=30)
    f.boot()
    return f


def host_bytes(farm: Farm) -> Dict[str, bytes]:
    return {host: bytes(node.output) for host, node in farm.harness.nodes.items()}
