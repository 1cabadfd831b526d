"""
Configuration

Server settings come from an INI file (FARMCON_CONFIG, default
./server.conf) with environment overrides loaded through python-dotenv.
Missing sections and keys fall back to the defaults below; bad values raise
ValueError at startup.
"""

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from dotenv import load_dotenv

from services.consoled import ConsoleSettings
from services.reset_service import DEFAULT_MIN_INTERVAL
from services.relaynet import DEFAULT_ACK_TIMEOUT, DEFAULT_RETRIES
from services.watchdog import WATCHDOG_PRINCIPAL, WatchdogPolicy

load_dotenv()

DEFAULT_CONFIG = "server.conf"


@dataclass(frozen=True)
class ServerSettings:
    server_id: str = "consrv01"
    registry_dir: str = "registry"
    console_log: Optional[str] = "console.log"
    audit_log: Optional[str] = "audit.log"
    report_dir: Optional[str] = None
    syslog: Optional[str] = None
    host: str = "0.0.0.0"
    port: int = 8000
    scheme: str = "ed25519"

    def __post_init__(self):
        if not self.server_id:
            raise ValueError("server_id must not be empty")
        if not 0 < self.port < 65536:
            raise ValueError(f"port must be 1..65535, got {self.port}")


@dataclass(frozen=True)
class RelaySettings:
    ack_timeout: float = DEFAULT_ACK_TIMEOUT
    retries: int = DEFAULT_RETRIES
    chains: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.ack_timeout <= 0 or self.retries < 0:
            raise ValueError("relay ack_timeout must be positive and retries >= 0")


@dataclass(frozen=True)
class ResetSettings:
    min_interval: float = DEFAULT_MIN_INTERVAL
    watchdog_principal: str = WATCHDOG_PRINCIPAL


@dataclass(frozen=True)
class Settings:
    server: ServerSettings
    console: ConsoleSettings
    relay: RelaySettings
    reset: ResetSettings
    watchdog: WatchdogPolicy
    ports: Dict[int, str] = field(default_factory=dict)


def _section(parser: configparser.ConfigParser, name: str) -> configparser.SectionProxy:
    if not parser.has_section(name):
        parser.add_section(name)
    return parser[name]


def _escape_bytes(text: str) -> bytes:
    return text.encode("utf-8").decode("unicode_escape").encode("latin-1")


def load_settings(path: Optional[str] = None) -> Settings:
    """
    Read the server config

    Args:
        path: INI file; defaults to $FARMCON_CONFIG or ./server.conf.
              A missing file means all defaults.
    """
    path = path or os.getenv("FARMCON_CONFIG", DEFAULT_CONFIG)
    parser = configparser.ConfigParser(interpolation=None)
    if path and Path(path).exists():
        parser.read(path, encoding="utf-8")

    s = _section(parser, "server")
    server = ServerSettings(
        server_id=os.getenv("FARMCON_SERVER_ID") or s.get("server_id", ServerSettings.server_id),
        registry_dir=os.getenv("FARMCON_REGISTRY") or s.get("registry_dir", ServerSettings.registry_dir),
        console_log=s.get("console_log", ServerSettings.console_log) or None,
        audit_log=s.get("audit_log", ServerSettings.audit_log) or None,
        report_dir=s.get("report_dir", "") or None,
        syslog=s.get("syslog", "") or None,
        host=s.get("host", ServerSettings.host),
        port=s.getint("port", ServerSettings.port),
        scheme=s.get("scheme", ServerSettings.scheme),
    )

    c = _section(parser, "console")
    relay_section = _section(parser, "relay")
    console = ConsoleSettings(
        ring_size=c.getint("ring_size", ConsoleSettings.ring_size),
        flush_bytes=c.getint("flush_bytes", ConsoleSettings.flush_bytes),
        idle_flush=c.getfloat("idle_flush", ConsoleSettings.idle_flush),
        escape=_escape_bytes(c.get("escape", "~.")),
        answerback_timeout=c.getfloat("answerback_timeout", ConsoleSettings.answerback_timeout),
        probe_attempts=c.getint("probe_attempts", ConsoleSettings.probe_attempts),
        session_buffer=c.getint("session_buffer", ConsoleSettings.session_buffer),
        pulse_tenths=relay_section.getint("pulse_tenths", ConsoleSettings.pulse_tenths),
    )

    relay = RelaySettings(
        ack_timeout=relay_section.getfloat("ack_timeout", DEFAULT_ACK_TIMEOUT),
        retries=relay_section.getint("retries", DEFAULT_RETRIES),
        chains={key[len("chain."):]: value for key, value in relay_section.items() if key.startswith("chain.")},
    )

    r = _section(parser, "reset")
    reset = ResetSettings(
        min_interval=r.getfloat("min_interval", DEFAULT_MIN_INTERVAL),
        watchdog_principal=r.get("watchdog_principal", WATCHDOG_PRINCIPAL),
    )

    w = _section(parser, "watchdog")
    watchdog = WatchdogPolicy(
        silence_threshold=w.getfloat("silence", WatchdogPolicy.silence_threshold),
        probe_retries=w.getint("probe_retries", WatchdogPolicy.probe_retries),
        max_restarts=w.getint("max_restarts", WatchdogPolicy.max_restarts),
        window=w.getfloat("window", WatchdogPolicy.window),
        boot_grace=w.getfloat("boot_grace", WatchdogPolicy.boot_grace),
        tick=w.getfloat("tick", WatchdogPolicy.tick),
    )

    ports: Dict[int, str] = {}
    for key, value in _section(parser, "ports").items():
        if not key.isdigit():
            raise ValueError(f"[ports] keys are port indexes, got {key!r}")
        ports[int(key)] = value

    return Settings(server, console, relay, reset, watchdog, ports)
