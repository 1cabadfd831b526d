"""
Central Information Store

Three line-oriented text files describe the farm:

    interconnections.conf
        console <host> <server> <port>
        reset   <host> <server> <device> <box> <relay>
    grants.conf
        grant <principal> <console|console-ro|reset|admin> <host-glob>
    keys.conf
        key <principal> <base64-public-key>

`#` starts a comment, fields are whitespace separated. A Registry is an
immutable snapshot; every change produces a new snapshot, and save() writes
all three files atomically (temp file + rename).

Detection reports use their own small format:

    detected <server> <RFC3339 timestamp>
    port <index> <host|unknown>
"""

import base64
import binascii
import enum
import fnmatch
import hashlib
import logging
import os
import re
from dataclasses import dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from errors import ConflictError, NoResetWiring, NotFound, ParseError, UnknownHost, UnknownServer
from services.relaynet import RelayAddress
from services.simclock import parse_rfc3339, rfc3339

logger = logging.getLogger(__name__)

INTERCONNECTIONS = "interconnections.conf"
GRANTS = "grants.conf"
KEYS = "keys.conf"

UNKNOWN = None  # detected_host value for a port that gave no answerback

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._@-]*$")


class Action(enum.Enum):
    CONSOLE_RO = "console-ro"
    CONSOLE = "console"
    RESET = "reset"
    ADMIN = "admin"


# What each granted action allows. Console implies read-only console; reset
# and console are unrelated; admin allows everything.
_IMPLIES = {
    Action.ADMIN: frozenset(Action),
    Action.CONSOLE: frozenset({Action.CONSOLE, Action.CONSOLE_RO}),
    Action.RESET: frozenset({Action.RESET}),
    Action.CONSOLE_RO: frozenset({Action.CONSOLE_RO}),
}


@dataclass(frozen=True, order=True)
class ConsoleWiring:
    server_id: str
    port_index: int


@dataclass(frozen=True, order=True)
class ResetWiring:
    server_id: str
    device: str
    address: RelayAddress


@dataclass(frozen=True)
class InterconnectionRecord:
    host: str
    console: ConsoleWiring
    reset: Optional[ResetWiring] = None


@dataclass(frozen=True)
class Grant:
    principal: str
    action: Action
    host_pattern: str

    def allows(self, action: Action, host: str) -> bool:
        return action in _IMPLIES[self.action] and fnmatch.fnmatchcase(host, self.host_pattern)

    def sort_key(self) -> Tuple[str, str, str]:
        return (self.principal, self.action.value, self.host_pattern)


@dataclass(frozen=True)
class PrincipalKey:
    principal: str
    public_key: str

    @property
    def raw(self) -> bytes:
        return base64.b64decode(self.public_key, validate=True)

    @property
    def key_id(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()[:16]


@dataclass(frozen=True)
class DetectionReport:
    server_id: str
    entries: Tuple[Tuple[int, Optional[str]], ...]
    generated_at: datetime

    def __post_init__(self):
        ports = [p for p, _ in self.entries]
        if len(ports) != len(set(ports)):
            raise ValueError("duplicate port index in detection report")


@dataclass(frozen=True)
class DetectionConflict:
    server_id: str
    port_index: int
    was: Optional[str]
    saw: str
    note: str = ""

    def __str__(self) -> str:
        was = self.was if self.was is not None else "-"
        text = f"port {self.port_index}: was {was}, saw {self.saw}"
        return f"{text} ({self.note})" if self.note else text


@dataclass(frozen=True)
class ConfigBundle:
    server_id: str
    files: Dict[str, str]

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            _atomic_write(directory / name, text)


class Registry:
    """Immutable snapshot of interconnections, grants and keys"""

    def __init__(
        self,
        records: Iterable[InterconnectionRecord] = (),
        grants: Iterable[Grant] = (),
        keys: Iterable[PrincipalKey] = (),
    ):
        self._records: Dict[str, InterconnectionRecord] = {}
        self._by_console: Dict[ConsoleWiring, str] = {}
        self._by_reset: Dict[ResetWiring, str] = {}
        for rec in records:
            self._add_record(rec)
        self._grants: Tuple[Grant, ...] = tuple(sorted(set(grants), key=Grant.sort_key))
        self._keys: Dict[str, PrincipalKey] = {}
        for key in keys:
            if key.principal in self._keys:
                raise ConflictError(f"second key for principal {key.principal}")
            self._keys[key.principal] = key

    def _add_record(self, rec: InterconnectionRecord) -> None:
        if rec.host in self._records:
            raise ConflictError(f"duplicate host {rec.host}")
        holder = self._by_console.get(rec.console)
        if holder is not None:
            raise ConflictError(
                f"console {rec.console.server_id}:{rec.console.port_index} claimed by {holder} and {rec.host}"
            )
        if rec.reset is not None:
            holder = self._by_reset.get(rec.reset)
            if holder is not None:
                raise ConflictError(f"reset {_reset_str(rec.reset)} claimed by {holder} and {rec.host}")
            self._by_reset[rec.reset] = rec.host
        self._by_console[rec.console] = rec.host
        self._records[rec.host] = rec

    # --- read side ---------------------------------------------------------

    @property
    def records(self) -> List[InterconnectionRecord]:
        return [self._records[h] for h in sorted(self._records)]

    @property
    def grants(self) -> Tuple[Grant, ...]:
        return self._grants

    @property
    def keys(self) -> Dict[str, PrincipalKey]:
        return dict(self._keys)

    def servers(self) -> List[str]:
        names = {rec.console.server_id for rec in self._records.values()}
        names |= {rec.reset.server_id for rec in self._records.values() if rec.reset}
        return sorted(names)

    def hosts_on(self, server_id: str) -> List[str]:
        return sorted(
            rec.host
            for rec in self._records.values()
            if rec.console.server_id == server_id or (rec.reset and rec.reset.server_id == server_id)
        )

    def console_ports(self, server_id: str) -> Dict[int, str]:
        return {
            wiring.port_index: host
            for wiring, host in self._by_console.items()
            if wiring.server_id == server_id
        }

    def record(self, host: str) -> InterconnectionRecord:
        try:
            return self._records[host]
        except KeyError:
            raise UnknownHost(host)

    def host_at(self, server_id: str, port_index: int) -> Optional[str]:
        return self._by_console.get(ConsoleWiring(server_id, port_index))

    def key_for(self, principal: str) -> Optional[PrincipalKey]:
        return self._keys.get(principal)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Registry):
            return NotImplemented
        return dump_files(self) == dump_files(other)

    def __repr__(self) -> str:
        return f"Registry({len(self._records)} hosts, {len(self._grants)} grants, {len(self._keys)} keys)"

    # --- write side (new snapshots) ----------------------------------------

    def with_records(self, records: Iterable[InterconnectionRecord]) -> "Registry":
        return Registry(records, self._grants, self._keys.values())

    def with_grant(self, grant: Grant) -> "Registry":
        _check_glob(grant.host_pattern)
        return Registry(self._records.values(), (*self._grants, grant), self._keys.values())

    def without_grant(self, grant: Grant) -> "Registry":
        remaining = [g for g in self._grants if g.sort_key() != grant.sort_key()]
        if len(remaining) == len(self._grants):
            raise NotFound(f"no such grant: {grant.principal} {grant.action.value} {grant.host_pattern}")
        return Registry(self._records.values(), remaining, self._keys.values())

    def with_key(self, key: PrincipalKey) -> "Registry":
        keys = {**self._keys, key.principal: key}
        return Registry(self._records.values(), self._grants, keys.values())


def _reset_str(wiring: ResetWiring) -> str:
    return f"{wiring.server_id}:{wiring.device}:{wiring.address}"


def valid_name(value: str) -> bool:
    """Host, server and principal names"""
    return bool(_NAME_RE.match(value))


def _check_glob(pattern: str) -> None:
    if not pattern or pattern.count("[") != pattern.count("]"):
        raise ValueError(f"invalid host pattern {pattern!r}")


# --- parsing ---------------------------------------------------------------

def _fields(path: str, text: str):
    for line_no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if body:
            yield line_no, body.split()


def _name(path: str, line_no: int, value: str, what: str) -> str:
    if not _NAME_RE.match(value):
        raise ParseError(path, line_no, f"invalid {what} {value!r}")
    return value


def _int(path: str, line_no: int, value: str, what: str, low: int, high: Optional[int] = None) -> int:
    try:
        number = int(value, 10)
    except ValueError:
        raise ParseError(path, line_no, f"{what} must be an integer, got {value!r}")
    if number < low or (high is not None and number > high):
        bound = f"{low}..{high}" if high is not None else f">= {low}"
        raise ParseError(path, line_no, f"{what} must be {bound}, got {number}")
    return number


def parse_interconnections(text: str, path: str = INTERCONNECTIONS) -> List[InterconnectionRecord]:
    consoles: Dict[str, Tuple[int, ConsoleWiring]] = {}
    resets: Dict[str, Tuple[int, ResetWiring]] = {}
    console_owner: Dict[ConsoleWiring, Tuple[int, str]] = {}
    reset_owner: Dict[ResetWiring, Tuple[int, str]] = {}

    for line_no, f in _fields(path, text):
        kind = f[0]
        if kind == "console":
            if len(f) != 4:
                raise ParseError(path, line_no, "expected: console <host> <server> <port>")
            host = _name(path, line_no, f[1], "host")
            wiring = ConsoleWiring(_name(path, line_no, f[2], "server"), _int(path, line_no, f[3], "port", 0))
            if host in consoles:
                raise ConflictError(f"{path}:{line_no}: duplicate console line for {host} (first at line {consoles[host][0]})")
            if wiring in console_owner:
                first_line, other = console_owner[wiring]
                raise ConflictError(
                    f"{path}:{line_no}: console {wiring.server_id}:{wiring.port_index} claimed by "
                    f"{other} (line {first_line}) and {host}"
                )
            consoles[host] = (line_no, wiring)
            console_owner[wiring] = (line_no, host)
        elif kind == "reset":
            if len(f) != 6:
                raise ParseError(path, line_no, "expected: reset <host> <server> <device> <box> <relay>")
            host = _name(path, line_no, f[1], "host")
            address = RelayAddress(
                _int(path, line_no, f[4], "box", 0, 7),
                _int(path, line_no, f[5], "relay", 0, 7),
            )
            wiring = ResetWiring(_name(path, line_no, f[2], "server"), f[3], address)
            if host in resets:
                raise ConflictError(f"{path}:{line_no}: duplicate reset line for {host} (first at line {resets[host][0]})")
            if wiring in reset_owner:
                first_line, other = reset_owner[wiring]
                raise ConflictError(
                    f"{path}:{line_no}: reset {_reset_str(wiring)} claimed by {other} (line {first_line}) and {host}"
                )
            resets[host] = (line_no, wiring)
            reset_owner[wiring] = (line_no, host)
        else:
            raise ParseError(path, line_no, f"unknown record kind {kind!r}")

    for host, (line_no, _) in resets.items():
        if host not in consoles:
            raise ParseError(path, line_no, f"reset wiring for {host} has no console record")

    return [
        InterconnectionRecord(host, wiring, resets.get(host, (0, None))[1])
        for host, (_, wiring) in consoles.items()
    ]


def parse_grants(text: str, path: str = GRANTS) -> List[Grant]:
    grants: Dict[Tuple[str, str, str], int] = {}
    result = []
    for line_no, f in _fields(path, text):
        if f[0] != "grant":
            raise ParseError(path, line_no, f"unknown record kind {f[0]!r}")
        if len(f) != 4:
            raise ParseError(path, line_no, "expected: grant <principal> <action> <pattern>")
        principal = _name(path, line_no, f[1], "principal")
        try:
            action = Action(f[2].lower())
        except ValueError:
            raise ParseError(path, line_no, f"unknown action {f[2]!r}")
        try:
            _check_glob(f[3])
        except ValueError as e:
            raise ParseError(path, line_no, str(e))
        key = (principal, action.value, f[3])
        if key in grants:
            raise ConflictError(f"{path}:{line_no}: duplicate grant (first at line {grants[key]})")
        grants[key] = line_no
        result.append(Grant(principal, action, f[3]))
    return result


def parse_keys(text: str, path: str = KEYS) -> List[PrincipalKey]:
    seen: Dict[str, int] = {}
    result = []
    for line_no, f in _fields(path, text):
        if f[0] != "key":
            raise ParseError(path, line_no, f"unknown record kind {f[0]!r}")
        if len(f) != 3:
            raise ParseError(path, line_no, "expected: key <principal> <base64>")
        principal = _name(path, line_no, f[1], "principal")
        try:
            raw = base64.b64decode(f[2], validate=True)
        except (binascii.Error, ValueError):
            raise ParseError(path, line_no, "public key is not valid base64")
        if not raw:
            raise ParseError(path, line_no, "empty public key")
        if principal in seen:
            raise ConflictError(
                f"{path}:{line_no}: second key for {principal} (first at line {seen[principal]}); "
                "one active key per principal"
            )
        seen[principal] = line_no
        result.append(PrincipalKey(principal, f[2]))
    return result


def _read(directory: Path, name: str) -> str:
    path = directory / name
    if not path.exists():
        return ""
    return path.read_text(encoding="utf-8")


def load(path) -> Registry:
    """Load a registry directory; missing files count as empty"""
    directory = Path(path)
    if not directory.is_dir():
        raise FileNotFoundError(f"registry directory {directory} does not exist")
    records = parse_interconnections(_read(directory, INTERCONNECTIONS), str(directory / INTERCONNECTIONS))
    grants = parse_grants(_read(directory, GRANTS), str(directory / GRANTS))
    keys = parse_keys(_read(directory, KEYS), str(directory / KEYS))
    registry = Registry(records, grants, keys)
    logger.info(f"Loaded {registry!r} from {directory}")
    return registry


# --- writing ---------------------------------------------------------------

def _interconnection_lines(records: Iterable[InterconnectionRecord]) -> str:
    lines = []
    for rec in sorted(records, key=lambda r: r.host):
        lines.append(f"console {rec.host} {rec.console.server_id} {rec.console.port_index}\n")
    for rec in sorted(records, key=lambda r: r.host):
        if rec.reset is not None:
            r = rec.reset
            lines.append(f"reset {rec.host} {r.server_id} {r.device} {r.address.box} {r.address.relay}\n")
    return "".join(lines)


def _grant_lines(grants: Iterable[Grant]) -> str:
    return "".join(
        f"grant {g.principal} {g.action.value} {g.host_pattern}\n" for g in sorted(grants, key=Grant.sort_key)
    )


def _key_lines(keys: Iterable[PrincipalKey]) -> str:
    return "".join(f"key {k.principal} {k.public_key}\n" for k in sorted(keys, key=lambda k: k.principal))


def dump_files(registry: Registry) -> Dict[str, str]:
    return {
        INTERCONNECTIONS: _interconnection_lines(registry.records),
        GRANTS: _grant_lines(registry.grants),
        KEYS: _key_lines(registry.keys.values()),
    }


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def save(registry: Registry, path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in dump_files(registry).items():
        _atomic_write(directory / name, text)
    logger.info(f"Saved {registry!r} to {directory}")


# --- queries ---------------------------------------------------------------

def lookup_console(reg: Registry, host: str) -> Tuple[str, int]:
    rec = reg.record(host)
    return rec.console.server_id, rec.console.port_index


def lookup_reset(reg: Registry, host: str) -> Tuple[str, str, RelayAddress]:
    rec = reg.record(host)
    if rec.reset is None:
        raise NoResetWiring(f"{host} has no reset wiring")
    return rec.reset.server_id, rec.reset.device, rec.reset.address


def authorize(reg: Registry, principal: str, action: Action, host: str) -> bool:
    return any(g.principal == principal and g.allows(action, host) for g in reg.grants)


def bundle_for_server(reg: Registry, server_id: str) -> ConfigBundle:
    """
    Per-server config: the records touching server_id, the grants that match
    at least one of its hosts, and the keys of the principals in those grants.
    """
    hosts = reg.hosts_on(server_id)
    if not hosts:
        raise UnknownServer(server_id)
    records = [reg.record(h) for h in hosts]
    grants = [g for g in reg.grants if any(fnmatch.fnmatchcase(h, g.host_pattern) for h in hosts)]
    principals = {g.principal for g in grants}
    keys = [k for p, k in reg.keys.items() if p in principals]
    return ConfigBundle(
        server_id,
        {
            INTERCONNECTIONS: _interconnection_lines(records),
            GRANTS: _grant_lines(grants),
            KEYS: _key_lines(keys),
        },
    )


def merge_detection(reg: Registry, report: DetectionReport) -> Tuple[Registry, List[DetectionConflict]]:
    """
    Fold a detection report into the store.

    Agreeing ports change nothing, newly seen hosts on unmapped ports are
    added, disagreements become conflicts and leave the record alone. Unknown
    entries never delete anything; reset wiring is never touched.
    """
    server = report.server_id
    if server not in reg.servers():
        raise UnknownServer(server)
    records = {rec.host: rec for rec in reg.records}
    claimed = {rec.console: rec.host for rec in records.values()}
    conflicts: List[DetectionConflict] = []

    for port, seen in sorted(report.entries, key=lambda e: e[0]):
        if seen is UNKNOWN:
            continue
        wiring = ConsoleWiring(server, port)
        current = claimed.get(wiring)
        if current == seen:
            continue
        if current is not None:
            conflicts.append(DetectionConflict(server, port, current, seen))
            continue
        if seen in records:
            elsewhere = records[seen].console
            conflicts.append(
                DetectionConflict(server, port, None, seen, f"{seen} is mapped to {elsewhere.server_id}:{elsewhere.port_index}")
            )
            continue
        records[seen] = InterconnectionRecord(seen, wiring)
        claimed[wiring] = seen
        logger.info(f"Detection added console {server}:{port} -> {seen}")

    return reg.with_records(records.values()), conflicts


def acknowledge_conflict(reg: Registry, conflict: DetectionConflict) -> Registry:
    """
    Apply one conflict explicitly: the port now belongs to conflict.saw.

    The displaced host loses its record; a displaced host that still has reset
    wiring is refused, that needs a manual edit of the store.
    """
    records = {rec.host: rec for rec in reg.records}
    wiring = ConsoleWiring(conflict.server_id, conflict.port_index)
    displaced = reg.host_at(conflict.server_id, conflict.port_index)
    if displaced is not None and displaced != conflict.saw:
        if records[displaced].reset is not None:
            raise ConflictError(f"{displaced} on port {conflict.port_index} has reset wiring; edit the store by hand")
        del records[displaced]
    moved = records.get(conflict.saw)
    if moved is not None:
        records[conflict.saw] = replace(moved, console=wiring)
    else:
        records[conflict.saw] = InterconnectionRecord(conflict.saw, wiring)
    logger.warning(f"Acknowledged detection conflict: {conflict}")
    return reg.with_records(records.values())


# --- detection report files ------------------------------------------------

def format_report(report: DetectionReport) -> str:
    lines = [f"detected {report.server_id} {rfc3339(report.generated_at)}\n"]
    for port, host in sorted(report.entries, key=lambda e: e[0]):
        lines.append(f"port {port} {host if host is not None else 'unknown'}\n")
    return "".join(lines)


def parse_report(text: str, path: str = "detection report") -> DetectionReport:
    header = None
    entries: List[Tuple[int, Optional[str]]] = []
    seen_ports = set()
    for line_no, f in _fields(path, text):
        if header is None:
            if f[0] != "detected" or len(f) != 3:
                raise ParseError(path, line_no, "expected header: detected <server> <timestamp>")
            try:
                header = (f[1], parse_rfc3339(f[2]))
            except ValueError:
                raise ParseError(path, line_no, f"bad timestamp {f[2]!r}")
            continue
        if f[0] != "port" or len(f) != 3:
            raise ParseError(path, line_no, "expected: port <index> <host|unknown>")
        port = _int(path, line_no, f[1], "port", 0)
        if port in seen_ports:
            raise ParseError(path, line_no, f"port {port} listed twice")
        seen_ports.add(port)
        entries.append((port, None if f[2] == "unknown" else _name(path, line_no, f[2], "host")))
    if header is None:
        raise ParseError(path, 1, "empty detection report")
    return DetectionReport(header[0], tuple(entries), header[1])
