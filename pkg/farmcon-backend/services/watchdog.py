"""
Liveness Watchdog

Restarts nodes that stop talking, a bounded number of times, then raises an
alarm for a human. Per host:

    Healthy --silence > S--> Suspect --probes fail--> Reset -> Booting (G)
                                                  `--> Alarm (K resets in W)

Any console byte puts a Suspect host back to Healthy. Alarmed stays until an
admin clears it.
"""

import enum
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

from errors import Denied, UnknownHost
from services import registry as reg_mod
from services.consoled import ConsoleDaemon
from services.registry import Action
from services.reset_service import AuditEvent, AuditOutcome, ResetRequest, ResetService
from services.simclock import rfc3339

logger = logging.getLogger(__name__)

WATCHDOG_PRINCIPAL = "watchdog"
RESET_REASON = "watchdog: unresponsive"


@dataclass(frozen=True)
class WatchdogPolicy:
    silence_threshold: float = 120.0
    probe_retries: int = 3
    max_restarts: int = 3
    window: float = 3600.0
    boot_grace: float = 180.0
    tick: float = 5.0

    def __post_init__(self):
        for name in ("silence_threshold", "probe_retries", "max_restarts", "window", "boot_grace", "tick"):
            if getattr(self, name) <= 0:
                raise ValueError(f"watchdog {name} must be positive")


class Phase(enum.Enum):
    HEALTHY = "Healthy"
    SUSPECT = "Suspect"
    BOOTING = "Booting"
    ALARMED = "Alarmed"


class ActionKind(enum.Enum):
    NONE = "None"
    PROBE = "Probe"
    RESET = "Reset"
    ALARM = "Alarm"


@dataclass(frozen=True)
class WatchdogAction:
    kind: ActionKind
    reason: str = ""


NO_ACTION = WatchdogAction(ActionKind.NONE)


@dataclass
class HostState:
    host: str
    last_output_at: float
    phase: Phase = Phase.HEALTHY
    restarts: Deque[float] = field(default_factory=deque)
    booting_until: float = 0.0
    probe_failed: bool = False
    cause: str = ""


class Watchdog:
    """
    Watchdog for every host on one console server.

    evaluate() decides; tick() decides and acts (probes, resets, alarms).
    """

    def __init__(
        self,
        daemon: ConsoleDaemon,
        reset_service: ResetService,
        policy: Optional[WatchdogPolicy] = None,
        principal: str = WATCHDOG_PRINCIPAL,
        error_handler=None,
    ):
        self.daemon = daemon
        self.reset_service = reset_service
        self.policy = policy or WatchdogPolicy()
        self.principal = principal
        self.error_handler = error_handler
        self.clock = daemon.clock
        self._states: Dict[str, HostState] = {}
        self._lock = threading.RLock()
        self._next_tick = self.clock.now() + self.policy.tick
        self.action_log: List[Tuple[float, str, ActionKind]] = []
        daemon.add_output_listener(self.note_output)

    def _state(self, host: str) -> HostState:
        with self._lock:
            st = self._states.get(host)
            if st is None:
                if host not in self.daemon.registry.hosts_on(self.daemon.server_id):
                    raise UnknownHost(host)
                st = HostState(host, self.clock.now())
                self._states[host] = st
            return st

    def watched_hosts(self) -> List[str]:
        return sorted(self.daemon.registry.console_ports(self.daemon.server_id).values())

    def note_output(self, host: str, now: float) -> None:
        with self._lock:
            st = self._states.get(host)
            if st is None:
                return
            st.last_output_at = now
            if st.phase is Phase.SUSPECT:
                st.phase = Phase.HEALTHY
                st.probe_failed = False
                logger.info(f"{host} talking again")

    def _restarts_in_window(self, st: HostState, now: float) -> int:
        while st.restarts and st.restarts[0] <= now - self.policy.window:
            st.restarts.popleft()
        return len(st.restarts)

    def evaluate(self, host: str, now: float) -> WatchdogAction:
        with self._lock:
            st = self._state(host)
            restarts = self._restarts_in_window(st, now)
            if st.phase is Phase.ALARMED:
                return NO_ACTION
            if st.phase is Phase.BOOTING:
                if now < st.booting_until:
                    return NO_ACTION
                st.phase = Phase.HEALTHY
            if st.phase is Phase.HEALTHY:
                if now - st.last_output_at <= self.policy.silence_threshold:
                    return NO_ACTION
                st.phase = Phase.SUSPECT
                st.probe_failed = False
                logger.info(f"{host} silent for {now - st.last_output_at:.0f}s, probing")
            if not st.probe_failed:
                return WatchdogAction(ActionKind.PROBE)
            if restarts < self.policy.max_restarts:
                return WatchdogAction(ActionKind.RESET, RESET_REASON)
            return WatchdogAction(
                ActionKind.ALARM,
                f"unresponsive after {restarts} restarts in {self.policy.window:.0f}s",
            )

    def maybe_tick(self) -> bool:
        """Run tick() if the next tick is due on the clock"""
        now = self.clock.now()
        if now < self._next_tick:
            return False
        while self._next_tick <= now:
            self._next_tick += self.policy.tick
        self.tick()
        return True

    def tick(self) -> None:
        for host in self.watched_hosts():
            try:
                self._step(host)
            except Exception as e:
                if self.error_handler is not None:
                    self.error_handler.log_error(e, context=f"watchdog {host}")
                else:
                    logger.exception(f"watchdog step for {host} failed")

    def _step(self, host: str) -> None:
        action = self.evaluate(host, self.clock.now())
        if action.kind is ActionKind.PROBE:
            self._log_action(host, action)
            answer = self.daemon.probe_host(host, self.policy.probe_retries)
            with self._lock:
                st = self._state(host)
                if answer is not None and st.phase is Phase.SUSPECT:
                    st.phase = Phase.HEALTHY
                    st.last_output_at = self.clock.now()
                    return
                if st.phase is not Phase.SUSPECT:
                    return
                st.probe_failed = True
            action = self.evaluate(host, self.clock.now())
        if action.kind is ActionKind.RESET:
            self._reset(host, action)
        elif action.kind is ActionKind.ALARM:
            self._alarm(host, action.reason)

    def _reset(self, host: str, action: WatchdogAction) -> None:
        self._log_action(host, action)
        event = self.reset_service.submit_reset(ResetRequest(self.principal, host, action.reason))
        now = self.clock.now()
        with self._lock:
            st = self._state(host)
            st.probe_failed = False
            if event.outcome is AuditOutcome.OK:
                st.restarts.append(now)
                st.phase = Phase.BOOTING
                st.booting_until = now + self.policy.boot_grace
                st.last_output_at = now
                return
            if event.outcome is AuditOutcome.RATE_LIMITED:
                st.phase = Phase.BOOTING
                st.booting_until = now + self.policy.boot_grace
                st.last_output_at = now
                return
            if event.outcome in (AuditOutcome.NAK, AuditOutcome.TIMEOUT):
                # Count the attempt; the next tick probes again.
                st.restarts.append(now)
                return
        if event.outcome is AuditOutcome.NO_WIRING:
            self._alarm(host, "no reset wiring")
        else:
            self._alarm(host, "watchdog not authorized to reset")

    def _alarm(self, host: str, cause: str) -> None:
        with self._lock:
            st = self._state(host)
            if st.phase is Phase.ALARMED:
                return
            st.phase = Phase.ALARMED
            st.cause = cause
        self._log_action(host, WatchdogAction(ActionKind.ALARM, cause))
        self.daemon.write_alarm(host, f"ALARM watchdog: {cause}")
        if self.error_handler is not None:
            self.error_handler.raise_alarm(cause, host=host, context="watchdog")
        else:
            logger.critical(f"ALARM {host}: {cause}")

    def _log_action(self, host: str, action: WatchdogAction) -> None:
        self.action_log.append((self.clock.now(), host, action.kind))

    def clear_alarm(self, principal: str, host: str) -> AuditEvent:
        """Admin only. Always audited, including refusals and no-ops."""
        if not reg_mod.authorize(self.daemon.registry, principal, Action.ADMIN, host):
            self.reset_service.record_clear(principal, host, AuditOutcome.DENIED, "clear alarm")
            raise Denied(f"{principal} may not clear alarms on {host}")
        with self._lock:
            st = self._state(host)
            was_alarmed = st.phase is Phase.ALARMED
            if was_alarmed:
                st.phase = Phase.HEALTHY
                st.restarts.clear()
                st.probe_failed = False
                st.cause = ""
                st.last_output_at = self.clock.now()
        if was_alarmed and self.error_handler is not None:
            self.error_handler.clear_alarms(host)
        outcome = AuditOutcome.OK if was_alarmed else AuditOutcome.NOOP
        logger.info(f"{principal} cleared watchdog alarm on {host} ({outcome.value})")
        return self.reset_service.record_clear(principal, host, outcome, "clear alarm")

    def phase(self, host: str) -> Phase:
        with self._lock:
            return self._state(host).phase

    def status(self) -> List[Tuple[str, ...]]:
        now = self.clock.now()
        rows = []
        with self._lock:
            for host in self.watched_hosts():
                st = self._states.get(host)
                if st is None:
                    rows.append((host, Phase.HEALTHY.value, "0", "-", "-"))
                    continue
                in_window = sum(1 for t in st.restarts if t > now - self.policy.window)
                rows.append((
                    host,
                    st.phase.value,
                    str(in_window),
                    rfc3339(self.clock.to_datetime(st.last_output_at)),
                    st.cause or "-",
                ))
        return rows
