import random

import pytest

from errors import Denied
from services.console_log import ALARM_LABEL
from services.farmsim import NodeState
from services.reset_service import AuditOutcome
from services.watchdog import RESET_REASON, ActionKind, Phase, WatchdogPolicy

from conftest import build_farm, topology_text

SMALL = WatchdogPolicy(silence_threshold=20, probe_retries=2, max_restarts=2, window=200, boot_grace=30, tick=1)


def actions(farm, host=None, kind=None):
    return [(t, h, k) for t, h, k in farm.watchdog.action_log
            if (host is None or h == host) and (kind is None or k is kind)]


def test_policy_rejects_non_positive_values():
    with pytest.raises(ValueError):
        WatchdogPolicy(tick=0)
    with pytest.raises(ValueError):
        WatchdogPolicy(max_restarts=-1)


def test_chatty_nodes_are_left_alone(chatty_farm):
    chatty_farm.run(2 * 3600, step=1.0)
    assert chatty_farm.watchdog.action_log == []
    assert chatty_farm.harness.emulator.pulse_count() == 0
    assert all(row[1] == "Healthy" for row in chatty_farm.watchdog.status())


def test_quiet_but_alive_nodes_answer_probes(farm):
    farm.run(600, step=1.0)
    assert actions(farm, kind=ActionKind.PROBE)
    assert actions(farm, kind=ActionKind.RESET) == []
    assert farm.harness.emulator.pulse_count() == 0
    assert {farm.watchdog.phase(h) for h in farm.hosts} == {Phase.HEALTHY}


def test_hung_node_is_reset_once_and_recovers(chatty_farm):
    farm = chatty_farm
    farm.run(40)
    farm.harness.inject_hang("lxb0002")
    last_output = farm.watchdog._states["lxb0002"].last_output_at
    farm.run(400)
    resets = actions(farm, "lxb0002", ActionKind.RESET)
    assert len(resets) == 1
    delay = resets[0][0] - last_output
    policy = farm.watchdog.policy
    assert policy.silence_threshold < delay <= policy.silence_threshold + policy.tick + policy.probe_retries * 2 + 1
    assert farm.node("lxb0002").state is NodeState.UP
    assert farm.watchdog.phase("lxb0002") is Phase.HEALTHY
    events = farm.resets.audit_query(host="lxb0002")
    assert [(e.principal, e.outcome, e.reason) for e in events] == [("watchdog", AuditOutcome.OK, RESET_REASON)]
    assert actions(farm, "lxb0001") == []


def test_node_that_keeps_hanging_is_reset_k_times_then_alarmed(farm):
    farm.harness.inject_hang("lxb0001", persistent=True)
    farm.run(1200, step=1.0)
    policy = farm.watchdog.policy
    resets = [t for t, _, _ in actions(farm, "lxb0001", ActionKind.RESET)]
    assert len(resets) == policy.max_restarts
    assert all(b - a >= policy.boot_grace for a, b in zip(resets, resets[1:]))
    assert len(actions(farm, "lxb0001", ActionKind.ALARM)) == 1
    assert farm.watchdog.phase("lxb0001") is Phase.ALARMED
    assert farm.harness.emulator.pulse_count() == policy.max_restarts
    ok = [e for e in farm.resets.audit_query(host="lxb0001") if e.outcome is AuditOutcome.OK]
    assert len(ok) == policy.max_restarts
    alarms = [line for line in farm.daemon.read_log("lxb0001") if line.port_label == ALARM_LABEL]
    assert len(alarms) == 1 and "ALARM watchdog" in alarms[0].payload
    assert [a["host"] for a in farm.errors.alarms()] == ["lxb0001"]
    row = next(r for r in farm.watchdog.status() if r[0] == "lxb0001")
    assert row[1] == "Alarmed" and row[2] == "3" and row[4].startswith("unresponsive after 3 restarts")


def test_only_an_admin_clears_an_alarm(farm):
    farm.harness.inject_hang("lxb0003", persistent=True)
    farm.run(1200, step=1.0)
    assert farm.watchdog.phase("lxb0003") is Phase.ALARMED
    with pytest.raises(Denied):
        farm.watchdog.clear_alarm("ops", "lxb0003")
    assert farm.watchdog.phase("lxb0003") is Phase.ALARMED
    event = farm.watchdog.clear_alarm("admin", "lxb0003")
    assert event.kind == "CLEAR" and event.outcome is AuditOutcome.OK
    assert farm.watchdog.phase("lxb0003") is Phase.HEALTHY
    assert farm.errors.alarms() == []
    again = farm.watchdog.clear_alarm("admin", "lxb0003")
    assert again.outcome is AuditOutcome.NOOP
    clears = [e for e in farm.resets.audit_query(host="lxb0003") if e.kind == "CLEAR"]
    assert [(e.principal, e.outcome) for e in clears] == [
        ("ops", AuditOutcome.DENIED), ("admin", AuditOutcome.OK), ("admin", AuditOutcome.NOOP)
    ]


def test_host_without_reset_wiring_alarms_at_once():
    farm = build_farm(topology="node lxb0001 console 0\n", policy=SMALL)
    farm.boot()
    farm.harness.inject_hang("lxb0001")
    farm.run(60)
    assert farm.watchdog.phase("lxb0001") is Phase.ALARMED
    assert len(actions(farm, "lxb0001", ActionKind.RESET)) == 1
    assert farm.errors.alarms()[0]["message"] == "no reset wiring"
    assert farm.harness.emulator.pulse_count() == 0


def test_watchdog_without_reset_grant_alarms():
    from conftest import standard_grants

    grants = [g for g in standard_grants() if g.principal != "watchdog"]
    farm = build_farm(2, policy=SMALL, grants=grants)
    farm.boot()
    farm.harness.inject_hang("lxb0000")
    farm.run(60)
    assert farm.watchdog.phase("lxb0000") is Phase.ALARMED
    assert farm.errors.alarms()[0]["message"] == "watchdog not authorized to reset"
    denied = farm.resets.audit_query(host="lxb0000")
    assert [e.outcome for e in denied] == [AuditOutcome.DENIED]


def test_boot_grace_suppresses_actions(farm):
    wd = farm.watchdog
    now = farm.clock.now()
    assert wd.evaluate("lxb0000", now).kind is ActionKind.NONE
    st = wd._states["lxb0000"]
    st.phase = Phase.BOOTING
    st.booting_until = now + 100
    assert wd.evaluate("lxb0000", now + 500).kind is ActionKind.PROBE
    st.phase = Phase.BOOTING
    st.booting_until = now + 1000
    assert wd.evaluate("lxb0000", now + 500).kind is ActionKind.NONE


def _random_run(seed, duration=600.0):
    rng = random.Random(seed)
    farm = build_farm(4, seed=seed, policy=SMALL, min_interval=10)
    farm.boot()
    schedule = sorted((rng.uniform(10, duration - 150), rng.choice(farm.hosts), rng.random() < 0.3)
                      for _ in range(rng.randint(1, 6)))
    persistent_hosts = set()

    def step():
        now = farm.clock.now()
        while schedule and schedule[0][0] <= now:
            _, host, persistent = schedule.pop(0)
            if farm.node(host).state is NodeState.UP:
                farm.harness.inject_hang(host, persistent)
                if persistent:
                    persistent_hosts.add(host)
        farm.step()

    farm.harness.run(duration, 0.5, step)
    return farm, persistent_hosts


def _check_invariants(farm, persistent_hosts):
    policy = farm.watchdog.policy
    for host in farm.hosts:
        resets = [t for t, h, k in farm.watchdog.action_log if h == host and k is ActionKind.RESET]
        for i, start in enumerate(resets):
            in_window = [t for t in resets[i:] if t < start + policy.window]
            assert len(in_window) <= policy.max_restarts
        for a, b in zip(resets, resets[1:]):
            assert b - a >= policy.boot_grace
    for host in persistent_hosts:
        assert farm.watchdog.phase(host) is Phase.ALARMED
    ok = [e for e in farm.resets.audit_query() if e.outcome is AuditOutcome.OK]
    assert len(ok) == farm.harness.emulator.pulse_count()


@pytest.mark.parametrize("seed", range(10))
def test_random_hang_schedules_respect_the_restart_budget(seed):
    _check_invariants(*_random_run(seed))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10, 110))
def test_random_hang_schedules_many_seeds(seed):
    _check_invariants(*_random_run(seed))


def test_status_before_the_first_tick_tracks_nothing():
    farm = build_farm(2)
    rows = farm.watchdog.status()
    assert rows == [("lxb0000", "Healthy", "0", "-", "-"), ("lxb0001", "Healthy", "0", "-", "-")]
    assert farm.watchdog._states == {}
