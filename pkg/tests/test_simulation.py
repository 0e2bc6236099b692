import pytest

from app.core.database import close_server_session
from app.services.metrics import build_run_metrics, ground_truth_exposed, notification_latencies
from app.services.simulation import Simulation, run_simulation

PROTOCOLS = ["decentralised", "centralised"]

# 时间序列里与通知无关的列：tick, S, E, I, D, R, diagnosed_cum
HEALTH_COLUMNS = slice(0, 7)


def _health(result):
    return [row[HEALTH_COLUMNS] for row in result.timeseries]


@pytest.mark.parametrize("protocol", PROTOCOLS)
class TestIdealChannel:

    def test_notifications_match_ground_truth(self, config_factory, protocol):
        result = run_simulation(config_factory(protocol=protocol))
        exposed = ground_truth_exposed(result)
        notified = {n.agent_id for n in result.notifications}
        assert len(result.report_ticks) == 3
        assert notified == exposed
        metrics = build_run_metrics(result)
        assert metrics.notifications.false_positive == 0
        assert metrics.notifications.false_negative == 0

    def test_each_agent_notified_once(self, config_factory, protocol):
        result = run_simulation(config_factory(protocol=protocol))
        agent_ids = [n.agent_id for n in result.notifications]
        assert len(agent_ids) == len(set(agent_ids))

    def test_same_seed_same_run(self, config_factory, protocol):
        config = config_factory(protocol=protocol)
        first, second = run_simulation(config), run_simulation(config)
        assert first.timeseries == second.timeseries
        assert [(n.agent_id, n.trigger_tick) for n in first.notifications] == \
               [(n.agent_id, n.trigger_tick) for n in second.notifications]
        assert first.ledger == second.ledger

    def test_timeseries_covers_every_tick(self, config_factory, protocol):
        config = config_factory(protocol=protocol)
        result = run_simulation(config)
        assert [row[0] for row in result.timeseries] == list(range(config.total_ticks))
        assert all(sum(row[1:6]) == config.n_agents for row in result.timeseries)


class TestProtocolDifferences:

    def test_latency_bounded_by_batch_or_poll(self, config_factory):
        decentral = run_simulation(config_factory(protocol="decentralised"))
        central = run_simulation(config_factory(protocol="centralised"))
        poll_ticks = central.config.tracing.poll_interval_s // central.config.step_seconds
        assert all(0 <= lag <= decentral.config.ticks_per_day for lag in notification_latencies(decentral.notifications))
        assert all(0 <= lag <= poll_ticks for lag in notification_latencies(central.notifications))

    def test_epidemic_identical_without_quarantine(self, config_factory):
        epidemic = {"quarantine_compliance": 0.0}
        decentral = run_simulation(config_factory(protocol="decentralised", epidemic=epidemic))
        central = run_simulation(config_factory(protocol="centralised", epidemic=epidemic))
        assert _health(decentral) == _health(central)

    def test_ledgers(self, config_factory):
        decentral = run_simulation(config_factory(protocol="decentralised"))
        central = run_simulation(config_factory(protocol="centralised"))

        assert decentral.ledger["server_social_edges"] == 0
        assert decentral.ledger["pseudonyms"] == 0
        assert decentral.ledger["server_health_entries"] == 3
        # 第1天确诊：上传第0天和第1天的密钥
        assert decentral.ledger["uploaded_keys"] == decentral.key_uploads == 6

        assert central.ledger["pseudonyms"] == central.config.n_agents
        assert central.ledger["uploaded_keys"] == 0
        assert central.ledger["server_health_entries"] == 3
        notified = {n.agent_id for n in central.notifications}
        assert central.ledger["server_social_edges"] >= len(notified)


class TestBatchBoundary:

    def _config(self, config_factory, duration_days):
        return config_factory(
            world_width_m=1.0,
            world_height_m=1.0,
            n_agents=4,
            speed_min_mps=0.0,
            speed_max_mps=0.0,
            duration_days=duration_days,
            epidemic={"initial_infected": 1, "initial_infected_ids": "0", "test_delay_days": 1.2,
                      "p_transmit_per_contact_minute": 0.0},
        )

    def test_partial_last_day_publishes_nothing(self, config_factory):
        result = run_simulation(self._config(config_factory, 1.5))
        assert list(result.report_ticks) == [0]
        assert 288 < result.report_ticks[0] < 432
        assert result.notifications == []

    def test_full_day_publishes_at_boundary(self, config_factory):
        result = run_simulation(self._config(config_factory, 2))
        assert {n.agent_id for n in result.notifications} == {1, 2, 3}
        assert all(n.trigger_tick == 576 for n in result.notifications)


class TestEdgeCases:

    def test_empty_world(self, config_factory):
        config = config_factory(n_agents=0, epidemic={"initial_infected": 0})
        result = run_simulation(config)
        assert result.notifications == []
        assert len(result.timeseries) == config.total_ticks

    @pytest.mark.parametrize("protocol", PROTOCOLS)
    def test_no_adopters(self, config_factory, protocol):
        result = run_simulation(config_factory(protocol=protocol, adoption_fraction=0.0))
        assert result.notifications == []
        assert result.adopters == []
        assert result.ledger["server_health_entries"] == 0
        assert all(not event.reported for event in result.diagnoses)

    def test_no_consent(self, config_factory):
        result = run_simulation(config_factory(tracing={"reporting_probability": 0.0}))
        assert len(result.diagnoses) == 3
        assert result.report_ticks == {}
        assert result.notifications == []

    def test_blacklisted_ids_never_match(self, config_factory):
        config = config_factory()
        if not run_simulation(config).notifications:
            pytest.skip("场景内没有通知")
        # 同一种子下广播过的全部标识都预先拉黑：通知必须消失
        result = Simulation(config, blacklist=_broadcast_ids(config)).run()
        assert result.notifications == []


def _broadcast_ids(config):
    simulation = Simulation(config)
    try:
        while simulation.clock.tick < config.total_ticks:
            simulation.step()
        return [simulation.catalog.eid(i) for i in range(len(simulation.catalog))]
    finally:
        close_server_session(simulation.db)


class TestAttacksInsideRun:

    def _relay_config(self, config_factory, protocol, **overrides):
        settings = {
            "protocol": protocol,
            "world_width_m": 1000.0,
            "world_height_m": 1000.0,
            "n_agents": 20,
            "epidemic": {"initial_infected": 1, "initial_infected_ids": "0", "p_transmit_per_contact_minute": 0.0},
            "attack": {"relay": {"victim_agent_ids": "0", "target_agent_ids": "5,6,7", "capture_radius_m": 10.0}},
        }
        settings.update(overrides)
        return config_factory(**settings)

    @pytest.mark.parametrize("protocol", PROTOCOLS)
    def test_relay_causes_false_alarms(self, config_factory, protocol):
        result = run_simulation(self._relay_config(config_factory, protocol))
        notified = {n.agent_id for n in result.notifications}
        assert {5, 6, 7} <= notified
        assert result.attack["relay"]["attack_notifications"] >= 3
        assert result.attack["relay"]["injected_receptions"] > 0
        assert build_run_metrics(result).notifications.false_positive_attack >= 3

    @pytest.mark.parametrize("protocol", PROTOCOLS)
    def test_relay_leaves_epidemic_unchanged_without_quarantine(self, config_factory, protocol):
        relay = {"relay": {"victim_agent_ids": "0", "target_agent_ids": "5,6,7", "capture_radius_m": 10.0}}
        epidemic = {"quarantine_compliance": 0.0}
        clean = run_simulation(config_factory(protocol=protocol, epidemic=epidemic))
        attacked = run_simulation(config_factory(protocol=protocol, epidemic=epidemic, attack=relay))
        assert _health(attacked) == _health(clean)

    @pytest.mark.parametrize("protocol", PROTOCOLS)
    def test_relay_false_alarms_quarantine_targets(self, config_factory, protocol):
        # 第二天的批次要在运行结束前发布，才能看到隔离
        clean = run_simulation(self._relay_config(config_factory, protocol, duration_days=3, attack=None))
        attacked = run_simulation(self._relay_config(config_factory, protocol, duration_days=3))
        assert max(row[7] for row in attacked.timeseries) > max(row[7] for row in clean.timeseries)

    def test_sniffer_does_not_change_outcome(self, config_factory):
        plain = run_simulation(config_factory())
        sniffed = run_simulation(config_factory(attack={"sniffer": {"grid_rows": 3, "grid_cols": 3}}))
        assert plain.timeseries == sniffed.timeseries
        assert [n.agent_id for n in plain.notifications] == [n.agent_id for n in sniffed.notifications]
        assert sniffed.attack["sniffer"]["sniffer_count"] == 9
        assert sniffed.attack["sniffer"]["observations"] > 0

    def test_central_sniffer_links_locations(self, config_factory):
        result = run_simulation(config_factory(
            protocol="centralised",
            attack={"sniffer": {"grid_rows": 2, "grid_cols": 2, "operator": "central_server"}},
        ))
        assert result.ledger["location_observations"] > 0

    def test_sybil_accounts_limited(self, config_factory):
        result = run_simulation(config_factory(
            protocol="centralised", attack={"sybil": {"attacker_x": 30.0, "attacker_y": 30.0}}
        ))
        assert result.attack["sybil"]["accounts_granted"] == 5
        assert result.attack["sybil"]["accounts_denied"] == 95
