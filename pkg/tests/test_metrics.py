import numpy as np
import pytest

from app.core.exceptions import ScenarioMismatchException
from app.schemas.report import RunManifest, RunMetrics, RunReport
from app.services.contacts import RELAY_ATTACK, TRUE_CONTACT, ExposureNotification
from app.services.metrics import (
    COMPARISON_METRICS, compare_protocols, contact_minutes, ground_truth_exposed, latency_stats,
    measure_ledger, notification_latencies, score_notifications
)
from app.services.simulation import ContactLog, DiagnosisEvent, SimulationResult


def _result(config, contacts, reports, adopters=(0, 1, 2)):
    log = ContactLog()
    for tick, a, b in contacts:
        log.append(tick, np.array([a]), np.array([b]), np.array([1.0]))
    return SimulationResult(
        config=config,
        adopters=list(adopters),
        notifications=[],
        diagnoses=[DiagnosisEvent(tick, agent_id, True, True) for agent_id, tick in reports.items()],
        contacts=log,
        timeseries=[],
        final_counts={},
        ever_infected=0,
        peak_infectious=0,
        quarantine_person_days=0.0,
        ledger={},
        oversight={},
        key_uploads=0,
    )


def _notice(agent_id, cause=TRUE_CONTACT, trigger_tick=20, report_tick=5):
    return ExposureNotification(agent_id=agent_id, trigger_tick=trigger_tick, risk_score=15.0,
                                protocol="decentralised", cause=cause, report_tick=report_tick)


class TestGroundTruth:

    def test_contact_minutes_window_and_adopters(self, config_factory):
        config = config_factory(n_agents=4)
        contacts = [(t, 0, 1) for t in range(4)] + [(t, 0, 3) for t in range(6)] + [(6, 0, 2)]
        minutes = contact_minutes(_result(config, contacts, {0: 5}))
        # 3号没装应用，6号tick晚于上报时刻
        assert minutes == {0: {1: 20.0}}

    def test_reporter_may_be_second_in_pair(self, config_factory):
        config = config_factory(n_agents=4)
        minutes = contact_minutes(_result(config, [(1, 1, 2), (2, 1, 2)], {2: 5}))
        assert minutes == {2: {1: 10.0}}

    def test_exposure_sums_over_reporters(self, config_factory):
        config = config_factory(n_agents=4)
        contacts = [(t, 0, 1) for t in range(2)] + [(t, 1, 2) for t in range(2)]
        result = _result(config, contacts, {0: 5, 2: 5})
        assert ground_truth_exposed(result) == {1}

    def test_old_contacts_fall_out_of_window(self, config_factory):
        config = config_factory(n_agents=4, duration_days=20)
        report_tick = 15 * 288
        contacts = [(t, 0, 1) for t in range(10)] + [(report_tick - t, 0, 2) for t in range(3)]
        result = _result(config, contacts, {0: report_tick})
        assert ground_truth_exposed(result) == {2}

    def test_no_reports_no_exposure(self, config_factory):
        config = config_factory(n_agents=4)
        assert ground_truth_exposed(_result(config, [(t, 0, 1) for t in range(10)], {})) == set()


class TestScoring:

    def test_confusion_counts(self):
        notices = [_notice(1), _notice(2, cause=RELAY_ATTACK), _notice(3)]
        counts = score_notifications(notices, {1, 4})
        assert counts.true_positive == 1
        assert counts.false_positive_attack == 1
        assert counts.false_positive_noise == 1
        assert counts.false_positive == 2
        assert counts.false_negative == 1
        assert counts.ground_truth_exposed == 2

    def test_latencies(self):
        notices = [_notice(1, trigger_tick=17), _notice(2, trigger_tick=293), _notice(3, report_tick=None)]
        assert notification_latencies(notices) == [12, 288]

    def test_latency_stats(self):
        stats = latency_stats([12, 288, 100], step_minutes=5.0)
        assert (stats.count, stats.min_ticks, stats.max_ticks) == (3, 12, 288)
        assert stats.median_ticks == pytest.approx(100.0)
        assert stats.median_minutes == pytest.approx(500.0)
        assert stats.mean_ticks == pytest.approx(400.0 / 3)

    def test_empty_latency(self):
        stats = latency_stats([], step_minutes=5.0)
        assert stats.count == 0 and stats.median_ticks is None


class TestLedger:

    def test_empty_server(self, db_session):
        assert measure_ledger(db_session) == {
            "server_health_entries": 0, "server_social_edges": 0, "uploaded_keys": 0,
            "pseudonyms": 0, "location_observations": 0,
        }


def _report(config, seed=11, protocol=None, **metrics):
    protocol = protocol or config.protocol.value
    manifest = RunManifest(run_id=f"unit-{protocol}-s{seed}", app_version="test", seed=seed, protocol=protocol,
                           total_ticks=config.total_ticks, config=config.model_dump(mode="json"))
    return RunReport(manifest=manifest, metrics=RunMetrics(protocol=protocol, **metrics))


class TestComparison:

    def test_rows_cover_metrics(self, config_factory):
        run_a = _report(config_factory(protocol="decentralised"))
        run_b = _report(config_factory(protocol="centralised"))
        rows = compare_protocols(run_a, run_b)
        assert [row.metric for row in rows] == [name for name, _ in COMPARISON_METRICS]
        assert rows[0].run_a == 0.0
        latency = next(row for row in rows if row.metric == "latency_median_ticks")
        assert latency.run_a is None

    def test_seed_mismatch(self, config_factory):
        with pytest.raises(ScenarioMismatchException):
            compare_protocols(_report(config_factory(), seed=1), _report(config_factory(), seed=2))

    def test_scenario_mismatch(self, config_factory):
        run_a = _report(config_factory(protocol="decentralised"))
        run_b = _report(config_factory(protocol="centralised", n_agents=41))
        with pytest.raises(ScenarioMismatchException) as excinfo:
            compare_protocols(run_a, run_b)
        assert "n_agents" in excinfo.value.detail
