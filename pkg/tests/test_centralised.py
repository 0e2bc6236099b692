import numpy as np
import pytest

from app.core.exceptions import (
    ChallengeFailedException, DuplicateReportException, RateLimitExceededException, UnknownPseudonymException
)
from app.models.server import ContactEvidence, IssuedId
from app.schemas.scenario import RadioParams, TracingParams
from app.services.centralised import CentralisedServer, blacklist_ids, load_blacklist, solve_challenge
from app.services.contacts import DeviceState, on_reception
from app.services.radio import Reception, rssi_from_distance
from app.services.world import SimClock

RADIO = RadioParams(environment="indoor", noise_sigma_db=0.0)
NEAR = float(rssi_from_distance(1.0, RADIO))


def _tracing(**overrides):
    return TracingParams(pow_difficulty_bits=4, **overrides)


def _server(db_session, **overrides):
    return CentralisedServer(db_session, _tracing(**overrides), RADIO, np.random.default_rng(7), step_seconds=300)


def _register(server, owner, tick=0):
    source = f"device-{owner}"
    challenge = solve_challenge(source, server.issue_challenge(source), server.tracing.pow_difficulty_bits)
    device = DeviceState(owner=owner)
    device.pseudonym = server.register_user(source, challenge, tick)
    device.issued_ids[0] = server.issue_ids(device.pseudonym, 0)
    return device


def _meet(sender, receiver, ticks):
    for tick in ticks:
        eid = sender.issued_ids[0][SimClock(step_seconds=300, tick=tick).interval_in_day]
        on_reception(receiver, Reception(receiver.owner, eid, tick, NEAR))


class TestRegistration:

    def test_register_and_issue(self, db_session):
        server = _server(db_session)
        device = _register(server, 0)
        assert len(device.issued_ids[0]) == 96
        assert len(set(device.issued_ids[0])) == 96
        assert server.issue_ids(device.pseudonym, 0) == device.issued_ids[0]
        assert set(server.issue_ids(device.pseudonym, 1)).isdisjoint(device.issued_ids[0])

    def test_bad_challenge(self, db_session):
        server = _server(db_session)
        challenge = solve_challenge("a", server.issue_challenge("a"), 4)
        with pytest.raises(ChallengeFailedException):
            server.register_user("b", challenge, 0)
        assert server.rejected_registrations("b")["challenge_failed"] == 1

    def test_rate_limit_per_source(self, db_session):
        server = _server(db_session)
        for _ in range(5):
            challenge = solve_challenge("sybil", server.issue_challenge("sybil"), 4)
            server.register_user("sybil", challenge, 0)
        challenge = solve_challenge("sybil", server.issue_challenge("sybil"), 4)
        with pytest.raises(RateLimitExceededException):
            server.register_user("sybil", challenge, 0)
        assert server.rejected_registrations("sybil") == {"granted": 5, "rate_limited": 1, "challenge_failed": 0}

    def test_unknown_pseudonym(self, db_session):
        with pytest.raises(UnknownPseudonymException):
            _server(db_session).issue_ids("nobody", 0)

    def test_prune_issued(self, db_session):
        server = _server(db_session)
        _register(server, 0)
        assert server.prune_issued(SimClock(step_seconds=300, tick=14 * 288)) == 0
        assert server.prune_issued(SimClock(step_seconds=300, tick=15 * 288)) == 96
        assert db_session.query(IssuedId).count() == 0


class TestReportAndPoll:

    def test_contact_flagged_and_notified(self, db_session):
        server = _server(db_session)
        contact, reporter = _register(server, 0), _register(server, 1)
        _meet(contact, reporter, range(6))
        now = SimClock(step_seconds=300, tick=10)
        report = server.report_diagnosis_central(reporter, now)
        assert report.flagged_count == 1
        assert report.unresolved_count == 0
        assert db_session.query(ContactEvidence).count() == 2

        notification = server.poll_status(contact, now)
        assert notification.risk_score == pytest.approx(30.0)
        assert notification.report_tick == 10
        assert server.poll_status(contact, now) is None

    def test_reporter_not_notified(self, db_session):
        server = _server(db_session)
        contact, reporter = _register(server, 0), _register(server, 1)
        _meet(contact, reporter, range(6))
        now = SimClock(step_seconds=300, tick=10)
        server.report_diagnosis_central(reporter, now)
        assert server.poll_status(reporter, now) is None

    def test_short_contact_not_flagged(self, db_session):
        server = _server(db_session)
        contact, reporter = _register(server, 0), _register(server, 1)
        _meet(contact, reporter, range(2))
        now = SimClock(step_seconds=300, tick=10)
        assert server.report_diagnosis_central(reporter, now).flagged_count == 0
        assert server.poll_status(contact, now) is None

    def test_unresolved_ids_counted(self, db_session):
        server = _server(db_session)
        reporter = _register(server, 1)
        on_reception(reporter, Reception(1, b"\xee" * 16, 3, NEAR))
        report = server.report_diagnosis_central(reporter, SimClock(step_seconds=300, tick=10))
        assert report.unresolved_count == 1

    def test_second_report_rejected(self, db_session):
        server = _server(db_session)
        reporter = _register(server, 1)
        server.report_diagnosis_central(reporter, SimClock(step_seconds=300, tick=10))
        with pytest.raises(DuplicateReportException):
            server.report_diagnosis_central(reporter, SimClock(step_seconds=300, tick=11))

    def test_blacklisted_ids_skipped(self, db_session):
        server = _server(db_session)
        contact, reporter = _register(server, 0), _register(server, 1)
        _meet(contact, reporter, range(6))
        assert blacklist_ids(db_session, contact.issued_ids[0][:2], tick=5) == 2
        assert blacklist_ids(db_session, contact.issued_ids[0][:2], tick=6) == 0
        assert len(load_blacklist(db_session)) == 2
        now = SimClock(step_seconds=300, tick=10)
        assert server.report_diagnosis_central(reporter, now).flagged_count == 0


class TestOversight:

    def _fanout(self, db_session, **overrides):
        server = _server(db_session, fanout_threshold=2, **overrides)
        contacts = [_register(server, owner) for owner in range(4)]
        reporter = _register(server, 10)
        for contact in contacts:
            _meet(contact, reporter, range(6))
        now = SimClock(step_seconds=300, tick=10)
        server.report_diagnosis_central(reporter, now)
        return server, contacts, now

    def test_suppress_excess(self, db_session):
        server, contacts, now = self._fanout(db_session)
        alerts = server.detect_mass_notification(now)
        assert len(alerts) == 1
        assert (alerts[0].fanout, alerts[0].held_count) == (4, 2)
        delivered = [server.poll_status(contact, now) for contact in contacts]
        assert sum(n is not None for n in delivered) == 2
        assert server.held_count() == 2
        assert server.detect_mass_notification(now) == []

    def test_hold_whole_report(self, db_session):
        server, contacts, now = self._fanout(db_session, hold_scope="report")
        server.detect_mass_notification(now)
        assert all(server.poll_status(contact, now) is None for contact in contacts)
        assert server.held_count() == 4

    def test_release_after_review(self, db_session):
        server, contacts, now = self._fanout(db_session, hold_scope="report",
                                             oversight_policy="release", review_delay_s=3600)
        server.detect_mass_notification(now)
        assert server.poll_status(contacts[0], now) is None
        later = SimClock(step_seconds=300, tick=now.tick + 12)
        assert all(server.poll_status(contact, later) is not None for contact in contacts)
        assert server.held_count() == 0

    def test_below_threshold_no_alert(self, db_session):
        server = _server(db_session, fanout_threshold=5)
        contact, reporter = _register(server, 0), _register(server, 1)
        _meet(contact, reporter, range(6))
        now = SimClock(step_seconds=300, tick=10)
        server.report_diagnosis_central(reporter, now)
        assert server.detect_mass_notification(now) == []


class TestLocationObservations:

    def test_only_issued_ids_are_stored(self, db_session):
        server = _server(db_session)
        device = _register(server, 0)
        stored = server.record_location_observations([
            (device.issued_ids[0][0], 1, 10.0, 20.0),
            (b"\x99" * 16, 1, 5.0, 5.0),
        ])
        assert stored == 1
