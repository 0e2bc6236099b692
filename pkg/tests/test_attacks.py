import numpy as np
import pytest

from app.schemas.scenario import RadioParams, RelayConfig, SnifferConfig, SybilConfig, TracingParams
from app.services.attacks import (
    RelayAttack, SnifferGrid, SybilStation, reconstruct_tracks, relay_attack_step, score_sybil, score_tracks,
    sniff_round, sybil_identify
)
from app.services.centralised import CentralisedServer
from app.services.identifiers import DiagnosisKey, EidCatalog, expand_key
from app.services.radio import rssi_from_distance
from app.services.world import SimClock, World
from app.utils.random_streams import RandomStreams

RADIO = RadioParams(environment="indoor", noise_sigma_db=0.0)
KEYS = [DiagnosisKey(0, bytes([i + 1]) * 16) for i in range(4)]


def _world(config_factory, points):
    config = config_factory(n_agents=len(points), epidemic={"initial_infected": 0})
    streams = RandomStreams(config.rng_seed)
    world = World(config, streams.stream("mobility"), streams.stream("population"))
    world.positions[:] = points
    return world


def _eids(tick, count, without=()):
    """第 i 人广播 KEYS[i] 在该tick所在时间片的标识；without 中的人没装应用"""
    interval = SimClock(step_seconds=300, tick=tick).interval_in_day
    return [None if i in without else expand_key(KEYS[i])[interval] for i in range(count)]


class TestSnifferGrid:

    def test_grid_cell_centres(self):
        grid = SnifferGrid.from_config(SnifferConfig(grid_rows=2, grid_cols=2), 100.0, 100.0, RADIO)
        assert grid.positions.tolist() == [[25.0, 25.0], [75.0, 25.0], [25.0, 75.0], [75.0, 75.0]]
        assert grid.range_m == 25.0

    def test_explicit_positions_and_range(self):
        config = SnifferConfig(positions="1:2,3:4", range_m=7.5)
        grid = SnifferGrid.from_config(config, 100.0, 100.0, RADIO)
        assert grid.position(1) == (3.0, 4.0)
        assert grid.range_m == 7.5

    def test_only_app_users_in_range_observed(self, config_factory):
        world = _world(config_factory, [[5.0, 0.0], [1.0, 1.0], [50.0, 50.0]])
        grid = SnifferGrid(np.array([[0.0, 0.0]]), range_m=10.0, ticks_per_day=288)
        catalog = EidCatalog()
        eids = _eids(0, 3, without={1})
        observations = sniff_round(grid, world, eids, catalog, tick=0)
        assert [(o.eid, o.sniffer_pos, o.tick) for o in observations] == [(eids[0], (0.0, 0.0), 0)]
        assert grid.ticks_in_range == {0: {0: 1}}

    def test_overlapping_sniffers(self, config_factory):
        world = _world(config_factory, [[5.0, 5.0]])
        grid = SnifferGrid(np.array([[0.0, 0.0], [10.0, 10.0]]), range_m=10.0, ticks_per_day=288)
        observations = sniff_round(grid, world, _eids(0, 1), EidCatalog(), tick=0)
        assert len(observations) == 2
        assert grid.ticks_in_range[0][0] == 1

    def test_zero_detection_probability(self, config_factory):
        world = _world(config_factory, [[5.0, 5.0]])
        grid = SnifferGrid(np.array([[0.0, 0.0]]), range_m=10.0, detection_probability=0.0, ticks_per_day=288)
        rng = np.random.default_rng(0)
        assert sniff_round(grid, world, _eids(0, 1), EidCatalog(), tick=0, rng=rng) == []
        assert len(grid.log) == 0
        assert grid.ticks_in_range[0][0] == 1


class TestTrackReconstruction:

    def _sniffed(self, config_factory):
        world = _world(config_factory, [[2.0, 2.0], [40.0, 40.0]])
        grid = SnifferGrid(np.array([[0.0, 0.0], [40.0, 40.0]]), range_m=5.0, ticks_per_day=288)
        catalog = EidCatalog()
        for tick in range(6):
            # 0号在第3个tick走到另一台嗅探器旁
            if tick == 3:
                world.positions[0] = [38.0, 41.0]
            sniff_round(grid, world, _eids(tick, 2), catalog, tick)
        return grid, catalog

    def test_track_follows_published_key(self, config_factory):
        grid, catalog = self._sniffed(config_factory)
        tracks = reconstruct_tracks(grid, [KEYS[0]], catalog)
        track = tracks[KEYS[0].hex()]
        assert [tick for tick, _ in track.points] == list(range(6))
        assert [pos for _, pos in track.points] == [(0.0, 0.0)] * 3 + [(40.0, 40.0)] * 3

    def test_unpublished_keys_not_reconstructed(self, config_factory):
        grid, catalog = self._sniffed(config_factory)
        assert reconstruct_tracks(grid, [KEYS[3]], catalog)[KEYS[3].hex()].points == []

    def test_scores(self, config_factory):
        grid, catalog = self._sniffed(config_factory)
        scores = score_tracks(grid, [KEYS[0]], catalog, {KEYS[0].key_bytes: 0, KEYS[1].key_bytes: 1})
        assert scores["track_coverage_per_victim"] == {"0": 1.0}
        assert scores["reconstructed_points"] == 6
        assert scores["misattributed_points"] == 0
        assert scores["non_victim_points"] == 0
        assert scores["points_within_range"] is True
        assert scores["max_point_error_m"] <= 5.0


class TestRelay:

    def _config(self, **overrides):
        data = {"victim_agent_ids": [0], "target_agent_ids": [2], "capture_radius_m": 5.0, **overrides}
        return RelayConfig(**data)

    def _world(self, config_factory):
        return _world(config_factory, [[10.0, 10.0], [12.0, 10.0], [50.0, 50.0], [30.0, 10.0]])

    def test_relayed_ids_are_byte_identical(self, config_factory):
        world = self._world(config_factory)
        attack = RelayAttack(self._config(), RADIO)
        eids = _eids(0, 4)
        assert relay_attack_step(attack, world, eids, 0) == []
        receptions = relay_attack_step(attack, world, eids, 1)
        assert [(r.receiver, r.sender_eid) for r in receptions] == sorted(
            [(2, eids[0]), (2, eids[1]), (0, eids[2]), (1, eids[2])]
        )
        assert all(r.cause == "relay" and r.tick == 1 for r in receptions)
        assert receptions[0].rssi_db == pytest.approx(rssi_from_distance(1.0, RADIO))
        assert attack.captured_eids == {eids[0], eids[1], eids[2]}
        assert attack.injected_receptions == 4

    def test_one_way(self, config_factory):
        world = self._world(config_factory)
        attack = RelayAttack(self._config(bidirectional=False), RADIO)
        eids = _eids(0, 4)
        relay_attack_step(attack, world, eids, 0)
        assert {r.receiver for r in relay_attack_step(attack, world, eids, 1)} == {2}

    def test_replay_delay(self, config_factory):
        world = self._world(config_factory)
        attack = RelayAttack(self._config(mode="replay", relay_latency_ticks=1, replay_delay_ticks=3), RADIO)
        eids = _eids(0, 4)
        relay_attack_step(attack, world, eids, 0)
        assert all(relay_attack_step(attack, world, eids, tick) == [] for tick in (1, 2, 3))
        receptions = relay_attack_step(attack, world, eids, 4)
        assert receptions and all(r.cause == "replay" for r in receptions)
        assert any(r.sender_eid == eids[0] for r in receptions)

    def test_empty_zone_captures_nothing(self, config_factory):
        world = self._world(config_factory)
        attack = RelayAttack(self._config(), RADIO)
        eids = _eids(0, 4, without={0, 1})
        relay_attack_step(attack, world, eids, 0)
        assert relay_attack_step(attack, world, eids, 1) == []
        assert attack.captured_eids == set()

    def test_fixed_capture_point(self, config_factory):
        world = self._world(config_factory)
        attack = RelayAttack(RelayConfig(capture_x=30.0, capture_y=10.0, capture_radius_m=1.0,
                                         target_agent_ids=[2], bidirectional=False), RADIO)
        eids = _eids(0, 4)
        relay_attack_step(attack, world, eids, 0)
        assert [r.sender_eid for r in relay_attack_step(attack, world, eids, 1)] == [eids[3]]


class TestSybil:

    def _station(self, config_factory):
        world = _world(config_factory, [[1.0, 0.0], [40.0, 40.0]])
        station = SybilStation(SybilConfig(attacker_x=0.0, attacker_y=0.0, encounter_radius_m=5.0,
                                           bucket_seconds=900), step_seconds=300)
        for tick in range(6):
            if tick == 3:
                world.positions[1] = [0.0, 2.0]
            station.listen(world, _eids(tick, 2), tick)
        return station

    def test_unique_and_ambiguous_buckets(self, config_factory):
        station = self._station(config_factory)
        assert station.bucket_ticks == 3
        attributions = sybil_identify(station, [KEYS[0]])
        assert [(a.bucket, a.candidates, a.attributed_agent) for a in attributions] == [(0, 1, 0), (1, 2, None)]
        assert attributions[0].window_ticks == (0, 2)

    def test_score(self, config_factory):
        station = self._station(config_factory)
        scores = score_sybil(sybil_identify(station, [KEYS[0]]), {KEYS[0].key_bytes: 0}, station, {0})
        assert scores["unique_attributions"] == 1
        assert scores["ambiguous_attributions"] == 1
        assert scores["reidentified_victims"] == [0]
        assert scores["precision"] == 1.0
        assert scores["recall"] == 1.0

    def test_registration_is_rate_limited(self, db_session):
        server = CentralisedServer(db_session, TracingParams(pow_difficulty_bits=4), RADIO,
                                   np.random.default_rng(3), step_seconds=300)
        station = SybilStation(SybilConfig(attacker_x=0.0, attacker_y=0.0), step_seconds=300)
        assert station.request_accounts(server, tick=0) == {"granted": 5, "denied": 95}
