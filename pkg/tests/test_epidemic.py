import math

import numpy as np
import pytest

from app.services.contacts import ExposureNotification
from app.services.epidemic import (
    apply_quarantine, check_conservation, progress_and_diagnose, seed_infections, stage_counts, transmit_step
)
from app.services.world import SimClock, Stage, World, pairwise_distances
from app.utils.random_streams import RandomStreams


def _world(config):
    streams = RandomStreams(config.rng_seed)
    return World(config, streams.stream("mobility"), streams.stream("population"))


def _trio(config_factory, **epidemic):
    """0号感染者，1号贴身，2号远离"""
    params = {"initial_infected": 0, "p_transmit_per_contact_minute": 1.0, **epidemic}
    world = _world(config_factory(n_agents=3, epidemic=params))
    world.positions[:] = [[10.0, 10.0], [11.0, 10.0], [50.0, 50.0]]
    health = world.agents[0].health
    health.stage = Stage.INFECTIOUS
    health.infectious_since = 0
    health.infectious_ticks = 10_000
    return world


def _notify(*agent_ids):
    return [ExposureNotification(agent_id=i, trigger_tick=0, risk_score=20.0, protocol="decentralised")
            for i in agent_ids]


class TestSeeding:

    def test_named_ids_then_random(self, config_factory):
        config = config_factory(epidemic={"initial_infected": 3, "initial_infected_ids": "2,5"})
        world = _world(config)
        streams = RandomStreams(1)
        chosen = seed_infections(world, config.epidemic, SimClock(step_seconds=300),
                                 streams.stream("population"), streams.stream("epidemic"))
        assert len(chosen) == 3
        assert {2, 5} <= set(chosen)
        assert all(world.agents[i].health.stage == Stage.INFECTIOUS for i in chosen)
        assert stage_counts(world)["I"] == 3


class TestTransmission:

    def test_certain_transmission_within_radius(self, config_factory):
        world = _trio(config_factory)
        clock = SimClock(step_seconds=300, tick=4)
        newly = transmit_step(world, world.config.epidemic, pairwise_distances(world), clock, np.random.default_rng(0))
        assert newly == [1]
        assert world.agents[1].health.stage == Stage.EXPOSED
        assert world.agents[1].health.since_tick == 4
        assert world.agents[2].health.stage == Stage.SUSCEPTIBLE

    def test_zero_probability(self, config_factory):
        world = _trio(config_factory, p_transmit_per_contact_minute=0.0)
        newly = transmit_step(world, world.config.epidemic, pairwise_distances(world),
                              SimClock(step_seconds=300), np.random.default_rng(0))
        assert newly == []

    def test_quarantine_blocks_transmission(self, config_factory):
        world = _trio(config_factory)
        world.agents[0].health.quarantined = True
        newly = transmit_step(world, world.config.epidemic, pairwise_distances(world),
                              SimClock(step_seconds=300), np.random.default_rng(0))
        assert newly == []

    def test_independent_of_app(self, config_factory):
        world = _trio(config_factory)
        for agent in world.agents:
            agent.has_app = False
        newly = transmit_step(world, world.config.epidemic, pairwise_distances(world),
                              SimClock(step_seconds=300), np.random.default_rng(0))
        assert newly == [1]

    def test_exposure_rate_matches_binomial(self, config_factory):
        world = _trio(config_factory, p_transmit_per_contact_minute=0.01)
        distances = pairwise_distances(world)
        clock = SimClock(step_seconds=300)
        rng = np.random.default_rng(42)
        trials, hits = 10_000, 0
        for _ in range(trials):
            if transmit_step(world, world.config.epidemic, distances, clock, rng):
                hits += 1
                world.agents[1].health.stage = Stage.SUSCEPTIBLE
        p = 1.0 - 0.99 ** 5
        sigma = math.sqrt(trials * p * (1.0 - p))
        assert abs(hits - trials * p) <= 3 * sigma


class TestProgression:

    def _exposed(self, config_factory, infectious_ticks):
        world = _world(config_factory(n_agents=1, epidemic={"initial_infected": 0, "test_delay_days": 0.01}))
        health = world.agents[0].health
        health.stage = Stage.EXPOSED
        health.incubation_ticks = 2
        health.infectious_ticks = infectious_ticks
        return world, health

    def test_full_course(self, config_factory):
        world, health = self._exposed(config_factory, infectious_ticks=10)
        params = world.config.epidemic
        diagnosed_at = None
        for tick in range(1, 20):
            if progress_and_diagnose(world, params, SimClock(step_seconds=300, tick=tick)):
                diagnosed_at = tick
            if tick == 2:
                assert health.stage == Stage.INFECTIOUS
        assert diagnosed_at == 5
        assert health.stage == Stage.RECOVERED
        assert not health.quarantined

    def test_recovery_before_diagnosis(self, config_factory):
        world, health = self._exposed(config_factory, infectious_ticks=2)
        params = world.config.epidemic
        diagnosed = []
        for tick in range(1, 10):
            diagnosed += progress_and_diagnose(world, params, SimClock(step_seconds=300, tick=tick))
        assert diagnosed == []
        assert health.stage == Stage.RECOVERED

    def test_diagnosed_agents_quarantine(self, config_factory):
        world, health = self._exposed(config_factory, infectious_ticks=100)
        for tick in range(1, 6):
            progress_and_diagnose(world, world.config.epidemic, SimClock(step_seconds=300, tick=tick))
        assert health.stage == Stage.DIAGNOSED
        assert health.quarantined


class TestQuarantine:

    def test_full_compliance(self, config_factory):
        world = _world(config_factory(n_agents=4, epidemic={"initial_infected": 0, "quarantine_days": 1}))
        world.agents[3].health.stage = Stage.RECOVERED
        clock = SimClock(step_seconds=300, tick=10)
        newly = apply_quarantine(world, _notify(1, 1, 3), world.config.epidemic, clock, np.random.default_rng(0))
        assert newly == [1]
        assert world.agents[1].health.quarantine_until == 10 + 288

        apply_quarantine(world, [], world.config.epidemic, SimClock(step_seconds=300, tick=298),
                         np.random.default_rng(0))
        assert not world.agents[1].health.quarantined

    def test_no_compliance(self, config_factory):
        world = _world(config_factory(n_agents=2, epidemic={"initial_infected": 0, "quarantine_compliance": 0.0}))
        rng = np.random.default_rng(0)
        assert apply_quarantine(world, _notify(0, 1), world.config.epidemic, SimClock(step_seconds=300), rng) == []

    @pytest.mark.parametrize("compliance", [0.3, 0.7])
    def test_partial_compliance_is_seeded(self, config_factory, compliance):
        config = config_factory(n_agents=30, epidemic={"initial_infected": 0, "quarantine_compliance": compliance})
        runs = []
        for _ in range(2):
            world = _world(config)
            runs.append(apply_quarantine(world, _notify(*range(30)), config.epidemic,
                                         SimClock(step_seconds=300), np.random.default_rng(5)))
        assert runs[0] == runs[1]
        assert 0 < len(runs[0]) < 30


class TestConservation:

    def test_counts_add_up(self, small_config):
        world = _world(small_config)
        check_conservation(world)
        assert sum(stage_counts(world).values()) == small_config.n_agents
