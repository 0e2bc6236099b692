"""
接触驱动的SEIR疫情：按真实距离传播（与是否安装应用无关），
确诊延迟、恢复和隔离响应。
"""
from app.core.exceptions import InvariantViolationException
from app.schemas.scenario import EpidemicParams
from app.services.contacts import ExposureNotification
from app.services.world import ALLOWED_TRANSITIONS, SimClock, Stage, World
from typing import Dict, Iterable, List
import math
import numpy as np
import logging

logger = logging.getLogger(__name__)


def _days_to_ticks(days: float, clock: SimClock) -> int:
    return max(1, int(round(days * clock.ticks_per_day)))


def _transition(world: World, agent_id: int, stage: Stage, tick: int) -> None:
    health = world.agents[agent_id].health
    if stage not in ALLOWED_TRANSITIONS[health.stage]:
        raise InvariantViolationException(
            "health_transition", f"agent {agent_id}: {health.stage.value} -> {stage.value}"
        )
    health.stage = stage
    health.since_tick = tick


def _draw_durations(world: World, agent_id: int, params: EpidemicParams, clock: SimClock,
                    rng: np.random.Generator) -> None:
    health = world.agents[agent_id].health
    if params.stochastic_durations:
        health.incubation_ticks = _days_to_ticks(rng.exponential(params.incubation_days), clock)
        health.infectious_ticks = _days_to_ticks(rng.exponential(params.infectious_days), clock)
    else:
        health.incubation_ticks = _days_to_ticks(params.incubation_days, clock)
        health.infectious_ticks = _days_to_ticks(params.infectious_days, clock)


def seed_infections(world: World, params: EpidemicParams, clock: SimClock,
                    population_rng: np.random.Generator, epidemic_rng: np.random.Generator) -> List[int]:
    """初始感染者：指定的id优先，不足 initial_infected 的部分随机补足；直接进入I阶段"""
    chosen = sorted(set(params.initial_infected_ids))
    missing = params.initial_infected - len(chosen)
    if missing > 0:
        others = np.array([i for i in range(world.n_agents) if i not in set(chosen)], dtype=np.int64)
        extra = population_rng.choice(others, size=min(missing, len(others)), replace=False)
        chosen = sorted(chosen + [int(i) for i in extra])
    for agent_id in chosen:
        health = world.agents[agent_id].health
        _draw_durations(world, agent_id, params, clock, epidemic_rng)
        health.stage = Stage.INFECTIOUS
        health.since_tick = clock.tick
        health.infectious_since = clock.tick
    logger.info(f"Seeded {len(chosen)} initial infections")
    return chosen


def transmit_step(world: World, params: EpidemicParams, distances: np.ndarray, clock: SimClock,
                  rng: np.random.Generator) -> List[int]:
    """一步传播，返回本tick新进入E阶段的人

    易感者在本tick内被感染的概率 = 1 - Π(1 - p_eff)^minutes，
    p_eff 在任一方处于隔离时乘以 quarantine_transmission_factor。
    """
    if world.n_agents == 0 or params.p_transmit_per_contact_minute <= 0:
        return []
    stages = [agent.health.stage for agent in world.agents]
    infectious = np.array([stage in (Stage.INFECTIOUS, Stage.DIAGNOSED) for stage in stages])
    susceptible = np.array([stage == Stage.SUSCEPTIBLE for stage in stages])
    if not infectious.any() or not susceptible.any():
        return []

    quarantined = world.quarantine_mask()
    sus_ids = np.flatnonzero(susceptible)
    inf_ids = np.flatnonzero(infectious)
    close = distances[np.ix_(sus_ids, inf_ids)] <= params.infection_radius_m
    if not close.any():
        return []

    p = params.p_transmit_per_contact_minute
    reduced = quarantined[sus_ids][:, None] | quarantined[inf_ids][None, :]
    p_eff = np.where(reduced, p * params.quarantine_transmission_factor, p)
    minutes = clock.step_seconds / 60.0
    escape = np.where(close, np.power(1.0 - p_eff, minutes), 1.0).prod(axis=1)
    at_risk = escape < 1.0
    if not at_risk.any():
        return []

    candidates = sus_ids[at_risk]
    draws = rng.random(len(candidates))
    newly = [int(agent_id) for agent_id, draw, esc in zip(candidates, draws, escape[at_risk]) if draw < 1.0 - esc]
    for agent_id in newly:
        _transition(world, agent_id, Stage.EXPOSED, clock.tick)
        _draw_durations(world, agent_id, params, clock, rng)
    return newly


def progress_and_diagnose(world: World, params: EpidemicParams, clock: SimClock) -> List[int]:
    """推进阶段：E→I（潜伏期满），I→确诊（检测延迟满），感染期满→R；返回本tick确诊的人

    感染期先于检测延迟结束的人不会被确诊。
    """
    tick = clock.tick
    test_delay = _days_to_ticks(params.test_delay_days, clock)
    diagnosed = []
    for agent in world.agents:
        health = agent.health
        if health.stage == Stage.EXPOSED and tick - health.since_tick >= health.incubation_ticks:
            _transition(world, agent.agent_id, Stage.INFECTIOUS, tick)
            health.infectious_since = tick
        if health.stage in (Stage.INFECTIOUS, Stage.DIAGNOSED):
            infected_for = tick - health.infectious_since
            if params.recovery_enabled and infected_for >= health.infectious_ticks:
                _transition(world, agent.agent_id, Stage.RECOVERED, tick)
                health.quarantined = False
                health.quarantine_until = None
                continue
            if health.stage == Stage.INFECTIOUS and infected_for >= test_delay:
                _transition(world, agent.agent_id, Stage.DIAGNOSED, tick)
                # 确诊者一律隔离，直到恢复
                health.quarantined = True
                health.quarantine_until = None
                diagnosed.append(agent.agent_id)
    return diagnosed


def apply_quarantine(world: World, notifications: Iterable[ExposureNotification], params: EpidemicParams,
                     clock: SimClock, rng: np.random.Generator) -> List[int]:
    """收到通知的人以 quarantine_compliance 的概率隔离 quarantine_days；到期解除"""
    tick = clock.tick
    for agent in world.agents:
        health = agent.health
        if health.quarantined and health.quarantine_until is not None and health.quarantine_until <= tick:
            health.quarantined = False
            health.quarantine_until = None

    newly = []
    duration = int(math.ceil(params.quarantine_days * clock.ticks_per_day))
    for agent_id in sorted({n.agent_id for n in notifications}):
        health = world.agents[agent_id].health
        if health.quarantined or health.stage == Stage.RECOVERED:
            continue
        compliance = params.quarantine_compliance
        if compliance <= 0:
            continue
        if compliance < 1 and rng.random() >= compliance:
            continue
        health.quarantined = True
        health.quarantine_until = tick + duration
        newly.append(agent_id)
    if newly:
        logger.debug(f"{len(newly)} agents entered quarantine at tick {tick}")
    return newly


def stage_counts(world: World) -> Dict[str, int]:
    counts = {stage.value: 0 for stage in Stage}
    for agent in world.agents:
        counts[agent.health.stage.value] += 1
    return counts


def check_conservation(world: World) -> None:
    counts = stage_counts(world)
    if sum(counts.values()) != world.n_agents:
        raise InvariantViolationException("conservation", f"{counts} != {world.n_agents}")
